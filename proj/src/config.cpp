#include "mshubert/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "mshubert/errors.hpp"

namespace mshubert {

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::ms_hubert: return "ms_hubert";
    case TrainMode::m_hubert: return "m_hubert";
    case TrainMode::s_hubert: return "s_hubert";
  }
  return "?";
}

TrainMode parse_train_mode(const std::string& text) {
  if (text == "ms_hubert") return TrainMode::ms_hubert;
  if (text == "m_hubert") return TrainMode::m_hubert;
  if (text == "s_hubert") return TrainMode::s_hubert;
  throw ValidationError("unknown mode '" + text + "' (expected ms_hubert, m_hubert or s_hubert)");
}

ForwardMode forward_mode(TrainMode mode) { return mode == TrainMode::m_hubert ? ForwardMode::no_swap : ForwardMode::ms_hubert; }

std::size_t OptimizerConfig::warmup_steps() const {
  return static_cast<std::size_t>(std::floor(warmup_frac * static_cast<double>(total_steps) + 0.5));
}

double OptimizerConfig::lr_at(std::size_t step) const {
  const std::size_t w = warmup_steps();
  if (step <= w) return w == 0 ? lr : lr * static_cast<double>(step) / static_cast<double>(w);
  if (step >= total_steps) return 0.0;
  return lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - w);
}

RunConfig RunConfig::desk() { return {}; }

RunConfig RunConfig::paper_base() {
  RunConfig c;
  c.model = ModelConfig::paper_base();
  c.cluster_sizes = {1000, 500, 250, 125, 50, 25};
  c.drop = 2;
  c.optimizer.lr = 5e-4;
  c.optimizer.total_steps = 400000;
  c.data.sample_rate = 16000;
  c.data.batch_seconds = 87.5;
  c.data.relabel_layer = 7;
  return c;
}

LayerAssignment RunConfig::assignment() const {
  if (assignment_text == "auto")
    return make_assignment(model.n_layers, cluster_sizes, intermediate_frac, drop, reverse_assignment);
  auto a = LayerAssignment::parse(assignment_text, cluster_sizes);
  if (assignment_text.find(';') == std::string::npos) a.drop = drop;
  return a;
}

void RunConfig::validate() const {
  model.validate();
  if (cluster_sizes.empty()) throw ValidationError("objective.cluster_sizes must not be empty");
  for (std::size_t j = 0; j < cluster_sizes.size(); ++j) {
    if (cluster_sizes[j] < 2) throw ValidationError("objective.cluster_sizes: every codebook needs at least 2 clusters");
    if (j > 0 && cluster_sizes[j] >= cluster_sizes[j - 1])
      throw ValidationError("objective.cluster_sizes must be strictly decreasing");
  }
  if (mode == TrainMode::s_hubert && cluster_sizes.size() != 1)
    throw ValidationError("mode s_hubert uses a single codebook but " + std::to_string(cluster_sizes.size()) +
                          " cluster sizes are configured");
  const auto a = assignment();
  a.validate(model.n_layers, cluster_sizes, reverse_assignment);
  if (a.pairs.size() != cluster_sizes.size())
    throw ValidationError("assignment: every codebook needs exactly one layer");
  if (mode == TrainMode::s_hubert && a.drop != 0) throw ValidationError("mode s_hubert requires drop = 0");
  if (!(objective.temperature > 0.0)) throw ValidationError("objective.temperature must be positive");
  const auto& o = optimizer;
  if (!(o.lr >= 0.0)) throw ValidationError("optimizer.lr must be non-negative");
  if (!(o.beta1 >= 0.0 && o.beta1 < 1.0 && o.beta2 >= 0.0 && o.beta2 < 1.0))
    throw ValidationError("optimizer betas must lie in [0, 1)");
  if (!(o.eps > 0.0) || !(o.weight_decay >= 0.0) || !(o.clip_norm >= 0.0))
    throw ValidationError("optimizer: eps must be positive; weight_decay and clip_norm non-negative");
  if (!(o.warmup_frac >= 0.0 && o.warmup_frac < 1.0)) throw ValidationError("optimizer.warmup_frac must lie in [0, 1)");
  if (o.total_steps == 0 || o.total_steps <= o.warmup_steps())
    throw ValidationError("optimizer.total_steps must exceed the warmup steps");
  if (data.sample_rate == 0) throw ValidationError("data.sample_rate must be positive");
  if (!(data.batch_seconds > 0.0)) throw ValidationError("data.batch_seconds must be positive");
  if (!(data.valid_fraction >= 0.0 && data.valid_fraction < 1.0))
    throw ValidationError("data.valid_fraction must lie in [0, 1)");
  if (data.relabel_layer < 1 || data.relabel_layer > model.n_layers)
    throw ValidationError("data.relabel_layer " + std::to_string(data.relabel_layer) + " outside [1, " +
                          std::to_string(model.n_layers) + "]");
  if (data.kmeans_iters == 0 || data.kmeans_restarts == 0)
    throw ValidationError("data.kmeans_iters and data.kmeans_restarts must be positive");
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_number(const std::string& text, const std::string& key) {
  const auto s = trim(text);
  T v{};
  const auto* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (s.empty() || res.ec != std::errc() || res.ptr != end)
    throw ValidationError(key + ": '" + s + "' is not a valid number");
  return v;
}

double parse_real(const std::string& text, const std::string& key) {
  const auto s = trim(text);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument("");
    return v;
  } catch (const std::logic_error&) {
    throw ValidationError(key + ": '" + s + "' is not a finite real number");
  }
}

bool parse_bool(const std::string& text, const std::string& key) {
  const auto s = trim(text);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ValidationError(key + ": expected true or false, got '" + s + "'");
}

std::vector<std::size_t> parse_sizes(const std::string& text, const std::string& key) {
  std::vector<std::size_t> out;
  for (const auto& item : split(text, ',')) out.push_back(parse_number<std::size_t>(item, key));
  if (out.empty()) throw ValidationError(key + ": empty list");
  return out;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::string section, key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Get>
Field size_field(std::string section, std::string key, Get member) {
  return {section, key,
          [member](RunConfig& c, const std::string& v, const std::string& k) { member(c) = parse_number<std::size_t>(v, k); },
          [member](const RunConfig& c) { return std::to_string(member(c)); }};
}

template <typename Get>
Field real_field(std::string section, std::string key, Get member) {
  return {section, key, [member](RunConfig& c, const std::string& v, const std::string& k) { member(c) = parse_real(v, k); },
          [member](const RunConfig& c) { return format_double(member(c)); }};
}

template <typename Get>
Field bool_field(std::string section, std::string key, Get member) {
  return {section, key, [member](RunConfig& c, const std::string& v, const std::string& k) { member(c) = parse_bool(v, k); },
          [member](const RunConfig& c) { return std::string(member(c) ? "true" : "false"); }};
}

template <typename Get>
Field string_field(std::string section, std::string key, Get member) {
  return {section, key, [member](RunConfig& c, const std::string& v, const std::string&) { member(c) = trim(v); },
          [member](const RunConfig& c) { return member(c); }};
}

#define MEMBER(expr) [](auto& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"model", "conv_stack",
                 [](RunConfig& c, const std::string& v, const std::string& k) {
                   c.model.conv_stack.clear();
                   for (const auto& item : split(v, ',')) {
                     const auto parts = split(item, ':');
                     if (parts.size() != 3) throw ValidationError(k + ": expected channels:kernel:stride, got '" + item + "'");
                     c.model.conv_stack.push_back({parse_number<std::size_t>(parts[0], k), parse_number<std::size_t>(parts[1], k),
                                                   parse_number<std::size_t>(parts[2], k)});
                   }
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.model.conv_stack.size(); ++i) {
                     const auto& l = c.model.conv_stack[i];
                     s += (i ? ", " : "") + std::to_string(l.channels) + ":" + std::to_string(l.kernel) + ":" +
                          std::to_string(l.stride);
                   }
                   return s;
                 }});
    f.push_back(bool_field("model", "conv_bias", MEMBER(model.conv_bias)));
    f.push_back(size_field("model", "n_layers", MEMBER(model.n_layers)));
    f.push_back(size_field("model", "hidden_dim", MEMBER(model.hidden_dim)));
    f.push_back(size_field("model", "n_heads", MEMBER(model.n_heads)));
    f.push_back(size_field("model", "ffn_dim", MEMBER(model.ffn_dim)));
    f.push_back(real_field("model", "mask_start_prob", MEMBER(model.mask_start_prob)));
    f.push_back(size_field("model", "mask_span_len", MEMBER(model.mask_span_len)));
    f.push_back(size_field("model", "proj_dim", MEMBER(model.proj_dim)));
    f.push_back({"model", "positional",
                 [](RunConfig& c, const std::string& v, const std::string& k) {
                   const auto s = trim(v);
                   if (s == "learned") c.model.positional = PositionalKind::learned;
                   else if (s == "conv") c.model.positional = PositionalKind::conv;
                   else throw ValidationError(k + ": expected learned or conv, got '" + s + "'");
                 },
                 [](const RunConfig& c) { return std::string(c.model.positional == PositionalKind::conv ? "conv" : "learned"); }});
    f.push_back(size_field("model", "max_positions", MEMBER(model.max_positions)));
    f.push_back(size_field("model", "pos_conv_kernel", MEMBER(model.pos_conv_kernel)));
    f.push_back(size_field("model", "pos_conv_groups", MEMBER(model.pos_conv_groups)));
    f.push_back(real_field("model", "dropout", MEMBER(model.dropout)));
    f.push_back(real_field("model", "layer_norm_eps", MEMBER(model.layer_norm_eps)));
    f.push_back({"model", "seed",
                 [](RunConfig& c, const std::string& v, const std::string& k) { c.model.seed = parse_number<std::uint64_t>(v, k); },
                 [](const RunConfig& c) { return std::to_string(c.model.seed); }});

    f.push_back({"objective", "mode", [](RunConfig& c, const std::string& v, const std::string&) { c.mode = parse_train_mode(trim(v)); },
                 [](const RunConfig& c) { return to_string(c.mode); }});
    f.push_back({"objective", "cluster_sizes",
                 [](RunConfig& c, const std::string& v, const std::string& k) { c.cluster_sizes = parse_sizes(v, k); },
                 [](const RunConfig& c) { return join_sizes(c.cluster_sizes); }});
    f.push_back(real_field("objective", "intermediate_frac", MEMBER(intermediate_frac)));
    f.push_back(string_field("objective", "assignment", MEMBER(assignment_text)));
    f.push_back(size_field("objective", "drop", MEMBER(drop)));
    f.push_back(bool_field("objective", "reverse_assignment", MEMBER(reverse_assignment)));
    f.push_back(real_field("objective", "temperature", MEMBER(objective.temperature)));
    f.push_back(bool_field("objective", "both_streams", MEMBER(objective.both_streams)));

    f.push_back(real_field("optimizer", "lr", MEMBER(optimizer.lr)));
    f.push_back(real_field("optimizer", "beta1", MEMBER(optimizer.beta1)));
    f.push_back(real_field("optimizer", "beta2", MEMBER(optimizer.beta2)));
    f.push_back(real_field("optimizer", "weight_decay", MEMBER(optimizer.weight_decay)));
    f.push_back(real_field("optimizer", "eps", MEMBER(optimizer.eps)));
    f.push_back(real_field("optimizer", "warmup_frac", MEMBER(optimizer.warmup_frac)));
    f.push_back(size_field("optimizer", "total_steps", MEMBER(optimizer.total_steps)));
    f.push_back(real_field("optimizer", "clip_norm", MEMBER(optimizer.clip_norm)));

    f.push_back(string_field("data", "manifest", MEMBER(data.manifest)));
    f.push_back(string_field("data", "label_dir", MEMBER(data.label_dir)));
    f.push_back(string_field("data", "checkpoint", MEMBER(data.checkpoint)));
    f.push_back(string_field("data", "log", MEMBER(data.log)));
    f.push_back({"data", "sample_rate",
                 [](RunConfig& c, const std::string& v, const std::string& k) { c.data.sample_rate = parse_number<std::uint32_t>(v, k); },
                 [](const RunConfig& c) { return std::to_string(c.data.sample_rate); }});
    f.push_back(real_field("data", "batch_seconds", MEMBER(data.batch_seconds)));
    f.push_back(real_field("data", "valid_fraction", MEMBER(data.valid_fraction)));
    f.push_back(size_field("data", "valid_every", MEMBER(data.valid_every)));
    f.push_back(size_field("data", "checkpoint_every", MEMBER(data.checkpoint_every)));
    f.push_back({"data", "bootstrap",
                 [](RunConfig& c, const std::string& v, const std::string& k) {
                   const auto s = trim(v);
                   if (s == "filterbank") c.data.bootstrap = BootstrapKind::filterbank;
                   else if (s == "random_model") c.data.bootstrap = BootstrapKind::random_model;
                   else throw ValidationError(k + ": expected filterbank or random_model, got '" + s + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.data.bootstrap == BootstrapKind::filterbank ? "filterbank" : "random_model");
                 }});
    f.push_back(size_field("data", "relabel_layer", MEMBER(data.relabel_layer)));
    f.push_back(size_field("data", "kmeans_iters", MEMBER(data.kmeans_iters)));
    f.push_back(size_field("data", "kmeans_restarts", MEMBER(data.kmeans_restarts)));
    return f;
  }();
  return table;
}

#undef MEMBER

const Field& find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields())
    if (f.section == section && f.key == key) return f;
  throw ValidationError("unknown config key '" + section + "." + key + "'");
}

void apply(RunConfig& c, const std::string& section, const std::string& key, const std::string& value) {
  if (section == "model" && key == "preset") {
    const auto s = trim(value);
    const auto seed = c.model.seed;
    if (s == "desk") c.model = ModelConfig::desk();
    else if (s == "paper_base") c.model = ModelConfig::paper_base();
    else throw ValidationError("model.preset: expected desk or paper_base, got '" + s + "'");
    c.model.seed = seed;
    return;
  }
  find_field(section, key).set(c, value, section + "." + key);
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.section + "." + f.key);
  return out;
}

std::vector<ConfigLine> parse_config_lines(const std::string& text, const std::string& origin) {
  std::vector<ConfigLine> out;
  std::istringstream is(text);
  std::string raw, section;
  std::size_t n = 0;
  while (std::getline(is, raw)) {
    ++n;
    auto line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(n);
    if (line.front() == '[') {
      if (line.back() != ']') throw ValidationError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError(where + ": expected key = value");
    if (section.empty()) throw ValidationError(where + ": key outside of any section");
    out.push_back({section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), n});
  }
  return out;
}

void RunConfig::set(const std::string& dotted, const std::string& value) {
  const auto dot = dotted.find('.');
  if (dot == std::string::npos) throw ValidationError("override '" + dotted + "' must be section.key");
  apply(*this, trim(dotted.substr(0, dot)), trim(dotted.substr(dot + 1)), value);
}

void RunConfig::set_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ValidationError("override '" + assignment + "' must look like section.key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string RunConfig::to_text() const {
  std::string out, section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(*this) + "\n";
  }
  return out;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  static const std::set<std::string> sections{"model", "objective", "optimizer", "data"};
  RunConfig c;
  bool model_keys = false;
  for (const auto& l : parse_config_lines(text, origin)) {
    const auto where = origin + ":" + std::to_string(l.line) + ": ";
    if (!sections.count(l.section)) throw ValidationError(where + "unknown section [" + l.section + "]");
    if (l.section == "model" && l.key == "preset" && model_keys)
      throw ValidationError(where + "model.preset must precede the other [model] keys");
    if (l.section == "model") model_keys = true;
    try {
      apply(c, l.section, l.key, l.value);
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

}  // namespace mshubert
