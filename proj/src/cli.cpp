#include "mshubert/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "mshubert/analysis.hpp"
#include "mshubert/checkpoint.hpp"
#include "mshubert/config.hpp"
#include "mshubert/data.hpp"
#include "mshubert/errors.hpp"
#include "mshubert/trainer.hpp"

namespace mshubert {

namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::string mode;
  bool reverse_assignment = false;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "run configuration file")->check(CLI::ExistingFile);
  app->add_option("--set", o.overrides, "override, section.key=value (repeatable)")->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app->add_option("--seed", o.seed, "seed of every random stream");
  app->add_option("--threads", o.threads, "worker threads; computation is single-threaded, so any value runs bit-exact")
      ->check(CLI::PositiveNumber);
  app->add_option("--mode", o.mode, "training mode")->check(CLI::IsMember({"ms_hubert", "m_hubert", "s_hubert"}));
  app->add_flag("--reverse-assignment", o.reverse_assignment, "pair the finest labels with the deepest layer reversed");
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig cfg = o.config.empty() ? RunConfig::desk() : RunConfig::load(o.config);
  for (const auto& s : o.overrides) cfg.set_override(s);
  if (o.seed) cfg.model.seed = *o.seed;
  if (!o.mode.empty()) cfg.mode = parse_train_mode(o.mode);
  if (o.reverse_assignment) cfg.reverse_assignment = true;
  cfg.validate();
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write " + path);
  f << text;
}

std::string read_head(const std::string& path, std::size_t n) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open " + path);
  std::string s(n, '\0');
  f.read(s.data(), static_cast<std::streamsize>(n));
  s.resize(static_cast<std::size_t>(f.gcount()));
  return s;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(item, &used);
      if (item.find_first_not_of(" \t", used) != std::string::npos || v == 0) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::logic_error&) {
      throw ValidationError("--sizes: bad cluster size '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("--sizes: empty list");
  return out;
}

void print_labels(std::ostream& out, const LabelReport& r, const std::string& dir) {
  out << "labels: " << dir << "\n";
  for (std::size_t j = 0; j < r.sizes.size(); ++j)
    out << "  level " << j << ": " << r.sizes[j] << " clusters, distortion " << r.distortion[j] << "\n";
  out << "  frames " << r.frames << ", consistency " << (r.consistency.ok() ? "ok" : "FAILED") << " ("
      << r.consistency.mismatches << " mismatches), distortion checks " << r.distortion_checks << "\n";
}

int cmd_synth(std::ostream& out, const CommonOptions& common, const std::string& dir, SynthOptions so) {
  const RunConfig base = resolve(common);
  so.seed = base.model.seed;
  so.sample_rate = base.data.sample_rate;
  const SynthCorpus corpus = write_synth_corpus(dir, so, base.model);
  RunConfig run = base;
  const fs::path root(dir);
  run.data.manifest = (root / "manifest.tsv").string();
  run.data.label_dir = (root / "labels").string();
  run.data.checkpoint = (root / "checkpoint.bin").string();
  run.data.log = (root / "train.jsonl").string();
  write_text((root / "run.cfg").string(), run.to_text());
  out << "wrote " << corpus.manifest.entries.size() << " utterances to " << dir << "\n";
  out << "manifest " << corpus.manifest.path << "\nstates " << corpus.states_path << "\nconfig "
      << (root / "run.cfg").string() << "\n";
  return 0;
}

int cmd_pretrain(std::ostream& out, const RunConfig& cfg, const std::string& resume) {
  const TrainSummary s = pretrain(cfg, resume.empty() ? std::nullopt : std::optional<std::string>(resume));
  out << "steps " << s.metrics.size();
  if (!s.metrics.empty())
    out << " (" << s.metrics.front().step << ".." << s.metrics.back().step << "), loss " << s.metrics.front().loss
        << " -> " << s.metrics.back().loss;
  out << "\n";
  for (const auto& [step, v] : s.validation) out << "valid " << step << " " << v << "\n";
  out << "checkpoint " << s.checkpoint << "\n";
  if (!s.best_checkpoint.empty()) out << "best " << s.best_checkpoint << " (valid " << s.best_valid << ")\n";
  return 0;
}

int cmd_analyze(std::ostream& out, const CommonOptions& common, const std::string& checkpoint,
                const std::string& states, const std::string& out_path, std::string manifest, bool pool, double reg,
                bool untrained, const std::string& target) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const RunConfig rc = ck.config();
  if (manifest.empty()) manifest = common.config.empty() ? rc.data.manifest : resolve(common).data.manifest;
  if (manifest.empty()) throw ValidationError("analyze: no manifest (use --manifest or a config with data.manifest)");
  const Manifest m = load_manifest(manifest);
  if (m.empty()) throw ValidationError("analyze: manifest " + manifest + " is empty");
  const auto audio = load_audio(m, rc.data.sample_rate);
  const LabelSet targets = read_label_file(states);
  const Model model = untrained ? Model(rc.model, rc.cluster_sizes) : model_from_checkpoint(ck);
  LayerCurveOptions lo;
  lo.reg = reg;
  lo.pooled = pool;
  lo.checkpoint = untrained ? checkpoint + " (untrained)" : checkpoint;
  lo.target = target;
  const CcaReport r = layer_curve(model, audio, targets, lo);
  write_report(out_path, r);
  out << "items " << r.items << "\n";
  for (std::size_t l = 0; l < r.scores.size(); ++l) out << "layer " << l + 1 << " pwcca " << r.scores[l] << "\n";
  out << "auc " << r.auc << "\nreport " << out_path << "\n";
  return 0;
}

int cmd_inspect(std::ostream& out, const std::string& path) {
  const std::string head = read_head(path, 4);
  if (head == "MSHB") {
    const Checkpoint ck = load_checkpoint(path);
    const RunConfig rc = ck.config();
    std::size_t params = 0, optimiser = 0;
    for (const auto& t : ck.tensors) (t.name.rfind("adam.", 0) == 0 ? optimiser : params) += t.values.size();
    out << "checkpoint " << path << "\n  step " << ck.state.step << ", epoch " << ck.state.epoch << ", best valid "
        << ck.state.best_valid << "\n  mode " << to_string(rc.mode) << ", layers " << rc.model.n_layers << " x "
        << rc.model.hidden_dim << ", cluster sizes";
    for (auto k : rc.cluster_sizes) out << " " << k;
    out << "\n  tensors " << ck.tensors.size() << ", parameters " << params << ", optimiser values " << optimiser << "\n";
    return 0;
  }
  if (head == "MSKM") {
    const Codebook cb = load_codebook(path);
    out << "codebook " << path << "\n  k " << cb.k << ", dim " << cb.dim << ", parent map "
        << (cb.parent_map.empty() ? "none" : std::to_string(cb.parent_map.size()) + " entries") << ", fit iterations "
        << cb.distortion_trace.size() << "\n";
    return 0;
  }
  if (path.ends_with(".json")) {
    std::ifstream f(path);
    std::stringstream ss;
    ss << f.rdbuf();
    const CcaReport r = CcaReport::from_json(ss.str());
    out << "report " << path << " valid\n  target " << r.target << ", layers " << r.scores.size() << ", auc " << r.auc
        << "\n";
    return 0;
  }
  const LabelSet labels = read_label_file(path);
  std::size_t frames = 0;
  int top = -1;
  for (const auto& s : labels) {
    frames += s.size();
    for (int l : s) top = std::max(top, l);
  }
  out << "labels " << path << "\n  utterances " << labels.size() << ", frames " << frames << ", max label " << top
      << "\n";
  return 0;
}

int cmd_param_count(std::ostream& out, const CommonOptions& common, const std::string& preset, const std::string& sizes) {
  RunConfig cfg;
  if (!common.config.empty()) {
    cfg = resolve(common);
  } else {
    if (preset == "paper_base") cfg = RunConfig::paper_base();
    else if (preset == "desk") cfg = RunConfig::desk();
    else throw ValidationError("--preset: expected desk or paper_base, got '" + preset + "'");
    for (const auto& s : common.overrides) cfg.set_override(s);
  }
  if (!sizes.empty()) cfg.cluster_sizes = parse_sizes(sizes);
  cfg.model.validate();
  std::size_t width = 5;
  const auto table = parameter_table(cfg.model, cfg.cluster_sizes);
  for (const auto& row : table) width = std::max(width, row.group.size());
  std::size_t total = 0;
  for (const auto& row : table) {
    out << std::left << std::setw(static_cast<int>(width)) << row.group << "  " << std::right << std::setw(12)
        << row.count << "\n";
    total += row.count;
  }
  out << std::left << std::setw(static_cast<int>(width)) << "total" << "  " << std::right << std::setw(12) << total
      << "\n";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(total) / 1e6);
  out << "(" << buf << ")\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked / swapped two-view speech pre-training at desk scale"};
  app.name("mshubert");
  app.require_subcommand(1);

  CommonOptions common;
  SynthOptions so;
  std::string dir, resume, checkpoint, out_dir, states, report, manifest, path, preset = "desk", sizes,
      target = "states";
  std::size_t layer = 0;
  bool pool = false, untrained = false;
  double reg = 1e-6;

  auto* synth = app.add_subcommand("synth-data", "write a synthetic corpus, its generator states and a run config");
  add_common(synth, common);
  synth->add_option("--out", dir, "output directory")->required();
  synth->add_option("--utts", so.n_utts, "number of utterances")->check(CLI::PositiveNumber);
  synth->add_option("--states", so.n_states, "hidden generator states")->check(CLI::PositiveNumber);
  synth->add_option("--min-seconds", so.min_seconds, "shortest utterance");
  synth->add_option("--max-seconds", so.max_seconds, "longest utterance");
  synth->add_option("--noise", so.noise, "white noise level");

  auto* label = app.add_subcommand("label", "bootstrap hierarchical k-means labels");
  add_common(label, common);

  auto* train = app.add_subcommand("pretrain", "train on the configured manifest and labels");
  add_common(train, common);
  train->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);

  auto* relabel = app.add_subcommand("relabel", "labels from a trained checkpoint's layer");
  add_common(relabel, common);
  relabel->add_option("--checkpoint", checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  relabel->add_option("--layer", layer, "encoder layer (default data.relabel_layer)");
  relabel->add_option("--out-dir", out_dir, "label directory (default data.label_dir)");

  auto* analyze = app.add_subcommand("analyze", "per-layer pwcca against frame targets");
  add_common(analyze, common);
  analyze->add_option("--checkpoint", checkpoint, "checkpoint to analyse")->required()->check(CLI::ExistingFile);
  analyze->add_option("--states", states, "frame targets in label-file format")->required()->check(CLI::ExistingFile);
  analyze->add_option("--out", report, "report JSON path (CSV written alongside)")->required();
  analyze->add_option("--manifest", manifest, "corpus (default: the config's or checkpoint's)");
  analyze->add_option("--reg", reg, "covariance regulariser")->check(CLI::NonNegativeNumber);
  analyze->add_option("--target", target, "target name recorded in the report");
  analyze->add_flag("--pool", pool, "mean-pool features and targets over constant-label segments");
  analyze->add_flag("--untrained", untrained, "use a freshly initialised model with the checkpoint's config");

  auto* inspect = app.add_subcommand("inspect", "describe a checkpoint, codebook, label file or report");
  inspect->add_option("path", path, "file")->required()->check(CLI::ExistingFile);

  auto* count = app.add_subcommand("param-count", "parameter table of a model configuration");
  add_common(count, common);
  count->add_option("--preset", preset, "desk or paper_base");
  count->add_option("--sizes", sizes, "cluster sizes, comma separated");

  std::vector<std::string> argv_store{"mshubert"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (common.threads > 1) err << "note: --threads " << common.threads << " requested; running single-threaded\n";
    if (*synth) return cmd_synth(out, common, dir, so);
    if (*label) {
      const RunConfig cfg = resolve(common);
      print_labels(out, label_corpus(cfg), cfg.data.label_dir);
      return 0;
    }
    if (*train) return cmd_pretrain(out, resolve(common), resume);
    if (*relabel) {
      const RunConfig cfg = resolve(common);
      const std::size_t l = layer ? layer : cfg.data.relabel_layer;
      print_labels(out, relabel_corpus(cfg, checkpoint, l, out_dir), out_dir.empty() ? cfg.data.label_dir : out_dir);
      return 0;
    }
    if (*analyze) return cmd_analyze(out, common, checkpoint, states, report, manifest, pool, reg, untrained, target);
    if (*inspect) return cmd_inspect(out, path);
    if (*count) return cmd_param_count(out, common, preset, sizes);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return 2;
  } catch (const InsufficientDataError& e) {
    err << "insufficient data: " << e.what() << "\n";
    return 2;
  } catch (const InputTooShortError& e) {
    err << "input too short: " << e.what() << "\n";
    return 2;
  } catch (const DimensionError& e) {
    err << "dimension error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, out, err);
}

}  // namespace mshubert
