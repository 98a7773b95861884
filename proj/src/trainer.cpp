#include "mshubert/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <json.hpp>

#include "mshubert/audio.hpp"
#include "mshubert/data.hpp"
#include "mshubert/labeler.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mshubert {

namespace {

constexpr std::uint64_t kStepStream = 0x7a11;
constexpr std::uint64_t kBatchStream = 0xba7c0000;
constexpr std::uint64_t kValidMaskStream = 0x5a11d;
constexpr std::uint64_t kValidBatchStream = 0xda7a;

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

// Activations are freed and reallocated every step; keeping large blocks on
// the heap instead of mmap/munmap avoids a page-fault storm.
void keep_large_blocks() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)once;
#endif
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

std::pair<std::vector<Utterance>, std::vector<Utterance>> split_train_valid(std::vector<Utterance> all,
                                                                            double valid_fraction) {
  if (all.empty()) return {};
  auto n_valid = static_cast<std::size_t>(std::floor(valid_fraction * static_cast<double>(all.size()) + 0.5));
  n_valid = std::min(n_valid, all.size() - 1);
  std::vector<Utterance> valid(std::make_move_iterator(all.end() - static_cast<std::ptrdiff_t>(n_valid)),
                               std::make_move_iterator(all.end()));
  all.resize(all.size() - n_valid);
  return {std::move(all), std::move(valid)};
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> lengths, std::size_t max_samples,
                                                   Rng& rng) {
  std::vector<std::size_t> order(lengths.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order, rng);
  // buckets of roughly four batches, each sorted by length before packing
  std::vector<std::vector<std::size_t>> batches;
  std::size_t begin = 0;
  while (begin < order.size()) {
    std::size_t end = begin, total = 0;
    while (end < order.size() && (end == begin || total + lengths[order[end]] <= 4 * max_samples)) total += lengths[order[end++]];
    std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return lengths[a] < lengths[b]; });
    std::vector<std::size_t> cur;
    std::size_t cur_total = 0;
    for (std::size_t i = begin; i < end; ++i) {
      const auto len = lengths[order[i]];
      if (!cur.empty() && cur_total + len > max_samples) {
        batches.push_back(std::move(cur));
        cur.clear();
        cur_total = 0;
      }
      cur.push_back(order[i]);
      cur_total += len;
    }
    if (!cur.empty()) batches.push_back(std::move(cur));
    begin = end;
  }
  shuffle(batches, rng);
  return batches;
}

AdamW::AdamW(const OptimizerConfig& cfg, const std::vector<NamedParameter>& params) : cfg_(cfg) {
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::update(std::vector<NamedParameter>& params, double lr, std::size_t t) {
  if (params.size() != m_.size()) throw ContractError("AdamW: parameter list changed");
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t)), c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor;
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      const double step = (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps) + cfg_.weight_decay * w[k];
      w[k] -= lr * step;
    }
  }
}

std::string StepMetrics::to_json(bool timing) const {
  json j;
  j["step"] = step;
  j["loss"] = loss;
  json pairs = json::array();
  for (const auto& t : terms) {
    json p;
    p["layer"] = t.pair.layer;
    p["k"] = t.pair.codebook < cluster_sizes.size() ? cluster_sizes[t.pair.codebook] : 0;
    p["loss"] = t.value;
    pairs.push_back(p);
  }
  j["pair_losses"] = pairs;
  j["grad_norm"] = grad_norm;
  j["lr"] = lr;
  if (timing) j["wall_ms"] = wall_ms;
  j["swap_invocations"] = swap_invocations;
  j["mpl_terms"] = mpl_terms;
  j["utterances"] = utterances;
  j["masked_frames"] = masked_frames;
  return j.dump();
}

namespace {

void check_labels(const std::vector<Utterance>& utts, const RunConfig& cfg) {
  for (const auto& u : utts) {
    if (u.labels.size() != cfg.cluster_sizes.size())
      throw ValidationError("utterance " + u.id + ": " + std::to_string(u.labels.size()) + " label sets for " +
                            std::to_string(cfg.cluster_sizes.size()) + " codebooks");
    const auto t = cfg.model.frames_for(u.audio.size());
    for (std::size_t j = 0; j < u.labels.size(); ++j) {
      if (u.labels[j].size() != t)
        throw ValidationError("utterance " + u.id + ": " + std::to_string(u.labels[j].size()) + " labels for " +
                              std::to_string(t) + " frames");
      for (const int l : u.labels[j])
        if (l < 0 || static_cast<std::size_t>(l) >= cfg.cluster_sizes[j])
          throw ValidationError("utterance " + u.id + ": label " + std::to_string(l) + " out of range");
    }
  }
}

}  // namespace

Trainer::Trainer(RunConfig cfg, std::vector<Utterance> train, std::vector<Utterance> valid)
    : cfg_(std::move(cfg)),
      assignment_((cfg_.validate(), cfg_.assignment())),
      model_(cfg_.model, cfg_.cluster_sizes),
      adam_(cfg_.optimizer, model_.parameters()),
      rng_(cfg_.model.seed, kStepStream),
      train_(std::move(train)),
      valid_(std::move(valid)) {
  if (train_.empty()) throw ValidationError("no training utterances");
  keep_large_blocks();
  check_labels(train_, cfg_);
  check_labels(valid_, cfg_);
}

Trainer::Trainer(const Checkpoint& ckpt, std::vector<Utterance> train, std::vector<Utterance> valid)
    : Trainer(ckpt.config(), std::move(train), std::move(valid)) {
  restore_parameters(model_, ckpt);
  const auto& params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* m = ckpt.find("adam.m." + params[i].name);
    const auto* v = ckpt.find("adam.v." + params[i].name);
    if (!m || !v) throw FormatError("checkpoint: missing optimiser moments for " + params[i].name);
    if (m->values.size() != params[i].tensor.numel() || v->values.size() != params[i].tensor.numel())
      throw FormatError("checkpoint: optimiser moments for " + params[i].name + " have the wrong size");
    adam_.first_moments()[i] = m->values;
    adam_.second_moments()[i] = v->values;
  }
  state_ = ckpt.state;
  if (!state_.rng.empty()) rng_.set_state(state_.rng);
}

void Trainer::init_batches() {
  std::vector<std::size_t> lengths;
  for (const auto& u : train_) lengths.push_back(u.audio.size());
  const auto max_samples = static_cast<std::size_t>(cfg_.data.batch_seconds * cfg_.data.sample_rate);
  Rng r(cfg_.model.seed, kBatchStream + state_.epoch);
  epoch_batches_ = make_batches(lengths, max_samples, r);
  batches_epoch_ = state_.epoch;
}

const std::vector<std::size_t>& Trainer::next_batch() {
  if (batches_epoch_ != state_.epoch) init_batches();
  if (state_.cursor >= epoch_batches_.size()) {
    ++state_.epoch;
    state_.cursor = 0;
    init_batches();
  }
  return epoch_batches_[state_.cursor++];
}

StepMetrics Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  if (done()) throw ContractError("trainer: all " + std::to_string(cfg_.optimizer.total_steps) + " steps already taken");
  const auto batch = next_batch();
  const std::size_t t = ++state_.step;

  StepMetrics out;
  out.step = t;
  out.cluster_sizes = cfg_.cluster_sizes;
  out.utterances = batch.size();

  for (auto& p : model_.parameters()) p.tensor.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    ForwardContext ctx{true, &rng_, &out.swap_invocations};
    std::vector<ViewPair> views;
    std::vector<MaskSpec> masks;
    std::vector<UtteranceLabels> labels;
    for (const auto i : batch) {
      const auto x = model_.conv_downsample(train_[i].audio, ctx);
      auto mask = sample_mask(x.dim(0), cfg_.model, rng_);
      out.masked_frames += mask.indices.size();
      views.push_back(make_views(x, mask, model_.mask_embedding()));
      masks.push_back(std::move(mask));
      labels.push_back(train_[i].labels);
    }
    const auto outputs = model_.forward(std::span<const ViewPair>(views), forward_mode(cfg_.mode), ctx);
    auto mc = multicluster_loss(outputs, labels, masks, assignment_, model_, cfg_.objective, rng_);
    out.loss = mc.loss.item();
    out.terms = mc.terms;
    out.mpl_terms = mc.terms.size();
    if (!std::isfinite(out.loss)) {
      json dump;
      dump["step"] = t;
      dump["reason"] = "non-finite loss";
      json ids = json::array();
      for (const auto i : batch) ids.push_back(train_[i].id);
      dump["utterances"] = ids;
      json terms = json::array();
      for (const auto& term : mc.terms) terms.push_back({{"layer", term.pair.layer}, {"loss", std::to_string(term.value)}});
      dump["terms"] = terms;
      json bad = json::array();
      for (const auto& p : model_.parameters())
        if (!all_finite(p.tensor.data())) bad.push_back(p.name);
      dump["non_finite_parameters"] = bad;
      std::string where;
      if (!diagnostic_path.empty()) {
        std::ofstream(diagnostic_path) << dump.dump(2) << "\n";
        where = " (diagnostics in " + diagnostic_path + ")";
      }
      throw NumericError("step " + std::to_string(t) + ": non-finite loss" + where);
    }
    tape.backward(mc.loss);
  }

  double sq = 0.0;
  for (const auto& p : model_.parameters())
    for (const double g : p.tensor.grad()) sq += g * g;
  out.grad_norm = std::sqrt(sq);
  if (!std::isfinite(out.grad_norm)) {
    std::string names;
    for (const auto& p : model_.parameters())
      if (!all_finite(p.tensor.grad())) names += (names.empty() ? "" : ", ") + p.name;
    if (!diagnostic_path.empty()) {
      json dump{{"step", t}, {"reason", "non-finite gradient"}, {"parameters", names}};
      std::ofstream(diagnostic_path) << dump.dump(2) << "\n";
    }
    throw NumericError("step " + std::to_string(t) + ": non-finite gradient in " + names);
  }
  if (cfg_.optimizer.clip_norm > 0.0 && out.grad_norm > cfg_.optimizer.clip_norm) {
    const double s = cfg_.optimizer.clip_norm / out.grad_norm;
    for (auto& p : model_.parameters())
      for (auto& g : p.tensor.mutable_grad()) g *= s;
  }
  if (gradient_probe) gradient_probe(model_);
  out.lr = cfg_.optimizer.lr_at(t);
  adam_.update(model_.parameters(), out.lr, t);
  for (auto& p : model_.parameters()) p.tensor.zero_grad();

  state_.rng = rng_.state();
  out.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

double Trainer::validation_loss() const {
  if (valid_.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> lengths;
  for (const auto& u : valid_) lengths.push_back(u.audio.size());
  Rng batch_rng(cfg_.model.seed, kValidBatchStream);
  const auto batches =
      make_batches(lengths, static_cast<std::size_t>(cfg_.data.batch_seconds * cfg_.data.sample_rate), batch_rng);
  Rng mask_rng(cfg_.model.seed, kValidMaskStream);
  std::vector<std::size_t> all(assignment_.pairs.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  double total = 0.0;
  for (const auto& batch : batches) {
    std::vector<ViewPair> views;
    std::vector<MaskSpec> masks;
    std::vector<UtteranceLabels> labels;
    for (const auto i : batch) {
      const auto x = model_.conv_downsample(valid_[i].audio);
      auto mask = sample_mask(x.dim(0), cfg_.model, mask_rng);
      views.push_back(make_views(x, mask, model_.mask_embedding()));
      masks.push_back(std::move(mask));
      labels.push_back(valid_[i].labels);
    }
    const auto outputs = model_.forward(std::span<const ViewPair>(views), forward_mode(cfg_.mode));
    total += multicluster_loss_subset(outputs, labels, masks, assignment_, model_, cfg_.objective, all).loss.item();
  }
  return total / static_cast<double>(batches.size());
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.config_text = cfg_.to_text();
  ck.state = state_;
  ck.state.rng = rng_.state();
  ck.tensors = stored_parameters(model_);
  const auto& params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    ck.tensors.push_back({"adam.m." + params[i].name, params[i].tensor.shape(), adam_.first_moments()[i]});
  for (std::size_t i = 0; i < params.size(); ++i)
    ck.tensors.push_back({"adam.v." + params[i].name, params[i].tensor.shape(), adam_.second_moments()[i]});
  return ck;
}

double TrainSummary::mean_loss(std::size_t begin, std::size_t end) const {
  end = std::min(end, metrics.size());
  if (begin >= end) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += metrics[i].loss;
  return s / static_cast<double>(end - begin);
}

namespace {

std::vector<Utterance> load_utterances(const RunConfig& cfg) {
  if (cfg.data.manifest.empty()) throw ValidationError("data.manifest is not set");
  const auto manifest = load_manifest(cfg.data.manifest);
  if (manifest.empty()) throw ValidationError("manifest " + cfg.data.manifest + " is empty; nothing to train on");
  if (cfg.data.label_dir.empty()) throw ValidationError("data.label_dir is not set");
  auto audio = load_audio(manifest, cfg.data.sample_rate);
  auto labels = load_labels(manifest, cfg.data.label_dir, cfg.cluster_sizes, cfg.model);
  std::vector<Utterance> out;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i)
    out.push_back({manifest.entries[i].id, std::move(audio[i]), std::move(labels[i])});
  return out;
}

TrainSummary run_training(Trainer& trainer, const RunConfig& paths, bool append_log) {
  TrainSummary summary;
  std::ofstream log;
  if (!paths.data.log.empty()) {
    if (const auto dir = fs::path(paths.data.log).parent_path(); !dir.empty()) fs::create_directories(dir);
    log.open(paths.data.log, append_log ? std::ios::app : std::ios::trunc);
    if (!log) throw ValidationError("cannot write metrics log " + paths.data.log);
  }
  summary.checkpoint = paths.data.checkpoint;
  if (!paths.data.checkpoint.empty()) summary.best_checkpoint = paths.data.checkpoint + ".best";
  if (!paths.data.log.empty()) trainer.diagnostic_path = paths.data.log + ".diag.json";

  const auto valid_every = paths.data.valid_every;
  while (!trainer.done()) {
    auto m = trainer.step();
    if (log) log << m.to_json() << "\n" << std::flush;
    const bool last = trainer.done();
    if ((valid_every > 0 && m.step % valid_every == 0) || last) {
      const double v = trainer.validation_loss();
      if (!std::isnan(v)) {
        summary.validation.emplace_back(m.step, v);
        if (log) log << json{{"step", m.step}, {"valid_loss", v}}.dump() << "\n" << std::flush;
        if (v < trainer.state().best_valid) {
          trainer.set_best_valid(v);
          if (!summary.best_checkpoint.empty()) save_checkpoint(summary.best_checkpoint, trainer.checkpoint());
        }
      }
    }
    if (!paths.data.checkpoint.empty() && paths.data.checkpoint_every > 0 && m.step % paths.data.checkpoint_every == 0)
      save_checkpoint(paths.data.checkpoint, trainer.checkpoint());
    summary.metrics.push_back(std::move(m));
  }
  summary.best_valid = trainer.state().best_valid;
  if (!paths.data.checkpoint.empty()) save_checkpoint(paths.data.checkpoint, trainer.checkpoint());
  return summary;
}

}  // namespace

TrainSummary pretrain(const RunConfig& cfg, const std::optional<std::string>& resume) {
  cfg.validate();
  auto [train, valid] = split_train_valid(load_utterances(cfg), cfg.data.valid_fraction);
  if (resume) {
    Trainer trainer(load_checkpoint(*resume), std::move(train), std::move(valid));
    return run_training(trainer, cfg, true);
  }
  Trainer trainer(cfg, std::move(train), std::move(valid));
  return run_training(trainer, cfg, false);
}

TrainSummary train_in_memory(const RunConfig& cfg, std::vector<Utterance> utterances) {
  auto [train, valid] = split_train_valid(std::move(utterances), cfg.data.valid_fraction);
  Trainer trainer(cfg, std::move(train), std::move(valid));
  RunConfig quiet = cfg;
  quiet.data.log.clear();
  quiet.data.checkpoint.clear();
  return run_training(trainer, quiet, false);
}

// ---- labelling ----

namespace {

LabelReport write_labels(const RunConfig& cfg, const Tensor& features, std::span<const std::size_t> frames,
                         const std::string& out_dir) {
  if (out_dir.empty()) throw ValidationError("data.label_dir is not set");
  KMeansOptions opts;
  opts.max_iters = cfg.data.kmeans_iters;
  opts.restarts = cfg.data.kmeans_restarts;
  const auto hierarchy = build_hierarchy(features, cfg.cluster_sizes, cfg.model.seed, opts);
  const auto sets = split_labels(assign_labels(features, hierarchy), frames);

  fs::create_directories(out_dir);
  for (std::size_t j = 0; j < sets.size(); ++j) write_label_file(label_file_path(out_dir, j), sets[j]);
  save_hierarchy(out_dir, hierarchy);

  // validate what actually landed on disk
  std::vector<LabelSet> reread;
  for (std::size_t j = 0; j < sets.size(); ++j) reread.push_back(read_label_file(label_file_path(out_dir, j)));
  LabelReport report;
  report.sizes = hierarchy.sizes();
  report.frames = features.dim(0);
  for (const auto& level : hierarchy.levels) {
    report.distortion.push_back(level.distortion_trace.empty() ? 0.0 : level.distortion_trace.back());
    report.distortion_checks += level.distortion_trace.size();
  }
  report.consistency = check_consistency(reread, hierarchy);
  if (!report.consistency.ok())
    throw ValidationError("label consistency check failed on " + std::to_string(report.consistency.mismatches) + " of " +
                          std::to_string(report.consistency.frames) + " frames");
  return report;
}

std::vector<std::size_t> frame_counts(const std::vector<std::vector<double>>& audio, const ModelConfig& cfg) {
  std::vector<std::size_t> out;
  for (const auto& a : audio) out.push_back(cfg.frames_for(a.size()));
  return out;
}

}  // namespace

LabelReport label_corpus(const RunConfig& cfg) {
  cfg.validate();
  const auto manifest = load_manifest(cfg.data.manifest);
  if (manifest.empty()) throw ValidationError("manifest " + cfg.data.manifest + " is empty");
  const auto audio = load_audio(manifest, cfg.data.sample_rate);
  const auto frames = frame_counts(audio, cfg.model);
  Tensor features;
  if (cfg.data.bootstrap == BootstrapKind::filterbank) {
    FilterbankOptions fb;
    fb.sample_rate = cfg.data.sample_rate;
    std::vector<double> values;
    for (const auto& a : audio) {
      const auto f = filterbank(a, cfg.model, fb);
      values.insert(values.end(), f.data().begin(), f.data().end());
    }
    standardize_columns(values, fb.bands);
    const std::size_t n = values.size() / fb.bands;
    features = Tensor::from({n, fb.bands}, std::move(values));
  } else {
    const Model model(cfg.model, cfg.cluster_sizes);
    features = extract_features(model, audio, cfg.data.relabel_layer);
  }
  return write_labels(cfg, features, frames, cfg.data.label_dir);
}

LabelReport relabel_corpus(const RunConfig& cfg, const std::string& checkpoint, std::size_t layer,
                           const std::string& out_dir) {
  cfg.validate();
  const auto model = model_from_checkpoint(load_checkpoint(checkpoint));
  if (layer < 1 || layer > model.config().n_layers)
    throw ValidationError("relabel: layer " + std::to_string(layer) + " outside [1, " +
                          std::to_string(model.config().n_layers) + "]");
  const auto manifest = load_manifest(cfg.data.manifest);
  if (manifest.empty()) throw ValidationError("manifest " + cfg.data.manifest + " is empty");
  const auto audio = load_audio(manifest, cfg.data.sample_rate);
  const auto frames = frame_counts(audio, model.config());
  const auto features = extract_features(model, audio, layer);
  return write_labels(cfg, features, frames, out_dir.empty() ? cfg.data.label_dir : out_dir);
}

double label_disagreement(const LabelSet& before, const LabelSet& after) {
  if (before.size() != after.size()) throw DimensionError("label_disagreement: utterance counts differ");
  std::map<int, std::map<int, std::size_t>> table;  // new -> old -> count
  std::size_t n = 0;
  for (std::size_t u = 0; u < before.size(); ++u) {
    if (before[u].size() != after[u].size()) throw DimensionError("label_disagreement: frame counts differ");
    for (std::size_t i = 0; i < before[u].size(); ++i) ++table[after[u][i]][before[u][i]];
    n += before[u].size();
  }
  if (n == 0) return 0.0;
  std::size_t agree = 0;
  for (const auto& [c, row] : table) {
    std::size_t best = 0;
    for (const auto& [o, count] : row) best = std::max(best, count);
    agree += best;
  }
  return 1.0 - static_cast<double>(agree) / static_cast<double>(n);
}

IterationResult run_iteration(std::size_t k, const RunConfig& cfg, const std::string& previous_checkpoint,
                              const std::string& previous_label_dir) {
  if (k == 0) throw ValidationError("iterations are numbered from 1");
  IterationResult result;
  if (k == 1) {
    result.labels = label_corpus(cfg);
  } else {
    if (previous_checkpoint.empty() || !fs::exists(previous_checkpoint))
      throw ValidationError("iteration " + std::to_string(k) + " needs the checkpoint of iteration " + std::to_string(k - 1));
    result.labels = relabel_corpus(cfg, previous_checkpoint, cfg.data.relabel_layer);
    if (!previous_label_dir.empty())
      result.disagreement = label_disagreement(read_label_file(label_file_path(previous_label_dir, 0)),
                                               read_label_file(label_file_path(cfg.data.label_dir, 0)));
  }
  result.training = pretrain(cfg);
  return result;
}

}  // namespace mshubert
