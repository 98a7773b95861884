#pragma once

// Optimisation loop: length-bucketed batches, two-view forward pass in the
// configured ablation mode, multicluster loss, AdamW with warmup and linear
// decay, validation, checkpoints and a JSONL metrics log.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mshubert/checkpoint.hpp"
#include "mshubert/config.hpp"
#include "mshubert/labeler.hpp"
#include "mshubert/model.hpp"
#include "mshubert/objective.hpp"
#include "mshubert/rng.hpp"

namespace mshubert {

struct Utterance {
  std::string id;
  std::vector<double> audio;
  UtteranceLabels labels;  // one sequence per codebook
};

/// The last round(valid_fraction * n) utterances form the validation split,
/// keeping at least one training utterance.
std::pair<std::vector<Utterance>, std::vector<Utterance>> split_train_valid(std::vector<Utterance> all,
                                                                            double valid_fraction);

/// Greedy length-sorted packing under `max_samples` per batch after a seeded
/// shuffle; the batch order is shuffled again. Returns utterance indices.
std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> lengths, std::size_t max_samples,
                                                   Rng& rng);

class AdamW {
 public:
  AdamW() = default;
  AdamW(const OptimizerConfig& cfg, const std::vector<NamedParameter>& params);

  /// One update at the given learning rate; `t` is the 1-based step.
  void update(std::vector<NamedParameter>& params, double lr, std::size_t t);

  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
};

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  std::vector<PairTerm> terms;
  std::vector<std::size_t> cluster_sizes;  // for labelling the terms
  double grad_norm = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
  std::size_t swap_invocations = 0;
  std::size_t mpl_terms = 0;
  std::size_t utterances = 0;
  std::size_t masked_frames = 0;

  /// One JSON object; wall_ms is left out when `timing` is false.
  std::string to_json(bool timing = true) const;
};

class Trainer {
 public:
  /// Fresh model initialised from cfg.model.seed.
  Trainer(RunConfig cfg, std::vector<Utterance> train, std::vector<Utterance> valid = {});
  /// Resumes parameters, optimiser moments, RNG and data position.
  Trainer(const Checkpoint& ckpt, std::vector<Utterance> train, std::vector<Utterance> valid = {});

  StepMetrics step();
  bool done() const { return state_.step >= cfg_.optimizer.total_steps; }

  /// Eval-mode loss on the validation split with all pairs kept and masks
  /// from a fixed seed, so successive evaluations are comparable.
  double validation_loss() const;

  Checkpoint checkpoint() const;

  const RunConfig& config() const { return cfg_; }
  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const TrainerState& state() const { return state_; }
  void set_best_valid(double v) { state_.best_valid = v; }

  /// Called with the step's parameters just before the optimiser update
  /// (gradients are populated); used by tests.
  std::function<void(const Model&)> gradient_probe;

  /// Where a diagnostic JSON is written if a step produces non-finite values.
  std::string diagnostic_path;

 private:
  void init_batches();
  const std::vector<std::size_t>& next_batch();

  RunConfig cfg_;
  LayerAssignment assignment_;
  Model model_;
  AdamW adam_;
  TrainerState state_;
  Rng rng_;
  std::vector<Utterance> train_, valid_;
  std::vector<std::vector<std::size_t>> epoch_batches_;
  std::size_t batches_epoch_ = static_cast<std::size_t>(-1);
};

struct TrainSummary {
  std::vector<StepMetrics> metrics;
  std::vector<std::pair<std::size_t, double>> validation;  // (step, loss)
  double best_valid = 0.0;
  std::string checkpoint;
  std::string best_checkpoint;

  /// Mean training loss over steps [begin, end) of this run.
  double mean_loss(std::size_t begin, std::size_t end) const;
};

/// Loads the manifest and labels of `cfg.data`, trains to total_steps and
/// writes the log and checkpoints. With `resume`, continues that checkpoint.
TrainSummary pretrain(const RunConfig& cfg, const std::optional<std::string>& resume = std::nullopt);

/// In-memory training run without any files.
TrainSummary train_in_memory(const RunConfig& cfg, std::vector<Utterance> utterances);

struct LabelReport {
  std::vector<std::size_t> sizes;
  std::size_t frames = 0;
  std::vector<double> distortion;  // final distortion of each level's fit
  std::size_t distortion_checks = 0;
  ConsistencyReport consistency;
};

/// Iteration-one labels: k-means hierarchy over bootstrap features
/// (filterbank or a randomly initialised model, per cfg.data.bootstrap).
LabelReport label_corpus(const RunConfig& cfg);

/// Labels from layer `layer` of a trained checkpoint. `out_dir` defaults to cfg.data.label_dir.
LabelReport relabel_corpus(const RunConfig& cfg, const std::string& checkpoint, std::size_t layer,
                           const std::string& out_dir = "");

/// Fraction of frames whose new label disagrees with the old one after
/// mapping each new cluster to its most frequent old cluster.
double label_disagreement(const LabelSet& before, const LabelSet& after);

struct IterationResult {
  LabelReport labels;
  TrainSummary training;
  std::optional<double> disagreement;  // finest labels vs the previous iteration's
};

/// k = 1: bootstrap labels then pretrain. k >= 2: relabel from
/// `previous_checkpoint` at cfg.data.relabel_layer, then pretrain afresh.
IterationResult run_iteration(std::size_t k, const RunConfig& cfg, const std::string& previous_checkpoint = "",
                              const std::string& previous_label_dir = "");

}  // namespace mshubert
