#pragma once

// Run configuration: a key = value text file with [model], [objective],
// [optimizer] and [data] sections. Unknown sections and keys are errors, and
// every field can be overridden with a dotted "section.key=value" string.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mshubert/model.hpp"
#include "mshubert/objective.hpp"

namespace mshubert {

enum class TrainMode { ms_hubert, m_hubert, s_hubert };

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& text);
ForwardMode forward_mode(TrainMode mode);

enum class BootstrapKind { filterbank, random_model };

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.01;
  double eps = 1e-8;
  double warmup_frac = 0.08;
  std::size_t total_steps = 500;
  double clip_norm = 10.0;  // 0 disables clipping

  std::size_t warmup_steps() const;
  /// Linear warmup to lr, then linear decay to 0 at total_steps; `step` is 1-based.
  double lr_at(std::size_t step) const;
};

struct DataConfig {
  std::string manifest;
  std::string label_dir;     // labels_<j>.txt and codebook_<j>.bin
  std::string checkpoint;    // final checkpoint; the best one goes to <checkpoint>.best
  std::string log;           // metrics JSONL
  std::uint32_t sample_rate = 8000;
  double batch_seconds = 1.0;
  double valid_fraction = 0.1;
  std::size_t valid_every = 100;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  BootstrapKind bootstrap = BootstrapKind::filterbank;
  std::size_t relabel_layer = 3;
  std::size_t kmeans_iters = 100;
  std::size_t kmeans_restarts = 4;
};

struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  TrainMode mode = TrainMode::ms_hubert;
  std::vector<std::size_t> cluster_sizes{16, 8, 4};
  double intermediate_frac = 0.25;
  std::string assignment_text = "auto";  // "auto" follows the layer schedule
  std::size_t drop = 1;
  bool reverse_assignment = false;
  ObjectiveOptions objective;
  OptimizerConfig optimizer;
  DataConfig data;

  static RunConfig desk();
  static RunConfig paper_base();

  /// The (layer, codebook) pairs used by the objective.
  LayerAssignment assignment() const;

  void validate() const;

  /// Applies one "section.key=value" override.
  void set(const std::string& dotted, const std::string& value);
  void set_override(const std::string& assignment);  // "section.key=value"

  /// Canonical text: every field, fixed order, round-trip exact.
  std::string to_text() const;
  static RunConfig parse(const std::string& text, const std::string& origin = "config");
  static RunConfig load(const std::string& path);
};

/// Every "section.key" accepted by the parser, in canonical order.
std::vector<std::string> config_keys();

/// Splits key = value text into (section, key, value) triples; '#' starts a comment.
struct ConfigLine {
  std::string section;
  std::string key;
  std::string value;
  std::size_t line = 0;
};
std::vector<ConfigLine> parse_config_lines(const std::string& text, const std::string& origin);

std::string format_double(double v);

}  // namespace mshubert
