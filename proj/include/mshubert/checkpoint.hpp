#pragma once

// "MSHB" checkpoint files: format version, the run config plus trainer state
// as a length-prefixed key = value block, named tensors and a CRC32 trailer.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mshubert/config.hpp"
#include "mshubert/model.hpp"

namespace mshubert {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class PayloadType : std::uint8_t { fp32 = 0, fp64 = 1 };

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct TrainerState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t cursor = 0;  // next batch within the epoch
  double best_valid = std::numeric_limits<double>::infinity();
  std::string rng;  // Rng::state()
};

struct Checkpoint {
  std::string config_text;
  TrainerState state;
  std::vector<StoredTensor> tensors;  // parameters, then adam.m.<name>, adam.v.<name>

  RunConfig config() const { return RunConfig::parse(config_text, "checkpoint config"); }
  const StoredTensor* find(const std::string& name) const;
};

std::vector<char> checkpoint_bytes(const Checkpoint& ckpt, PayloadType payload = PayloadType::fp64);
Checkpoint parse_checkpoint(const std::vector<char>& bytes, const std::string& what = "checkpoint");

void save_checkpoint(const std::string& path, const Checkpoint& ckpt, PayloadType payload = PayloadType::fp64);
Checkpoint load_checkpoint(const std::string& path);

/// Parameter tensors of a model, in layout order.
std::vector<StoredTensor> stored_parameters(const Model& model);

/// Copies stored parameter values into the model; shapes must match.
void restore_parameters(Model& model, const Checkpoint& ckpt);

/// Model built from the checkpoint's config, with its parameters.
Model model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace mshubert
