#pragma once

// Masked prediction loss, the equidistant layer schedule and the multicluster
// sum over (layer, codebook) pairs with random term dropping.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mshubert/model.hpp"
#include "mshubert/rng.hpp"
#include "mshubert/tensor.hpp"

namespace mshubert {

/// Layers from n_layers down to `intermediate`, equidistant, rounded to the
/// nearest integer with ties toward the deeper layer; a collision is pushed
/// one layer shallower.
std::vector<std::size_t> layer_schedule(std::size_t n_layers, std::size_t n_sets, std::size_t intermediate);
/// Same with intermediate = round(intermediate_frac * n_layers).
std::vector<std::size_t> layer_schedule(std::size_t n_layers, std::size_t n_sets, double intermediate_frac);

struct LayerPair {
  std::size_t layer = 0;     // 1-based encoder layer
  std::size_t codebook = 0;  // index into the cluster size list
  bool operator==(const LayerPair&) const = default;
};

struct LayerAssignment {
  std::vector<LayerPair> pairs;  // descending layer order
  std::size_t drop = 0;

  std::size_t kept() const { return pairs.size() - drop; }

  /// Checks layer range and ordering, distinct codebooks, drop < |a| and the
  /// size-to-depth orientation (finer codebooks deeper unless `reversed`).
  void validate(std::size_t n_layers, std::span<const std::size_t> cluster_sizes, bool reversed = false) const;

  /// "12:1000, 10:500, 8:250; drop = 2" using cluster sizes, not indices.
  std::string to_string(std::span<const std::size_t> cluster_sizes) const;
  static LayerAssignment parse(const std::string& text, std::span<const std::size_t> cluster_sizes);
};

/// Pairs the schedule with the cluster sizes (sorted descending): the deepest
/// layer gets the largest codebook, or the smallest when `reversed`.
LayerAssignment make_assignment(std::size_t n_layers, std::span<const std::size_t> cluster_sizes,
                                double intermediate_frac, std::size_t drop, bool reversed = false);

struct ObjectiveOptions {
  double temperature = 0.1;
  bool both_streams = false;  // also score the clean stream at masked frames
};

/// Cross entropy of cosine logits between projected rows of h and the code
/// embeddings, averaged over the masked frames. An empty mask gives a
/// constant 0.
Tensor mpl(const Tensor& h, std::span<const int> labels, const MaskSpec& mask, const HeadParams& head,
           double temperature);

/// Labels of one utterance, one sequence per codebook.
using UtteranceLabels = std::vector<std::vector<int>>;

struct PairTerm {
  LayerPair pair;
  double value = 0.0;
};

struct MulticlusterLoss {
  Tensor loss;
  std::vector<PairTerm> terms;  // kept terms in assignment order
};

/// Indices of the |a| - d pairs kept this step, uniform without replacement,
/// returned in ascending order.
std::vector<std::size_t> sample_kept_pairs(const LayerAssignment& assignment, Rng& rng);

/// Sum of mpl over the given pair indices. Each term pools the masked frames
/// of every utterance in the batch.
MulticlusterLoss multicluster_loss_subset(const LayerOutputs& outputs, std::span<const UtteranceLabels> labels,
                                          std::span<const MaskSpec> masks, const LayerAssignment& assignment,
                                          const Model& model, const ObjectiveOptions& options,
                                          std::span<const std::size_t> kept);

MulticlusterLoss multicluster_loss(const LayerOutputs& outputs, std::span<const UtteranceLabels> labels,
                                   std::span<const MaskSpec> masks, const LayerAssignment& assignment,
                                   const Model& model, const ObjectiveOptions& options, Rng& rng);

}  // namespace mshubert
