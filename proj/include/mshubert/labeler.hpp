#pragma once

// Chained k-means pseudo-labels: the finest codebook is fit on frame
// features, each coarser one on the centroids of the previous level, and
// coarse labels always come from composing the fine-to-coarse maps.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mshubert/model.hpp"
#include "mshubert/tensor.hpp"

namespace mshubert {

struct Codebook {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;  // [k, dim], values representable in fp32
  std::vector<int> parent_map;    // finer-level index -> index here; empty for the finest level
  std::vector<double> distortion_trace;  // total squared distortion after each assignment step

  std::span<const double> centroid(std::size_t i) const { return {centroids.data() + i * dim, dim}; }
  std::size_t nearest(std::span<const double> x) const;
};

struct KMeansOptions {
  std::size_t max_iters = 100;
  double tolerance = 1e-6;  // relative distortion change
  std::size_t restarts = 4;  // independent seedings; the lowest final distortion wins
};

/// Lloyd iterations from k-means++ seeding, best of `restarts` seedings.
Codebook kmeans_fit(const Tensor& features, std::size_t k, std::uint64_t seed, const KMeansOptions& options = {});

/// Lloyd iterations from the given initial centroids [k, dim].
Codebook lloyd(const Tensor& features, std::vector<double> initial, std::size_t k, const KMeansOptions& options = {});

/// k-means++ seeding; returns the chosen row indices.
std::vector<std::size_t> kmeans_pp_seeds(const Tensor& features, std::size_t k, std::uint64_t seed);

double total_distortion(const Tensor& features, const Codebook& codebook);

struct ClusterHierarchy {
  std::vector<Codebook> levels;               // finest first
  std::vector<std::vector<int>> fine_to_level;  // fine_to_level[j][c]: level-j label of finest label c

  std::vector<std::size_t> sizes() const;
  std::size_t dim() const { return levels.empty() ? 0 : levels.front().dim; }
  /// Recomputes the composed maps from the parent maps.
  void compose();
  /// Strictly decreasing sizes, in-range parent maps, maps consistent with composition.
  void validate() const;
};

ClusterHierarchy build_hierarchy(const Tensor& features, std::span<const std::size_t> sizes, std::uint64_t seed,
                                 const KMeansOptions& options = {});

/// labels[j][i]: level-j label of frame i.
std::vector<std::vector<int>> assign_labels(const Tensor& features, const ClusterHierarchy& hierarchy);

/// Frame-level outputs of one transformer layer, eval mode, single view, all
/// utterances stacked in order.
Tensor extract_features(const Model& model, std::span<const std::vector<double>> audio, std::size_t layer);

/// The same for every layer at once; element l - 1 holds layer l.
std::vector<Tensor> extract_all_layers(const Model& model, std::span<const std::vector<double>> audio);

// ---- files ----

/// One utterance per line, space separated.
using LabelSet = std::vector<std::vector<int>>;

void write_label_file(const std::string& path, const LabelSet& labels);
LabelSet read_label_file(const std::string& path);

void save_codebook(const std::string& path, const Codebook& codebook);
Codebook load_codebook(const std::string& path);

/// codebook_<j>.bin for every level under `dir`.
void save_hierarchy(const std::string& dir, const ClusterHierarchy& hierarchy);
ClusterHierarchy load_hierarchy(const std::string& dir);

struct ConsistencyReport {
  std::size_t frames = 0;
  std::size_t mismatches = 0;
  bool ok() const { return mismatches == 0; }
};

/// Checks coarse == composed map(fine) for every frame of every level.
/// `levels[j]` holds the label set of hierarchy level j.
ConsistencyReport check_consistency(const std::vector<LabelSet>& levels, const ClusterHierarchy& hierarchy);

}  // namespace mshubert
