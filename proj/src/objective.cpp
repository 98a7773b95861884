#include "mshubert/objective.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace mshubert {

std::vector<std::size_t> layer_schedule(std::size_t n_layers, std::size_t n_sets, std::size_t intermediate) {
  if (n_sets == 0) throw ValidationError("layer_schedule: need at least one label set");
  if (intermediate < 1 || intermediate > n_layers)
    throw ValidationError("layer_schedule: intermediate layer " + std::to_string(intermediate) + " outside [1, " +
                          std::to_string(n_layers) + "]");
  if (n_sets == 1) return {n_layers};
  if (n_sets > n_layers - intermediate + 1)
    throw ValidationError("layer_schedule: " + std::to_string(n_sets) + " label sets but only " +
                          std::to_string(n_layers - intermediate + 1) + " layers between " +
                          std::to_string(intermediate) + " and " + std::to_string(n_layers));
  // exact rational positions n - i (n - m) / (s - 1), rounded half up
  const std::size_t den = n_sets - 1, span = n_layers - intermediate;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n_sets; ++i) {
    const std::size_t num = n_layers * den - i * span;
    std::size_t pos = (2 * num + den) / (2 * den);
    if (!out.empty() && pos >= out.back()) pos = out.back() - 1;
    out.push_back(pos);
  }
  if (out.back() < intermediate) throw ValidationError("layer_schedule: collisions pushed below the intermediate layer");
  return out;
}

std::vector<std::size_t> layer_schedule(std::size_t n_layers, std::size_t n_sets, double intermediate_frac) {
  if (!(intermediate_frac > 0.0 && intermediate_frac <= 1.0))
    throw ValidationError("layer_schedule: intermediate fraction must lie in (0, 1]");
  const auto m = static_cast<std::size_t>(std::floor(intermediate_frac * static_cast<double>(n_layers) + 0.5));
  return layer_schedule(n_layers, n_sets, m);
}

void LayerAssignment::validate(std::size_t n_layers, std::span<const std::size_t> cluster_sizes, bool reversed) const {
  if (pairs.empty()) throw ValidationError("assignment: no (layer, codebook) pairs");
  if (drop >= pairs.size())
    throw ValidationError("assignment: drop " + std::to_string(drop) + " must be below the pair count " +
                          std::to_string(pairs.size()));
  std::set<std::size_t> books;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (p.layer < 1 || p.layer > n_layers)
      throw ValidationError("assignment: layer " + std::to_string(p.layer) + " outside [1, " + std::to_string(n_layers) + "]");
    if (p.codebook >= cluster_sizes.size())
      throw ValidationError("assignment: codebook index " + std::to_string(p.codebook) + " has no cluster size");
    if (!books.insert(p.codebook).second) throw ValidationError("assignment: codebook used twice");
    if (i > 0) {
      const auto& q = pairs[i - 1];
      if (p.layer >= q.layer) throw ValidationError("assignment: layers must be distinct and descending");
      const bool finer_deeper = cluster_sizes[q.codebook] > cluster_sizes[p.codebook];
      if (finer_deeper == reversed)
        throw ValidationError(reversed ? "assignment: reversed order needs coarser codebooks on deeper layers"
                                       : "assignment: larger codebooks must sit on deeper layers");
    }
  }
}

std::string LayerAssignment::to_string(std::span<const std::size_t> cluster_sizes) const {
  std::ostringstream os;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (i) os << ", ";
    os << pairs[i].layer << ':' << cluster_sizes[pairs[i].codebook];
  }
  os << "; drop = " << drop;
  return os.str();
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::size_t parse_count(const std::string& text, const std::string& what) {
  const auto t = trim(text);
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
    throw ValidationError("assignment: bad " + what + " '" + t + "'");
  return v;
}

}  // namespace

LayerAssignment LayerAssignment::parse(const std::string& text, std::span<const std::size_t> cluster_sizes) {
  LayerAssignment a;
  std::string body = text;
  if (const auto semi = text.find(';'); semi != std::string::npos) {
    body = text.substr(0, semi);
    const auto tail = trim(text.substr(semi + 1));
    const auto eq = tail.find('=');
    if (eq == std::string::npos || trim(tail.substr(0, eq)) != "drop")
      throw ValidationError("assignment: expected 'drop = N' after ';'");
    a.drop = parse_count(tail.substr(eq + 1), "drop count");
  }
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ValidationError("assignment: expected layer:size, got '" + trim(item) + "'");
    const auto layer = parse_count(item.substr(0, colon), "layer");
    const auto size = parse_count(item.substr(colon + 1), "cluster size");
    const auto it = std::find(cluster_sizes.begin(), cluster_sizes.end(), size);
    if (it == cluster_sizes.end()) throw ValidationError("assignment: no codebook of size " + std::to_string(size));
    a.pairs.push_back({layer, static_cast<std::size_t>(it - cluster_sizes.begin())});
  }
  return a;
}

LayerAssignment make_assignment(std::size_t n_layers, std::span<const std::size_t> cluster_sizes,
                                double intermediate_frac, std::size_t drop, bool reversed) {
  for (std::size_t j = 1; j < cluster_sizes.size(); ++j)
    if (cluster_sizes[j] >= cluster_sizes[j - 1]) throw ValidationError("cluster sizes must be strictly decreasing");
  const auto layers = layer_schedule(n_layers, cluster_sizes.size(), intermediate_frac);
  LayerAssignment a;
  a.drop = drop;
  for (std::size_t i = 0; i < layers.size(); ++i)
    a.pairs.push_back({layers[i], reversed ? cluster_sizes.size() - 1 - i : i});
  a.validate(n_layers, cluster_sizes, reversed);
  return a;
}

namespace {

Tensor head_loss(const Tensor& rows, std::span<const int> targets, const HeadParams& head, double temperature) {
  const auto k = head.code_embeddings.dim(0);
  for (const int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= k)
      throw ValidationError("label " + std::to_string(t) + " outside codebook of size " + std::to_string(k));
  const Tensor z = l2_normalize(linear(rows, head.projection), 1);
  const Tensor codes = l2_normalize(head.code_embeddings, 1);
  const Tensor logits = scale(matmul(z, transpose(codes)), 1.0 / temperature);
  return softmax_cross_entropy(logits, targets);
}

}  // namespace

Tensor mpl(const Tensor& h, std::span<const int> labels, const MaskSpec& mask, const HeadParams& head,
           double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
  if (h.rank() != 2 || labels.size() != h.dim(0) || mask.frames != h.dim(0))
    throw DimensionError("mpl: " + std::to_string(labels.size()) + " labels for features " + shape_string(h.shape()));
  const auto k = head.code_embeddings.dim(0);
  for (const int t : labels)
    if (t < 0 || static_cast<std::size_t>(t) >= k)
      throw ValidationError("label " + std::to_string(t) + " outside codebook of size " + std::to_string(k));
  if (mask.empty()) return Tensor::scalar(0.0);
  std::vector<int> targets;
  for (const auto i : mask.indices) targets.push_back(labels[i]);
  return head_loss(gather_rows(h, mask.indices), targets, head, temperature);
}

std::vector<std::size_t> sample_kept_pairs(const LayerAssignment& assignment, Rng& rng) {
  std::vector<std::size_t> idx(assignment.pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t keep = assignment.kept();
  // partial Fisher-Yates
  for (std::size_t i = 0; i < keep; ++i) std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

MulticlusterLoss multicluster_loss_subset(const LayerOutputs& outputs, std::span<const UtteranceLabels> labels,
                                          std::span<const MaskSpec> masks, const LayerAssignment& assignment,
                                          const Model& model, const ObjectiveOptions& options,
                                          std::span<const std::size_t> kept) {
  if (!(options.temperature > 0.0)) throw ValidationError("temperature must be positive");
  const auto& layout = outputs.layout;
  const std::size_t n_utts = layout.frames.size();
  if (labels.size() != n_utts || masks.size() != n_utts)
    throw DimensionError("multicluster_loss: batch of " + std::to_string(n_utts) + " utterances with " +
                         std::to_string(labels.size()) + " label sets and " + std::to_string(masks.size()) + " masks");
  if (options.both_streams && !layout.two_views) throw ContractError("multicluster_loss: clean stream not available");

  std::vector<std::size_t> rows;
  for (std::size_t u = 0; u < n_utts; ++u) {
    if (masks[u].frames != layout.frames[u]) throw DimensionError("multicluster_loss: mask length differs from frames");
    for (const auto i : masks[u].indices) rows.push_back(layout.masked_row(u, i));
    if (options.both_streams)
      for (const auto i : masks[u].indices) rows.push_back(layout.clean_row(u, i));
  }

  MulticlusterLoss result;
  result.loss = Tensor::scalar(0.0);
  for (const auto pi : kept) {
    const auto& pair = assignment.pairs.at(pi);
    if (pair.layer < 1 || pair.layer > outputs.num_layers())
      throw ContractError("multicluster_loss: layer " + std::to_string(pair.layer) + " not in outputs");
    if (pair.codebook >= model.num_heads()) throw ContractError("multicluster_loss: no head for codebook");
    std::vector<int> targets;
    for (std::size_t u = 0; u < n_utts; ++u) {
      if (pair.codebook >= labels[u].size()) throw DimensionError("multicluster_loss: missing labels for a codebook");
      const auto& lab = labels[u][pair.codebook];
      if (lab.size() != layout.frames[u])
        throw DimensionError("multicluster_loss: utterance " + std::to_string(u) + " has " + std::to_string(lab.size()) +
                             " labels for " + std::to_string(layout.frames[u]) + " frames");
      for (const auto i : masks[u].indices) targets.push_back(lab[i]);
      if (options.both_streams)
        for (const auto i : masks[u].indices) targets.push_back(lab[i]);
    }
    Tensor term = rows.empty() ? Tensor::scalar(0.0)
                               : head_loss(gather_rows(outputs.layers[pair.layer - 1], rows), targets,
                                           model.head(pair.codebook), options.temperature);
    result.terms.push_back({pair, term.item()});
    result.loss = add(result.loss, term);
  }
  return result;
}

MulticlusterLoss multicluster_loss(const LayerOutputs& outputs, std::span<const UtteranceLabels> labels,
                                   std::span<const MaskSpec> masks, const LayerAssignment& assignment,
                                   const Model& model, const ObjectiveOptions& options, Rng& rng) {
  const auto kept = sample_kept_pairs(assignment, rng);
  return multicluster_loss_subset(outputs, labels, masks, assignment, model, options, kept);
}

}  // namespace mshubert
