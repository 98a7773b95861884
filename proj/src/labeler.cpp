#include "mshubert/labeler.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "mshubert/binary_io.hpp"
#include "mshubert/rng.hpp"

namespace mshubert {

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

void require_features(const Tensor& features, const char* what) {
  if (features.rank() != 2) throw DimensionError(std::string(what) + ": features must be [n, d], got " + shape_string(features.shape()));
}

// Nearest centroid per row plus the squared distance to it; ties go to the
// lowest index.
double assign_rows(const Tensor& features, const std::vector<double>& centroids, std::size_t k,
                   std::vector<std::size_t>& assign, std::vector<double>& dist) {
  const std::size_t n = features.dim(0), d = features.dim(1);
  const double* x = features.data().data();
  assign.resize(n);
  dist.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double v = sq_dist(x + i * d, centroids.data() + c * d, d);
      if (v < best) {
        best = v;
        arg = c;
      }
    }
    assign[i] = arg;
    dist[i] = best;
    total += best;
  }
  return total;
}

}  // namespace

std::size_t Codebook::nearest(std::span<const double> x) const {
  if (x.size() != dim) throw DimensionError("codebook: feature of dim " + std::to_string(x.size()) + ", codebook dim " + std::to_string(dim));
  double best = std::numeric_limits<double>::infinity();
  std::size_t arg = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const double v = sq_dist(x.data(), centroids.data() + c * dim, dim);
    if (v < best) {
      best = v;
      arg = c;
    }
  }
  return arg;
}

std::vector<std::size_t> kmeans_pp_seeds(const Tensor& features, std::size_t k, std::uint64_t seed) {
  require_features(features, "kmeans");
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (k == 0) throw ValidationError("kmeans: k must be positive");
  if (n < k) throw InsufficientDataError("kmeans: " + std::to_string(n) + " points for " + std::to_string(k) + " clusters");
  const double* x = features.data().data();
  Rng rng(seed, 0x6b6d);
  std::vector<std::size_t> seeds{rng.index(n)};
  std::vector<char> taken(n, 0);
  taken[seeds[0]] = 1;
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = sq_dist(x + i * d, x + seeds[0] * d, d);
  while (seeds.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += dist[i];
    std::size_t pick = n;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += dist[i];
        if (dist[i] > 0.0 && acc > r) {
          pick = i;
          break;
        }
      }
      if (pick == n)  // rounding at the tail
        for (std::size_t i = n; i-- > 0;)
          if (dist[i] > 0.0) {
            pick = i;
            break;
          }
    } else {
      // all remaining points coincide with a seed: take the next unused row
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i]) free.push_back(i);
      pick = free[rng.index(free.size())];
    }
    seeds.push_back(pick);
    taken[pick] = 1;
    for (std::size_t i = 0; i < n; ++i) dist[i] = std::min(dist[i], sq_dist(x + i * d, x + pick * d, d));
  }
  return seeds;
}

Codebook lloyd(const Tensor& features, std::vector<double> centroids, std::size_t k, const KMeansOptions& options) {
  require_features(features, "kmeans");
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (k == 0) throw ValidationError("kmeans: k must be positive");
  if (n < k) throw InsufficientDataError("kmeans: " + std::to_string(n) + " points for " + std::to_string(k) + " clusters");
  if (centroids.size() != k * d) throw DimensionError("kmeans: initial centroids must be [k, d]");
  const double* x = features.data().data();

  Codebook cb;
  cb.k = k;
  cb.dim = d;
  std::vector<std::size_t> assign;
  std::vector<double> dist;
  double prev = assign_rows(features, centroids, k, assign, dist);
  cb.distortion_trace.push_back(prev);

  std::vector<std::size_t> count(k);
  for (std::size_t it = 0; it < options.max_iters; ++it) {
    std::fill(count.begin(), count.end(), 0);
    for (const auto a : assign) ++count[a];
    // empty clusters take the point farthest from its centroid
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] > 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i)
        if (count[assign[i]] > 1 && (far == n || dist[i] > dist[far])) far = i;
      if (far == n) throw ContractError("kmeans: cannot repair an empty cluster");
      --count[assign[far]];
      assign[far] = c;
      count[c] = 1;
      dist[far] = 0.0;
    }
    std::fill(centroids.begin(), centroids.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) centroids[assign[i] * d + j] += x[i * d + j];
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < d; ++j) centroids[c * d + j] /= static_cast<double>(count[c]);

    const double cur = assign_rows(features, centroids, k, assign, dist);
    cb.distortion_trace.push_back(cur);
    if (cur > prev * (1.0 + 1e-12) + 1e-300)
      throw ContractError("kmeans: distortion increased from " + std::to_string(prev) + " to " + std::to_string(cur));
    const bool converged = prev == 0.0 || (prev - cur) <= options.tolerance * prev;
    prev = cur;
    if (converged) break;
  }
  // codebooks are stored in fp32; keep the in-memory copy identical
  for (auto& v : centroids) v = static_cast<double>(static_cast<float>(v));
  cb.centroids = std::move(centroids);
  return cb;
}

Codebook kmeans_fit(const Tensor& features, std::size_t k, std::uint64_t seed, const KMeansOptions& options) {
  require_features(features, "kmeans");
  const std::size_t d = features.dim(1);
  const auto x = features.data();
  Codebook best;
  double best_distortion = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(1, options.restarts); ++r) {
    const auto seeds = kmeans_pp_seeds(features, k, seed * 1000003ULL + r);
    std::vector<double> init(k * d);
    for (std::size_t c = 0; c < k; ++c)
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(seeds[c] * d), d, init.begin() + static_cast<std::ptrdiff_t>(c * d));
    auto cb = lloyd(features, std::move(init), k, options);
    if (cb.distortion_trace.back() < best_distortion) {
      best_distortion = cb.distortion_trace.back();
      best = std::move(cb);
    }
  }
  return best;
}

double total_distortion(const Tensor& features, const Codebook& codebook) {
  require_features(features, "distortion");
  if (features.dim(1) != codebook.dim) throw DimensionError("distortion: dim mismatch");
  std::vector<std::size_t> assign;
  std::vector<double> dist;
  return assign_rows(features, codebook.centroids, codebook.k, assign, dist);
}

// ---- hierarchy ----

std::vector<std::size_t> ClusterHierarchy::sizes() const {
  std::vector<std::size_t> s;
  for (const auto& l : levels) s.push_back(l.k);
  return s;
}

void ClusterHierarchy::compose() {
  fine_to_level.clear();
  if (levels.empty()) return;
  std::vector<int> cur(levels[0].k);
  for (std::size_t c = 0; c < cur.size(); ++c) cur[c] = static_cast<int>(c);
  fine_to_level.push_back(cur);
  for (std::size_t j = 1; j < levels.size(); ++j) {
    const auto& pm = levels[j].parent_map;
    if (pm.size() != levels[j - 1].k) throw FormatError("hierarchy: parent map of level " + std::to_string(j) + " has wrong length");
    for (auto& v : cur) v = pm[static_cast<std::size_t>(v)];
    fine_to_level.push_back(cur);
  }
}

void ClusterHierarchy::validate() const {
  if (levels.empty()) throw ValidationError("hierarchy: no levels");
  for (std::size_t j = 0; j < levels.size(); ++j) {
    const auto& l = levels[j];
    if (l.dim != levels[0].dim) throw ValidationError("hierarchy: feature dims differ across levels");
    if (l.centroids.size() != l.k * l.dim) throw ValidationError("hierarchy: centroid table size mismatch");
    if (j == 0) {
      if (!l.parent_map.empty()) throw ValidationError("hierarchy: finest level must not carry a parent map");
      continue;
    }
    if (l.k >= levels[j - 1].k) throw ValidationError("hierarchy: sizes must be strictly decreasing");
    if (l.parent_map.size() != levels[j - 1].k) throw ValidationError("hierarchy: parent map length mismatch");
    for (const int v : l.parent_map)
      if (v < 0 || static_cast<std::size_t>(v) >= l.k) throw ValidationError("hierarchy: parent map value out of range");
  }
  if (fine_to_level.size() != levels.size()) throw ValidationError("hierarchy: composed maps missing");
  for (std::size_t j = 1; j < levels.size(); ++j)
    for (std::size_t c = 0; c < levels[0].k; ++c)
      if (fine_to_level[j][c] != levels[j].parent_map[static_cast<std::size_t>(fine_to_level[j - 1][c])])
        throw ValidationError("hierarchy: composed map disagrees with parent maps");
}

ClusterHierarchy build_hierarchy(const Tensor& features, std::span<const std::size_t> sizes, std::uint64_t seed,
                                 const KMeansOptions& options) {
  if (sizes.empty()) throw ValidationError("hierarchy: no cluster sizes");
  for (std::size_t j = 1; j < sizes.size(); ++j)
    if (sizes[j] >= sizes[j - 1]) throw ValidationError("hierarchy: sizes must be strictly decreasing");
  ClusterHierarchy h;
  h.levels.push_back(kmeans_fit(features, sizes[0], seed, options));
  for (std::size_t j = 1; j < sizes.size(); ++j) {
    const auto& prev = h.levels.back();
    const auto points = Tensor::from({prev.k, prev.dim}, prev.centroids);
    auto level = kmeans_fit(points, sizes[j], seed + j, options);
    for (std::size_t c = 0; c < prev.k; ++c) level.parent_map.push_back(static_cast<int>(level.nearest(prev.centroid(c))));
    h.levels.push_back(std::move(level));
  }
  h.compose();
  h.validate();
  return h;
}

std::vector<std::vector<int>> assign_labels(const Tensor& features, const ClusterHierarchy& hierarchy) {
  require_features(features, "assign_labels");
  if (hierarchy.levels.empty()) throw ValidationError("assign_labels: empty hierarchy");
  if (features.dim(1) != hierarchy.dim())
    throw DimensionError("assign_labels: features of dim " + std::to_string(features.dim(1)) + " for codebooks of dim " +
                         std::to_string(hierarchy.dim()));
  const std::size_t n = features.dim(0), d = features.dim(1);
  std::vector<std::vector<int>> out(hierarchy.levels.size(), std::vector<int>(n));
  const auto x = features.data();
  for (std::size_t i = 0; i < n; ++i) {
    const auto fine = hierarchy.levels[0].nearest(x.subspan(i * d, d));
    for (std::size_t j = 0; j < hierarchy.levels.size(); ++j) out[j][i] = hierarchy.fine_to_level[j][fine];
  }
  return out;
}

Tensor extract_features(const Model& model, std::span<const std::vector<double>> audio, std::size_t layer) {
  if (layer < 1 || layer > model.config().n_layers)
    throw ValidationError("extract_features: layer " + std::to_string(layer) + " outside [1, " +
                          std::to_string(model.config().n_layers) + "]");
  if (audio.empty()) throw ValidationError("extract_features: no audio");
  constexpr std::size_t chunk = 16;
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < audio.size(); b += chunk) {
    const auto part = audio.subspan(b, std::min(chunk, audio.size() - b));
    parts.push_back(model.encode(part).layers[layer - 1]);
  }
  return parts.size() == 1 ? parts.front() : concat(parts, 0);
}

std::vector<Tensor> extract_all_layers(const Model& model, std::span<const std::vector<double>> audio) {
  if (audio.empty()) throw ValidationError("extract_all_layers: no audio");
  constexpr std::size_t chunk = 16;
  const std::size_t n = model.config().n_layers;
  std::vector<std::vector<Tensor>> parts(n);
  for (std::size_t b = 0; b < audio.size(); b += chunk) {
    const auto out = model.encode(audio.subspan(b, std::min(chunk, audio.size() - b)));
    for (std::size_t l = 0; l < n; ++l) parts[l].push_back(out.layers[l]);
  }
  std::vector<Tensor> layers;
  for (auto& p : parts) layers.push_back(p.size() == 1 ? p.front() : concat(p, 0));
  return layers;
}

// ---- files ----

void write_label_file(const std::string& path, const LabelSet& labels) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  for (const auto& utt : labels) {
    for (std::size_t i = 0; i < utt.size(); ++i) {
      if (i) out << ' ';
      out << utt[i];
    }
    out << '\n';
  }
  if (!out) throw FormatError("write failed for " + path);
}

LabelSet read_label_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open label file " + path);
  LabelSet out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<int> utt;
    const char* p = line.data();
    const char* end = p + line.size();
    while (p < end) {
      while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
      if (p == end) break;
      int v = 0;
      const auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc() || v < 0)
        throw FormatError(path + ":" + std::to_string(lineno) + ": invalid label");
      utt.push_back(v);
      p = next;
    }
    out.push_back(std::move(utt));
  }
  return out;
}

namespace {
constexpr char kCodebookMagic[4] = {'M', 'S', 'K', 'M'};
}

void save_codebook(const std::string& path, const Codebook& cb) {
  ByteWriter w;
  w.put_bytes(kCodebookMagic, 4);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cb.k));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cb.dim));
  for (const double v : cb.centroids) w.put<float>(static_cast<float>(v));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cb.parent_map.size()));
  for (const int v : cb.parent_map) w.put<std::int32_t>(v);
  w.seal();
  write_file_bytes(path, w.bytes());
}

Codebook load_codebook(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes, "codebook " + path);
  r.check_crc();
  char magic[4];
  r.get_bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kCodebookMagic)) throw FormatError("codebook " + path + ": bad magic");
  Codebook cb;
  cb.k = r.get<std::uint32_t>();
  cb.dim = r.get<std::uint32_t>();
  cb.centroids.resize(cb.k * cb.dim);
  for (auto& v : cb.centroids) v = r.get<float>();
  const auto np = r.get<std::uint32_t>();
  cb.parent_map.resize(np);
  for (auto& v : cb.parent_map) v = r.get<std::int32_t>();
  if (!r.done()) throw FormatError("codebook " + path + ": trailing bytes");
  return cb;
}

void save_hierarchy(const std::string& dir, const ClusterHierarchy& hierarchy) {
  std::filesystem::create_directories(dir);
  for (std::size_t j = 0; j < hierarchy.levels.size(); ++j)
    save_codebook((std::filesystem::path(dir) / ("codebook_" + std::to_string(j) + ".bin")).string(), hierarchy.levels[j]);
}

ClusterHierarchy load_hierarchy(const std::string& dir) {
  ClusterHierarchy h;
  for (std::size_t j = 0;; ++j) {
    const auto p = std::filesystem::path(dir) / ("codebook_" + std::to_string(j) + ".bin");
    if (!std::filesystem::exists(p)) break;
    h.levels.push_back(load_codebook(p.string()));
  }
  if (h.levels.empty()) throw FormatError("no codebooks under " + dir);
  h.compose();
  h.validate();
  return h;
}

ConsistencyReport check_consistency(const std::vector<LabelSet>& levels, const ClusterHierarchy& hierarchy) {
  if (levels.size() != hierarchy.levels.size())
    throw ValidationError("consistency: " + std::to_string(levels.size()) + " label sets for " +
                          std::to_string(hierarchy.levels.size()) + " levels");
  ConsistencyReport rep;
  const auto& fine = levels[0];
  for (std::size_t j = 1; j < levels.size(); ++j)
    if (levels[j].size() != fine.size()) throw ValidationError("consistency: label sets cover different utterances");
  for (std::size_t u = 0; u < fine.size(); ++u) {
    for (std::size_t j = 1; j < levels.size(); ++j)
      if (levels[j][u].size() != fine[u].size())
        throw ValidationError("consistency: utterance " + std::to_string(u) + " has differing frame counts");
    for (std::size_t i = 0; i < fine[u].size(); ++i) {
      ++rep.frames;
      const int f = fine[u][i];
      if (f < 0 || static_cast<std::size_t>(f) >= hierarchy.levels[0].k) {
        ++rep.mismatches;
        continue;
      }
      for (std::size_t j = 1; j < levels.size(); ++j)
        if (levels[j][u][i] != hierarchy.fine_to_level[j][static_cast<std::size_t>(f)]) {
          ++rep.mismatches;
          break;
        }
    }
  }
  return rep;
}

}  // namespace mshubert
