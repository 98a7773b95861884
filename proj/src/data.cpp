#include "mshubert/data.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mshubert/errors.hpp"

namespace fs = std::filesystem;

namespace mshubert {

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path);
  Manifest m;
  m.path = path;
  const auto base = fs::path(path).parent_path();
  std::set<std::string> ids;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string samples;
    if (!std::getline(ls, e.id, '\t') || !std::getline(ls, e.path, '\t') || !std::getline(ls, samples))
      throw ValidationError(path + ":" + std::to_string(n) + ": expected id<TAB>path<TAB>samples");
    try {
      std::size_t used = 0;
      e.samples = std::stoull(samples, &used);
      if (used != samples.size()) throw std::invalid_argument("");
    } catch (const std::logic_error&) {
      throw ValidationError(path + ":" + std::to_string(n) + ": bad sample count '" + samples + "'");
    }
    if (!ids.insert(e.id).second) throw ValidationError(path + ":" + std::to_string(n) + ": duplicate id " + e.id);
    if (fs::path(e.path).is_relative()) e.path = (base / e.path).string();
    m.entries.push_back(std::move(e));
  }
  return m;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  const auto base = fs::path(path).parent_path();
  if (!base.empty()) fs::create_directories(base);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write manifest " + path);
  for (const auto& e : entries) {
    auto p = fs::path(e.path);
    if (!base.empty()) {
      const auto rel = p.lexically_relative(base);
      if (!rel.empty() && *rel.begin() != "..") p = rel;
    }
    out << e.id << '\t' << p.string() << '\t' << e.samples << '\n';
  }
}

std::vector<std::vector<double>> load_audio(const Manifest& manifest, std::uint32_t sample_rate) {
  std::vector<std::vector<double>> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    auto wav = read_wav(e.path);
    if (wav.sample_rate != sample_rate)
      throw ValidationError("utterance " + e.id + ": sample rate " + std::to_string(wav.sample_rate) + " but the run expects " +
                            std::to_string(sample_rate));
    if (wav.samples.size() != e.samples)
      throw ValidationError("utterance " + e.id + ": manifest lists " + std::to_string(e.samples) + " samples, file has " +
                            std::to_string(wav.samples.size()));
    out.push_back(std::move(wav.samples));
  }
  return out;
}

std::string label_file_path(const std::string& label_dir, std::size_t level) {
  return (fs::path(label_dir) / ("labels_" + std::to_string(level) + ".txt")).string();
}

std::vector<UtteranceLabels> load_labels(const Manifest& manifest, const std::string& label_dir,
                                         std::span<const std::size_t> cluster_sizes, const ModelConfig& cfg) {
  std::vector<UtteranceLabels> out(manifest.entries.size(), UtteranceLabels(cluster_sizes.size()));
  for (std::size_t j = 0; j < cluster_sizes.size(); ++j) {
    const auto path = label_file_path(label_dir, j);
    if (!fs::exists(path)) throw ValidationError("missing label file " + path);
    auto set = read_label_file(path);
    if (set.size() != manifest.entries.size())
      throw ValidationError(path + ": " + std::to_string(set.size()) + " label lines for " +
                            std::to_string(manifest.entries.size()) + " utterances");
    for (std::size_t u = 0; u < set.size(); ++u) {
      const auto& e = manifest.entries[u];
      std::size_t t = 0;
      try {
        t = cfg.frames_for(e.samples);
      } catch (const InputTooShortError&) {
        throw ValidationError("utterance " + e.id + " is shorter than the receptive field");
      }
      if (set[u].size() != t)
        throw ValidationError("utterance " + e.id + ": " + std::to_string(set[u].size()) + " labels in " + path + " but " +
                              std::to_string(t) + " frames");
      for (const int l : set[u])
        if (l < 0 || static_cast<std::size_t>(l) >= cluster_sizes[j])
          throw ValidationError("utterance " + e.id + ": label " + std::to_string(l) + " outside [0, " +
                                std::to_string(cluster_sizes[j]) + ") in " + path);
      out[u][j] = std::move(set[u]);
    }
  }
  return out;
}

std::vector<LabelSet> split_labels(const std::vector<std::vector<int>>& stacked, std::span<const std::size_t> frames) {
  std::vector<LabelSet> out;
  for (const auto& level : stacked) {
    LabelSet set;
    std::size_t pos = 0;
    for (const auto t : frames) {
      if (pos + t > level.size()) throw DimensionError("split_labels: fewer labels than frames");
      set.emplace_back(level.begin() + static_cast<std::ptrdiff_t>(pos), level.begin() + static_cast<std::ptrdiff_t>(pos + t));
      pos += t;
    }
    if (pos != level.size()) throw DimensionError("split_labels: more labels than frames");
    out.push_back(std::move(set));
  }
  return out;
}

SynthCorpus write_synth_corpus(const std::string& dir, const SynthOptions& options, const ModelConfig& cfg) {
  const auto utts = synth_dataset(options);
  fs::create_directories(fs::path(dir) / "wav");
  std::vector<ManifestEntry> entries;
  LabelSet states;
  for (const auto& u : utts) {
    const auto wav = (fs::path(dir) / "wav" / (u.id + ".wav")).string();
    write_wav(wav, u.audio, options.sample_rate);
    entries.push_back({u.id, wav, u.audio.size()});
    states.push_back(frame_states(u.sample_states, cfg));
  }
  SynthCorpus c;
  const auto manifest = (fs::path(dir) / "manifest.tsv").string();
  write_manifest(manifest, entries);
  c.manifest = load_manifest(manifest);
  c.states_path = (fs::path(dir) / "states.txt").string();
  write_label_file(c.states_path, states);
  return c;
}

}  // namespace mshubert
