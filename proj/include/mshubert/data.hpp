#pragma once

// Corpus manifests (tab separated: id, audio path, sample count), label
// directories and the on-disk synthetic corpus.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mshubert/audio.hpp"
#include "mshubert/labeler.hpp"
#include "mshubert/model.hpp"
#include "mshubert/objective.hpp"

namespace mshubert {

struct ManifestEntry {
  std::string id;
  std::string path;  // resolved against the manifest's directory
  std::size_t samples = 0;
};

struct Manifest {
  std::string path;
  std::vector<ManifestEntry> entries;
  bool empty() const { return entries.empty(); }
};

/// Relative audio paths are resolved against the manifest's directory.
Manifest load_manifest(const std::string& path);
/// Writes paths relative to the manifest directory when they lie below it.
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

/// Reads every WAV; sample counts and rates must match the manifest.
std::vector<std::vector<double>> load_audio(const Manifest& manifest, std::uint32_t sample_rate);

std::string label_file_path(const std::string& label_dir, std::size_t level);

/// Per-utterance labels for every codebook, checked against frame counts,
/// cluster sizes and the manifest ids.
std::vector<UtteranceLabels> load_labels(const Manifest& manifest, const std::string& label_dir,
                                         std::span<const std::size_t> cluster_sizes, const ModelConfig& cfg);

/// Splits per-level frame labels (utterances stacked) back into one label set per level.
std::vector<LabelSet> split_labels(const std::vector<std::vector<int>>& stacked, std::span<const std::size_t> frames);

struct SynthCorpus {
  Manifest manifest;
  std::string states_path;  // frame-level generator states, label-file format
};

/// WAV files, manifest.tsv and states.txt under `dir`.
SynthCorpus write_synth_corpus(const std::string& dir, const SynthOptions& options, const ModelConfig& cfg);

}  // namespace mshubert
