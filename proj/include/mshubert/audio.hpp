#pragma once

// 16-bit PCM WAV files, a synthetic "phone-like" corpus, and log filterbank
// features aligned to the encoder frame grid.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mshubert/model.hpp"
#include "mshubert/tensor.hpp"

namespace mshubert {

struct WavData {
  std::uint32_t sample_rate = 0;
  std::vector<double> samples;  // in [-1, 1)
};

/// Mono 16-bit PCM; samples are clipped and rounded to the int16 grid.
void write_wav(const std::string& path, std::span<const double> samples, std::uint32_t sample_rate);
WavData read_wav(const std::string& path);

/// Rounds to the int16 grid used by write_wav, so a round trip is exact.
double quantize_pcm16(double x);

struct SynthOptions {
  std::size_t n_utts = 64;
  double min_seconds = 0.06;
  double max_seconds = 0.12;
  std::size_t n_states = 8;
  std::uint32_t sample_rate = 8000;
  std::size_t min_segment = 80;  // samples spent in one state
  std::size_t max_segment = 240;
  double noise = 0.02;
  std::uint64_t seed = 0;
};

struct SynthUtterance {
  std::string id;
  std::vector<double> audio;
  std::vector<int> sample_states;  // hidden state at every sample
};

/// Each utterance walks over hidden states (uniform jump to any other
/// state); state s emits three sinusoids near its own centre frequency plus
/// white noise.
std::vector<SynthUtterance> synth_dataset(const SynthOptions& options);

/// Hidden state at the centre of each encoder frame's receptive field.
std::vector<int> frame_states(std::span<const int> sample_states, const ModelConfig& cfg);

struct FilterbankOptions {
  std::size_t window = 32;
  std::size_t fft = 128;
  std::size_t bands = 24;
  std::uint32_t sample_rate = 8000;
};

/// Log mel-like band energies [frames, bands] on the encoder frame grid.
Tensor filterbank(std::span<const double> audio, const ModelConfig& cfg, const FilterbankOptions& options = {});

/// Per-column standardisation of a feature matrix (in place).
void standardize_columns(std::vector<double>& values, std::size_t cols);

}  // namespace mshubert
