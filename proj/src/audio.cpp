#include "mshubert/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "mshubert/binary_io.hpp"
#include "mshubert/rng.hpp"

namespace mshubert {

double quantize_pcm16(double x) {
  const double v = std::clamp(std::nearbyint(x * 32768.0), -32768.0, 32767.0);
  return v / 32768.0;
}

void write_wav(const std::string& path, std::span<const double> samples, std::uint32_t sample_rate) {
  ByteWriter w;
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  w.put_bytes("RIFF", 4);
  w.put<std::uint32_t>(36 + data_bytes);
  w.put_bytes("WAVE", 4);
  w.put_bytes("fmt ", 4);
  w.put<std::uint32_t>(16);
  w.put<std::uint16_t>(1);  // PCM
  w.put<std::uint16_t>(1);  // mono
  w.put<std::uint32_t>(sample_rate);
  w.put<std::uint32_t>(sample_rate * 2);
  w.put<std::uint16_t>(2);
  w.put<std::uint16_t>(16);
  w.put_bytes("data", 4);
  w.put<std::uint32_t>(data_bytes);
  for (const double x : samples) w.put<std::int16_t>(static_cast<std::int16_t>(quantize_pcm16(x) * 32768.0));
  write_file_bytes(path, w.bytes());
}

WavData read_wav(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes, "wav " + path);
  char tag[4];
  auto expect = [&](const char* want) {
    r.get_bytes(tag, 4);
    if (std::memcmp(tag, want, 4) != 0) throw FormatError("wav " + path + ": expected '" + std::string(want, 4) + "'");
  };
  expect("RIFF");
  r.get<std::uint32_t>();
  expect("WAVE");
  WavData out;
  bool have_fmt = false;
  while (true) {
    r.get_bytes(tag, 4);
    const auto size = r.get<std::uint32_t>();
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError("wav " + path + ": short fmt chunk");
      const auto format = r.get<std::uint16_t>();
      const auto channels = r.get<std::uint16_t>();
      out.sample_rate = r.get<std::uint32_t>();
      r.get<std::uint32_t>();
      r.get<std::uint16_t>();
      const auto bits = r.get<std::uint16_t>();
      if (format != 1 || channels != 1 || bits != 16)
        throw FormatError("wav " + path + ": only mono 16-bit PCM is supported");
      std::vector<char> skip(size - 16);
      r.get_bytes(skip.data(), skip.size());
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("wav " + path + ": data before fmt");
      out.samples.resize(size / 2);
      for (auto& s : out.samples) s = static_cast<double>(r.get<std::int16_t>()) / 32768.0;
      return out;
    } else {
      std::vector<char> skip(size + (size & 1));
      r.get_bytes(skip.data(), skip.size());
    }
  }
}

std::vector<SynthUtterance> synth_dataset(const SynthOptions& opt) {
  if (opt.n_states == 0) throw ValidationError("synth: need at least one state");
  if (!(opt.min_seconds > 0.0 && opt.max_seconds >= opt.min_seconds)) throw ValidationError("synth: bad duration range");
  if (opt.min_segment == 0 || opt.max_segment < opt.min_segment) throw ValidationError("synth: bad segment range");
  const double sr = opt.sample_rate;
  const double lo = 0.05 * sr, hi = 0.425 * sr;
  auto centre = [&](std::size_t s) {
    return opt.n_states == 1 ? 0.5 * (lo + hi) : lo + static_cast<double>(s) * (hi - lo) / static_cast<double>(opt.n_states - 1);
  };
  Rng rng(opt.seed, 0x5e7);
  const auto min_len = static_cast<std::size_t>(std::ceil(opt.min_seconds * sr));
  const auto max_len = static_cast<std::size_t>(std::floor(opt.max_seconds * sr));

  std::vector<SynthUtterance> out;
  for (std::size_t u = 0; u < opt.n_utts; ++u) {
    SynthUtterance utt;
    char id[32];
    std::snprintf(id, sizeof id, "synth%04zu", u);
    utt.id = id;
    const std::size_t len = min_len + rng.index(max_len - min_len + 1);
    utt.audio.resize(len);
    utt.sample_states.resize(len);
    std::size_t state = rng.index(opt.n_states);
    for (std::size_t pos = 0; pos < len;) {
      const std::size_t seg = std::min(len - pos, opt.min_segment + rng.index(opt.max_segment - opt.min_segment + 1));
      double freq[3], phase[3], amp[3];
      for (int j = 0; j < 3; ++j) {
        freq[j] = centre(state) * (1.0 + rng.uniform(-0.04, 0.04));
        phase[j] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        amp[j] = 0.25 * (1.0 + rng.uniform(-0.1, 0.1));
      }
      for (std::size_t i = 0; i < seg; ++i) {
        const double t = static_cast<double>(i) / sr;
        double x = opt.noise * rng.normal();
        for (int j = 0; j < 3; ++j) x += amp[j] * std::sin(2.0 * std::numbers::pi * freq[j] * t + phase[j]);
        utt.audio[pos + i] = quantize_pcm16(x);
        utt.sample_states[pos + i] = static_cast<int>(state);
      }
      pos += seg;
      if (opt.n_states > 1) {
        const std::size_t next = rng.index(opt.n_states - 1);
        state = next >= state ? next + 1 : next;
      }
    }
    out.push_back(std::move(utt));
  }
  return out;
}

std::vector<int> frame_states(std::span<const int> sample_states, const ModelConfig& cfg) {
  const std::size_t t = cfg.frames_for(sample_states.size());
  const std::size_t hop = cfg.hop(), half = cfg.receptive_field() / 2;
  std::vector<int> out(t);
  for (std::size_t i = 0; i < t; ++i) out[i] = sample_states[std::min(sample_states.size() - 1, i * hop + half)];
  return out;
}

Tensor filterbank(std::span<const double> audio, const ModelConfig& cfg, const FilterbankOptions& opt) {
  if (opt.window == 0 || opt.fft < opt.window || opt.bands == 0) throw ValidationError("filterbank: bad options");
  const std::size_t t = cfg.frames_for(audio.size());
  const std::size_t hop = cfg.hop(), half = cfg.receptive_field() / 2;
  const std::size_t bins = opt.fft / 2 + 1;
  const double sr = opt.sample_rate;

  std::vector<double> hann(opt.window);
  for (std::size_t i = 0; i < opt.window; ++i)
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(opt.window));

  auto mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto inv_mel = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  std::vector<double> edges(opt.bands + 2);
  for (std::size_t b = 0; b < edges.size(); ++b)
    edges[b] = inv_mel(mel(sr / 2) * static_cast<double>(b) / static_cast<double>(opt.bands + 1));
  std::vector<double> weights(opt.bands * bins, 0.0);
  for (std::size_t b = 0; b < opt.bands; ++b)
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sr / static_cast<double>(opt.fft);
      const double up = (f - edges[b]) / (edges[b + 1] - edges[b]);
      const double down = (edges[b + 2] - f) / (edges[b + 2] - edges[b + 1]);
      weights[b * bins + k] = std::max(0.0, std::min(up, down));
    }

  std::vector<double> out(t * opt.bands);
  std::vector<double> frame(opt.window), power(bins);
  for (std::size_t i = 0; i < t; ++i) {
    const auto centre = static_cast<std::ptrdiff_t>(i * hop + half);
    for (std::size_t j = 0; j < opt.window; ++j) {
      const auto src = centre - static_cast<std::ptrdiff_t>(opt.window / 2) + static_cast<std::ptrdiff_t>(j);
      frame[j] = src >= 0 && static_cast<std::size_t>(src) < audio.size() ? audio[static_cast<std::size_t>(src)] * hann[j] : 0.0;
    }
    for (std::size_t k = 0; k < bins; ++k) {
      double re = 0.0, im = 0.0;
      for (std::size_t j = 0; j < opt.window; ++j) {
        const double a = 2.0 * std::numbers::pi * static_cast<double>(k * j) / static_cast<double>(opt.fft);
        re += frame[j] * std::cos(a);
        im -= frame[j] * std::sin(a);
      }
      power[k] = re * re + im * im;
    }
    for (std::size_t b = 0; b < opt.bands; ++b) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += weights[b * bins + k] * power[k];
      out[i * opt.bands + b] = std::log(e + 1e-8);
    }
  }
  return Tensor::from({t, opt.bands}, std::move(out));
}

void standardize_columns(std::vector<double>& values, std::size_t cols) {
  if (cols == 0 || values.size() % cols != 0) throw DimensionError("standardize_columns: bad shape");
  const std::size_t rows = values.size() / cols;
  if (rows == 0) return;
  for (std::size_t c = 0; c < cols; ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < rows; ++r) m += values[r * cols + c];
    m /= static_cast<double>(rows);
    double v = 0.0;
    for (std::size_t r = 0; r < rows; ++r) v += (values[r * cols + c] - m) * (values[r * cols + c] - m);
    const double sd = std::sqrt(v / static_cast<double>(rows));
    for (std::size_t r = 0; r < rows; ++r) values[r * cols + c] = sd > 0.0 ? (values[r * cols + c] - m) / sd : 0.0;
  }
}

}  // namespace mshubert
