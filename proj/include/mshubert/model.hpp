#pragma once

// Two-view HuBERT-style encoder: a strided CNN front end, span masking, and
// a stack of pre-norm transformer layers each followed by a Swap exchange of
// the masked and clean streams at the masked frames.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mshubert/rng.hpp"
#include "mshubert/tensor.hpp"

namespace mshubert {

struct ConvLayerSpec {
  std::size_t channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 0;
  bool operator==(const ConvLayerSpec&) const = default;
};

enum class PositionalKind { learned, conv };

struct ModelConfig {
  std::vector<ConvLayerSpec> conv_stack;
  bool conv_bias = false;
  std::size_t n_layers = 4;
  std::size_t hidden_dim = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 256;
  double mask_start_prob = 0.08;
  std::size_t mask_span_len = 10;
  std::size_t proj_dim = 32;
  PositionalKind positional = PositionalKind::learned;
  std::size_t max_positions = 512;  // learned positions only
  std::size_t pos_conv_kernel = 128;
  std::size_t pos_conv_groups = 16;
  double dropout = 0.1;
  double layer_norm_eps = 1e-5;
  std::uint64_t seed = 0;

  /// 7-layer wav2vec2 front end, 12 x 768 encoder, 8 heads, conv positions.
  static ModelConfig paper_base();
  /// 2-layer front end (strides 4, 2), 4 x 64 encoder, 4 heads.
  static ModelConfig desk();

  void validate() const;

  std::size_t receptive_field() const;
  std::size_t hop() const;
  /// Frames produced by the CNN for `samples` input samples.
  /// Throws InputTooShortError below the receptive field.
  std::size_t frames_for(std::size_t samples) const;
};

/// Sorted, unique masked frame indices of one sequence of `frames` frames.
struct MaskSpec {
  std::vector<std::size_t> indices;
  std::size_t frames = 0;

  bool empty() const { return indices.empty(); }
  double fraction() const { return frames == 0 ? 0.0 : static_cast<double>(indices.size()) / static_cast<double>(frames); }
  bool contains(std::size_t i) const;
  static MaskSpec none(std::size_t frames) { return {{}, frames}; }
  static MaskSpec all(std::size_t frames);
};

/// Each frame starts a span of `span_len` masked frames with probability
/// `start_prob`; overlapping spans merge and spans are clipped at the end.
MaskSpec sample_mask(std::size_t frames, double start_prob, std::size_t span_len, Rng& rng);
MaskSpec sample_mask(std::size_t frames, const ModelConfig& cfg, Rng& rng);

struct ViewPair {
  Tensor masked_view;  // [t, d], mask embedding at masked rows
  Tensor clean_view;   // [t, d]
  MaskSpec mask;
};

ViewPair make_views(const Tensor& features, const MaskSpec& mask, const Tensor& mask_embedding);

/// Exchanges the rows of the two streams at the masked indices.
std::pair<Tensor, Tensor> swap_views(const Tensor& masked, const Tensor& clean, const MaskSpec& mask);

enum class ForwardMode { ms_hubert, no_swap, single_view };

std::string to_string(ForwardMode mode);

// ---- parameters ----

enum class InitKind { zeros, ones, normal, kaiming, uniform01, pos_conv };

struct ParameterSpec {
  std::string name;
  Shape shape;
  std::string group;
  InitKind init = InitKind::zeros;
};

/// Every named parameter of the network plus one classification head per
/// cluster size, in a fixed order.
std::vector<ParameterSpec> parameter_layout(const ModelConfig& cfg, std::span<const std::size_t> cluster_sizes);

std::size_t count_parameters(const ModelConfig& cfg, std::span<const std::size_t> cluster_sizes);

struct ParameterGroupCount {
  std::string group;
  std::size_t count = 0;
};
std::vector<ParameterGroupCount> parameter_table(const ModelConfig& cfg, std::span<const std::size_t> cluster_sizes);

struct LinearParams {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct NormParams {
  Tensor weight;
  Tensor bias;
};

struct HeadParams {
  LinearParams projection;  // [hidden, proj_dim]
  Tensor code_embeddings;   // [k, proj_dim]
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// ---- forward ----

/// Row arrangement of a batch inside the combined activation matrix.
/// Two-view layouts place each utterance's masked block directly before its
/// clean block.
struct BatchLayout {
  std::vector<std::size_t> frames;
  std::vector<std::size_t> offsets;  // first row of each utterance's masked block
  bool two_views = true;
  std::size_t rows = 0;

  static BatchLayout make(std::vector<std::size_t> frames, bool two_views);
  std::vector<Segment> segments() const;
  std::size_t masked_row(std::size_t utt, std::size_t frame) const { return offsets[utt] + frame; }
  std::size_t clean_row(std::size_t utt, std::size_t frame) const;
};

struct LayerOutputs {
  BatchLayout layout;
  std::vector<Tensor> layers;  // layers[l - 1]: post-swap activations of layer l, [rows, hidden]

  std::size_t num_layers() const { return layers.size(); }
  /// H^m of layer l (1-based) for one utterance.
  Tensor masked(std::size_t layer, std::size_t utt = 0) const;
  /// H^c of layer l (1-based); only for two-view layouts.
  Tensor clean(std::size_t layer, std::size_t utt = 0) const;
};

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;                      // required when training with dropout
  std::size_t* swap_invocations = nullptr;  // incremented per applied swap
};

class Model {
 public:
  Model(ModelConfig cfg, std::vector<std::size_t> cluster_sizes);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Deep copy of all parameter values.
  Model clone() const;

  const ModelConfig& config() const { return cfg_; }
  const std::vector<std::size_t>& cluster_sizes() const { return cluster_sizes_; }

  /// CNN front end plus feature projection: audio samples -> [t, hidden].
  Tensor conv_downsample(std::span<const double> audio, const ForwardContext& ctx = {}) const;

  LayerOutputs forward(std::span<const ViewPair> batch, ForwardMode mode, const ForwardContext& ctx = {}) const;
  LayerOutputs forward(const ViewPair& views, ForwardMode mode, const ForwardContext& ctx = {}) const;

  /// Eval-mode single-view pass over unmasked audio.
  LayerOutputs encode(std::span<const std::vector<double>> utterances) const;

  const Tensor& mask_embedding() const { return mask_emb_; }
  const HeadParams& head(std::size_t j) const { return heads_.at(j); }
  std::size_t num_heads() const { return heads_.size(); }

  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  Tensor& parameter(const std::string& name);
  const Tensor& parameter(const std::string& name) const;
  std::size_t parameter_count() const;

 private:
  struct ConvLayer {
    Tensor weight, bias;
    NormParams norm;
  };
  struct EncoderLayer {
    LinearParams q, k, v, out;
    NormParams attn_norm;
    LinearParams fc1, fc2;
    NormParams ffn_norm;
  };

  void bind();
  Tensor positions(const Tensor& x, const BatchLayout& layout) const;
  Tensor encoder_layer(const EncoderLayer& layer, const Tensor& x, std::span<const Segment> segments,
                       const ForwardContext& ctx) const;

  ModelConfig cfg_;
  std::vector<std::size_t> cluster_sizes_;
  std::vector<NamedParameter> params_;
  std::unordered_map<std::string, std::size_t> index_;

  std::vector<ConvLayer> conv_;
  NormParams feature_norm_;
  LinearParams feature_proj_;
  Tensor mask_emb_;
  Tensor pos_embed_, pos_conv_v_, pos_conv_g_, pos_conv_bias_;
  NormParams encoder_norm_;
  std::vector<EncoderLayer> layers_;
  std::vector<HeadParams> heads_;
};

/// x @ weight + bias.
Tensor linear(const Tensor& x, const LinearParams& p);

}  // namespace mshubert
