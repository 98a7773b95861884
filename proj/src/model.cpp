#include "mshubert/model.hpp"

#include <algorithm>
#include <cmath>

namespace mshubert {

ModelConfig ModelConfig::paper_base() {
  ModelConfig c;
  c.conv_stack = {{512, 10, 5}, {512, 3, 2}, {512, 3, 2}, {512, 3, 2}, {512, 3, 2}, {512, 2, 2}, {512, 2, 2}};
  c.conv_bias = false;
  c.n_layers = 12;
  c.hidden_dim = 768;
  c.n_heads = 8;
  c.ffn_dim = 3072;
  c.proj_dim = 256;
  c.positional = PositionalKind::conv;
  c.pos_conv_kernel = 128;
  c.pos_conv_groups = 16;
  return c;
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.conv_stack = {{64, 8, 4}, {64, 4, 2}};
  c.conv_bias = false;
  c.n_layers = 4;
  c.hidden_dim = 64;
  c.n_heads = 4;
  c.ffn_dim = 256;
  c.proj_dim = 32;
  c.positional = PositionalKind::learned;
  c.max_positions = 512;
  return c;
}

void ModelConfig::validate() const {
  if (conv_stack.empty()) throw ValidationError("model: conv_stack must not be empty");
  for (const auto& l : conv_stack)
    if (l.channels == 0 || l.kernel == 0 || l.stride == 0)
      throw ValidationError("model: conv layers need positive channels, kernel and stride");
  if (hidden_dim == 0 || n_heads == 0 || hidden_dim % n_heads != 0)
    throw ValidationError("model: hidden_dim " + std::to_string(hidden_dim) + " not divisible by n_heads " +
                          std::to_string(n_heads));
  if (ffn_dim == 0 || proj_dim == 0) throw ValidationError("model: ffn_dim and proj_dim must be positive");
  if (!(mask_start_prob >= 0.0 && mask_start_prob <= 1.0)) throw ValidationError("model: mask_start_prob outside [0, 1]");
  if (mask_span_len == 0) throw ValidationError("model: mask_span_len must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("model: dropout outside [0, 1)");
  if (positional == PositionalKind::learned && max_positions == 0)
    throw ValidationError("model: max_positions must be positive");
  if (positional == PositionalKind::conv &&
      (pos_conv_groups == 0 || hidden_dim % pos_conv_groups != 0 || pos_conv_kernel == 0))
    throw ValidationError("model: pos_conv_groups must divide hidden_dim");
}

std::size_t ModelConfig::receptive_field() const {
  std::size_t field = 1, jump = 1;
  for (const auto& l : conv_stack) {
    field += (l.kernel - 1) * jump;
    jump *= l.stride;
  }
  return field;
}

std::size_t ModelConfig::hop() const {
  std::size_t h = 1;
  for (const auto& l : conv_stack) h *= l.stride;
  return h;
}

std::size_t ModelConfig::frames_for(std::size_t samples) const {
  std::size_t len = samples;
  for (std::size_t i = 0; i < conv_stack.size(); ++i) {
    const auto& l = conv_stack[i];
    if (len < l.kernel)
      throw InputTooShortError("audio of " + std::to_string(samples) + " samples is shorter than the receptive field (" +
                               std::to_string(receptive_field()) + " samples)");
    len = (len - l.kernel) / l.stride + 1;
  }
  return len;
}

bool MaskSpec::contains(std::size_t i) const { return std::binary_search(indices.begin(), indices.end(), i); }

MaskSpec MaskSpec::all(std::size_t frames) {
  MaskSpec m{{}, frames};
  m.indices.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) m.indices[i] = i;
  return m;
}

MaskSpec sample_mask(std::size_t frames, double start_prob, std::size_t span_len, Rng& rng) {
  std::vector<char> flag(frames, 0);
  for (std::size_t i = 0; i < frames; ++i)
    if (rng.bernoulli(start_prob))
      for (std::size_t j = i; j < std::min(frames, i + span_len); ++j) flag[j] = 1;
  MaskSpec m{{}, frames};
  for (std::size_t i = 0; i < frames; ++i)
    if (flag[i]) m.indices.push_back(i);
  return m;
}

MaskSpec sample_mask(std::size_t frames, const ModelConfig& cfg, Rng& rng) {
  return sample_mask(frames, cfg.mask_start_prob, cfg.mask_span_len, rng);
}

ViewPair make_views(const Tensor& features, const MaskSpec& mask, const Tensor& mask_embedding) {
  if (features.rank() != 2 || features.dim(0) != mask.frames)
    throw DimensionError("make_views: features " + shape_string(features.shape()) + " for a mask over " +
                         std::to_string(mask.frames) + " frames");
  if (mask_embedding.numel() != features.dim(1)) throw DimensionError("make_views: mask embedding width mismatch");
  ViewPair v;
  v.masked_view = mask.empty() ? features : replace_rows(features, mask.indices, mask_embedding);
  v.clean_view = features;
  v.mask = mask;
  return v;
}

std::pair<Tensor, Tensor> swap_views(const Tensor& masked, const Tensor& clean, const MaskSpec& mask) {
  if (masked.shape() != clean.shape() || masked.rank() != 2)
    throw DimensionError("swap_views: " + shape_string(masked.shape()) + " vs " + shape_string(clean.shape()));
  const std::size_t t = masked.dim(0);
  if (mask.frames != t) throw DimensionError("swap_views: mask over " + std::to_string(mask.frames) + " frames, tensors have " + std::to_string(t));
  std::vector<std::size_t> perm(2 * t);
  for (std::size_t i = 0; i < 2 * t; ++i) perm[i] = i;
  for (const auto i : mask.indices) {
    perm[i] = t + i;
    perm[t + i] = i;
  }
  const auto stacked = gather_rows(concat<double>({masked, clean}, 0), perm);
  return {slice(stacked, 0, 0, t), slice(stacked, 0, t, 2 * t)};
}

std::string to_string(ForwardMode mode) {
  switch (mode) {
    case ForwardMode::ms_hubert:
      return "ms_hubert";
    case ForwardMode::no_swap:
      return "no_swap";
    case ForwardMode::single_view:
      return "single_view";
  }
  return "?";
}

// ---- parameters ----

std::vector<ParameterSpec> parameter_layout(const ModelConfig& cfg, std::span<const std::size_t> cluster_sizes) {
  cfg.validate();
  std::vector<ParameterSpec> out;
  std::size_t cin = 1;
  for (std::size_t i = 0; i < cfg.conv_stack.size(); ++i) {
    const auto& l = cfg.conv_stack[i];
    const std::string p = "feature_extractor.conv_layers." + std::to_string(i) + ".";
    out.push_back({p + "weight", {l.channels, cin, l.kernel}, "feature_extractor", InitKind::kaiming});
    if (cfg.conv_bias) out.push_back({p + "bias", {l.channels}, "feature_extractor", InitKind::zeros});
    if (i == 0) {
      // per-channel group norm on the first layer
      out.push_back({p + "norm.weight", {l.channels}, "feature_extractor", InitKind::ones});
      out.push_back({p + "norm.bias", {l.channels}, "feature_extractor", InitKind::zeros});
    }
    cin = l.channels;
  }
  const std::size_t d = cfg.hidden_dim;
  out.push_back({"layer_norm.weight", {cin}, "feature_projection", InitKind::ones});
  out.push_back({"layer_norm.bias", {cin}, "feature_projection", InitKind::zeros});
  out.push_back({"post_extract_proj.weight", {cin, d}, "feature_projection", InitKind::normal});
  out.push_back({"post_extract_proj.bias", {d}, "feature_projection", InitKind::zeros});
  out.push_back({"mask_emb", {d}, "mask_embedding", InitKind::uniform01});
  if (cfg.positional == PositionalKind::learned) {
    out.push_back({"encoder.pos_embed", {cfg.max_positions, d}, "positional", InitKind::normal});
  } else {
    out.push_back({"encoder.pos_conv.weight_v", {d, d / cfg.pos_conv_groups, cfg.pos_conv_kernel}, "positional",
                   InitKind::pos_conv});
    out.push_back({"encoder.pos_conv.weight_g", {cfg.pos_conv_kernel}, "positional", InitKind::ones});
    out.push_back({"encoder.pos_conv.bias", {d}, "positional", InitKind::zeros});
  }
  out.push_back({"encoder.layer_norm.weight", {d}, "encoder", InitKind::ones});
  out.push_back({"encoder.layer_norm.bias", {d}, "encoder", InitKind::zeros});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "encoder.layers." + std::to_string(l) + ".";
    for (const char* proj : {"q_proj", "k_proj", "v_proj", "out_proj"}) {
      out.push_back({p + "self_attn." + proj + ".weight", {d, d}, "encoder", InitKind::normal});
      out.push_back({p + "self_attn." + proj + ".bias", {d}, "encoder", InitKind::zeros});
    }
    out.push_back({p + "self_attn_layer_norm.weight", {d}, "encoder", InitKind::ones});
    out.push_back({p + "self_attn_layer_norm.bias", {d}, "encoder", InitKind::zeros});
    out.push_back({p + "fc1.weight", {d, cfg.ffn_dim}, "encoder", InitKind::normal});
    out.push_back({p + "fc1.bias", {cfg.ffn_dim}, "encoder", InitKind::zeros});
    out.push_back({p + "fc2.weight", {cfg.ffn_dim, d}, "encoder", InitKind::normal});
    out.push_back({p + "fc2.bias", {d}, "encoder", InitKind::zeros});
    out.push_back({p + "final_layer_norm.weight", {d}, "encoder", InitKind::ones});
    out.push_back({p + "final_layer_norm.bias", {d}, "encoder", InitKind::zeros});
  }
  for (std::size_t j = 0; j < cluster_sizes.size(); ++j) {
    if (cluster_sizes[j] == 0) throw ValidationError("model: cluster sizes must be positive");
    const std::string p = "heads." + std::to_string(j) + ".";
    out.push_back({p + "proj.weight", {d, cfg.proj_dim}, "heads", InitKind::normal});
    out.push_back({p + "proj.bias", {cfg.proj_dim}, "heads", InitKind::zeros});
    out.push_back({p + "code_embeddings", {cluster_sizes[j], cfg.proj_dim}, "heads", InitKind::normal});
  }
  return out;
}

std::size_t count_parameters(const ModelConfig& cfg, std::span<const std::size_t> cluster_sizes) {
  std::size_t n = 0;
  for (const auto& p : parameter_layout(cfg, cluster_sizes)) n += shape_numel(p.shape);
  return n;
}

std::vector<ParameterGroupCount> parameter_table(const ModelConfig& cfg, std::span<const std::size_t> cluster_sizes) {
  std::vector<ParameterGroupCount> table;
  for (const auto& p : parameter_layout(cfg, cluster_sizes)) {
    if (table.empty() || table.back().group != p.group) table.push_back({p.group, 0});
    table.back().count += shape_numel(p.shape);
  }
  return table;
}

// ---- layouts ----

BatchLayout BatchLayout::make(std::vector<std::size_t> frames, bool two_views) {
  BatchLayout l;
  l.two_views = two_views;
  l.frames = std::move(frames);
  std::size_t row = 0;
  for (const auto t : l.frames) {
    l.offsets.push_back(row);
    row += two_views ? 2 * t : t;
  }
  l.rows = row;
  return l;
}

std::vector<Segment> BatchLayout::segments() const {
  std::vector<Segment> s;
  for (std::size_t u = 0; u < frames.size(); ++u) {
    s.push_back({offsets[u], frames[u]});
    if (two_views) s.push_back({offsets[u] + frames[u], frames[u]});
  }
  return s;
}

std::size_t BatchLayout::clean_row(std::size_t utt, std::size_t frame) const {
  if (!two_views) throw ContractError("clean stream requested from a single-view layout");
  return offsets[utt] + frames[utt] + frame;
}

Tensor LayerOutputs::masked(std::size_t layer, std::size_t utt) const {
  if (layer == 0 || layer > layers.size()) throw ContractError("layer index " + std::to_string(layer) + " out of range");
  const auto off = layout.offsets.at(utt);
  return slice(layers[layer - 1], 0, off, off + layout.frames[utt]);
}

Tensor LayerOutputs::clean(std::size_t layer, std::size_t utt) const {
  if (layer == 0 || layer > layers.size()) throw ContractError("layer index " + std::to_string(layer) + " out of range");
  const auto off = layout.clean_row(utt, 0);
  return slice(layers[layer - 1], 0, off, off + layout.frames[utt]);
}

// ---- model ----

Tensor linear(const Tensor& x, const LinearParams& p) { return add(matmul(x, p.weight), p.bias); }

namespace {

Tensor affine_norm(const Tensor& x, std::size_t axis, const NormParams& p, double eps) {
  return add(mul(layer_norm(x, axis, eps), p.weight), p.bias);
}

}  // namespace

Model::Model(ModelConfig cfg, std::vector<std::size_t> cluster_sizes)
    : cfg_(std::move(cfg)), cluster_sizes_(std::move(cluster_sizes)) {
  Rng rng(cfg_.seed, 0x1417);
  for (auto& spec : parameter_layout(cfg_, cluster_sizes_)) {
    const std::size_t n = shape_numel(spec.shape);
    std::vector<double> v(n, 0.0);
    switch (spec.init) {
      case InitKind::zeros:
        break;
      case InitKind::ones:
        std::fill(v.begin(), v.end(), 1.0);
        break;
      case InitKind::normal:
        for (auto& x : v) x = rng.normal(0.0, 0.02);
        break;
      case InitKind::kaiming: {
        const double fan_in = static_cast<double>(spec.shape[1] * spec.shape[2]);
        for (auto& x : v) x = rng.normal(0.0, std::sqrt(2.0 / fan_in));
        break;
      }
      case InitKind::uniform01:
        for (auto& x : v) x = rng.uniform();
        break;
      case InitKind::pos_conv: {
        const double std = std::sqrt(4.0 / static_cast<double>(spec.shape[2] * spec.shape[0]));
        for (auto& x : v) x = rng.normal(0.0, std);
        break;
      }
    }
    index_[spec.name] = params_.size();
    params_.push_back({spec.name, Tensor::from(spec.shape, std::move(v), true)});
  }
  if (cfg_.positional == PositionalKind::conv) {
    // weight_g starts at ||v|| so the effective kernel equals v
    auto& v = parameter("encoder.pos_conv.weight_v");
    auto g = parameter("encoder.pos_conv.weight_g").mutable_data();
    const std::size_t k = v.dim(2);
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t i = 0; i < v.numel(); ++i) g[i % k] += v.at(i) * v.at(i);
    for (auto& x : g) x = std::sqrt(x);
  }
  bind();
}

void Model::bind() {
  conv_.clear();
  layers_.clear();
  heads_.clear();
  for (std::size_t i = 0; i < cfg_.conv_stack.size(); ++i) {
    const std::string p = "feature_extractor.conv_layers." + std::to_string(i) + ".";
    ConvLayer c;
    c.weight = parameter(p + "weight");
    if (cfg_.conv_bias) c.bias = parameter(p + "bias");
    if (i == 0) c.norm = {parameter(p + "norm.weight"), parameter(p + "norm.bias")};
    conv_.push_back(c);
  }
  feature_norm_ = {parameter("layer_norm.weight"), parameter("layer_norm.bias")};
  feature_proj_ = {parameter("post_extract_proj.weight"), parameter("post_extract_proj.bias")};
  mask_emb_ = parameter("mask_emb");
  if (cfg_.positional == PositionalKind::learned) {
    pos_embed_ = parameter("encoder.pos_embed");
  } else {
    pos_conv_v_ = parameter("encoder.pos_conv.weight_v");
    pos_conv_g_ = parameter("encoder.pos_conv.weight_g");
    pos_conv_bias_ = parameter("encoder.pos_conv.bias");
  }
  encoder_norm_ = {parameter("encoder.layer_norm.weight"), parameter("encoder.layer_norm.bias")};
  auto lin = [&](const std::string& p) { return LinearParams{parameter(p + ".weight"), parameter(p + ".bias")}; };
  auto norm = [&](const std::string& p) { return NormParams{parameter(p + ".weight"), parameter(p + ".bias")}; };
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "encoder.layers." + std::to_string(l) + ".";
    layers_.push_back({lin(p + "self_attn.q_proj"), lin(p + "self_attn.k_proj"), lin(p + "self_attn.v_proj"),
                       lin(p + "self_attn.out_proj"), norm(p + "self_attn_layer_norm"), lin(p + "fc1"), lin(p + "fc2"),
                       norm(p + "final_layer_norm")});
  }
  for (std::size_t j = 0; j < cluster_sizes_.size(); ++j) {
    const std::string p = "heads." + std::to_string(j) + ".";
    heads_.push_back({lin(p + "proj"), parameter(p + "code_embeddings")});
  }
}

Model Model::clone() const {
  Model m(cfg_, cluster_sizes_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto src = params_[i].tensor.data();
    auto dst = m.params_[i].tensor.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return m;
}

Tensor& Model::parameter(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named " + name);
  return params_[it->second].tensor;
}

const Tensor& Model::parameter(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named " + name);
  return params_[it->second].tensor;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

Tensor Model::conv_downsample(std::span<const double> audio, const ForwardContext& ctx) const {
  cfg_.frames_for(audio.size());
  Tensor x = Tensor::from({audio.size(), 1}, std::vector<double>(audio.begin(), audio.end()));
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    const auto& c = conv_[i];
    x = conv1d(x, c.weight, cfg_.conv_bias ? &c.bias : nullptr, {cfg_.conv_stack[i].stride, 0, 1});
    if (i == 0) x = affine_norm(x, 0, c.norm, cfg_.layer_norm_eps);
    x = gelu(x);
  }
  x = affine_norm(x, 1, feature_norm_, cfg_.layer_norm_eps);
  x = linear(x, feature_proj_);
  (void)ctx;
  return x;
}

Tensor Model::positions(const Tensor& x, const BatchLayout& layout) const {
  if (cfg_.positional == PositionalKind::learned) {
    std::vector<std::size_t> ids;
    ids.reserve(layout.rows);
    for (const auto& s : layout.segments()) {
      if (s.length > cfg_.max_positions)
        throw InputTooShortError("sequence of " + std::to_string(s.length) + " frames exceeds max_positions " +
                                 std::to_string(cfg_.max_positions));
      for (std::size_t i = 0; i < s.length; ++i) ids.push_back(i);
    }
    return add(x, embedding_lookup(pos_embed_, ids));
  }
  const Tensor kernel = weight_norm(pos_conv_v_, pos_conv_g_);
  const std::size_t k = cfg_.pos_conv_kernel;
  std::vector<Tensor> parts;
  for (const auto& s : layout.segments()) {
    Tensor seg = slice(x, 0, s.offset, s.offset + s.length);
    Tensor y = conv1d(seg, kernel, &pos_conv_bias_, {1, k / 2, cfg_.pos_conv_groups});
    if (k % 2 == 0) y = slice(y, 0, 0, s.length);
    parts.push_back(gelu(y));
  }
  return add(x, concat(parts, 0));
}

Tensor Model::encoder_layer(const EncoderLayer& layer, const Tensor& x, std::span<const Segment> segments,
                            const ForwardContext& ctx) const {
  const bool drop = ctx.training && cfg_.dropout > 0.0;
  Rng dummy(0);
  Rng& rng = ctx.rng != nullptr ? *ctx.rng : dummy;
  if (drop && ctx.rng == nullptr) throw ContractError("training forward with dropout needs an rng");

  Tensor h = affine_norm(x, 1, layer.attn_norm, cfg_.layer_norm_eps);
  Tensor attn = segment_attention(linear(h, layer.q), linear(h, layer.k), linear(h, layer.v), segments, cfg_.n_heads);
  attn = dropout(linear(attn, layer.out), cfg_.dropout, rng, drop);
  Tensor y = add(x, attn);
  h = affine_norm(y, 1, layer.ffn_norm, cfg_.layer_norm_eps);
  Tensor f = dropout(gelu(linear(h, layer.fc1)), cfg_.dropout, rng, drop);
  f = dropout(linear(f, layer.fc2), cfg_.dropout, rng, drop);
  return add(y, f);
}

LayerOutputs Model::forward(std::span<const ViewPair> batch, ForwardMode mode, const ForwardContext& ctx) const {
  if (batch.empty()) throw ContractError("forward: empty batch");
  const bool two_views = mode != ForwardMode::single_view;
  std::vector<std::size_t> frames;
  std::vector<Tensor> rows;
  for (const auto& vp : batch) {
    if (vp.masked_view.shape() != vp.clean_view.shape() || vp.masked_view.rank() != 2 ||
        vp.masked_view.dim(1) != cfg_.hidden_dim || vp.mask.frames != vp.masked_view.dim(0))
      throw DimensionError("forward: malformed view pair " + shape_string(vp.masked_view.shape()));
    frames.push_back(vp.mask.frames);
    rows.push_back(vp.masked_view);
    if (two_views) rows.push_back(vp.clean_view);
  }
  LayerOutputs out;
  out.layout = BatchLayout::make(std::move(frames), two_views);
  const auto segments = out.layout.segments();

  std::vector<std::size_t> perm;
  if (mode == ForwardMode::ms_hubert) {
    perm.resize(out.layout.rows);
    for (std::size_t r = 0; r < perm.size(); ++r) perm[r] = r;
    for (std::size_t u = 0; u < batch.size(); ++u)
      for (const auto i : batch[u].mask.indices) {
        const auto m = out.layout.masked_row(u, i), c = out.layout.clean_row(u, i);
        perm[m] = c;
        perm[c] = m;
      }
  }

  Tensor x = rows.size() == 1 ? rows.front() : concat(rows, 0);
  x = positions(x, out.layout);
  x = affine_norm(x, 1, encoder_norm_, cfg_.layer_norm_eps);
  if (ctx.training && cfg_.dropout > 0.0) {
    if (ctx.rng == nullptr) throw ContractError("training forward with dropout needs an rng");
    x = dropout(x, cfg_.dropout, *ctx.rng, true);
  }
  for (const auto& layer : layers_) {
    x = encoder_layer(layer, x, segments, ctx);
    if (mode == ForwardMode::ms_hubert) {
      x = gather_rows(x, perm);
      if (ctx.swap_invocations != nullptr) ++*ctx.swap_invocations;
    }
    out.layers.push_back(x);
  }
  return out;
}

LayerOutputs Model::forward(const ViewPair& views, ForwardMode mode, const ForwardContext& ctx) const {
  return forward(std::span<const ViewPair>(&views, 1), mode, ctx);
}

LayerOutputs Model::encode(std::span<const std::vector<double>> utterances) const {
  std::vector<ViewPair> views;
  views.reserve(utterances.size());
  for (const auto& audio : utterances) {
    Tensor x = conv_downsample(audio);
    views.push_back({x, x, MaskSpec::none(x.dim(0))});
  }
  return forward(views, ForwardMode::single_view);
}

}  // namespace mshubert
