#pragma once

// Vision transformer over a FeatureGrid with patch size 1: every spatial cell
// of the concatenated grid is one token.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "studyformer/assembly.hpp"
#include "studyformer/errors.hpp"
#include "studyformer/rng.hpp"
#include "studyformer/tensor.hpp"

namespace studyformer {

struct ViTConfig {
  std::size_t patch_size = 1;
  std::size_t depth = 2;
  std::size_t heads = 2;
  std::size_t mlp_dim = 64;
  std::size_t embed_dim = 32;
  std::size_t n_labels = 8;
  std::size_t in_channels = 32;  // C of the feature grid
  std::size_t tile = 4;          // G of the feature grid
  std::vector<std::size_t> supported_widths{2, 3, 4};
  double ln_eps = 1e-5;

  static ViTConfig desk() { return {}; }

  static ViTConfig paper() {
    ViTConfig c;
    c.depth = 6;
    c.heads = 16;
    c.mlp_dim = 2048;
    c.embed_dim = 1024;
    c.n_labels = 41;
    c.in_channels = 1024;
    c.tile = 10;
    return c;
  }

  std::size_t tokens_for_width(std::size_t w) const { return (w * tile) * (w * tile); }

  void validate() const {
    if (patch_size != 1) throw ConfigError("vit: patch_size is fixed at 1");
    if (heads == 0 || embed_dim % heads != 0) {
      throw ConfigError("vit: embed_dim (" + std::to_string(embed_dim) + ") must be divisible by heads (" +
                        std::to_string(heads) + ")");
    }
    if (mlp_dim == 0 || n_labels == 0 || in_channels == 0 || tile == 0) {
      throw ConfigError("vit: mlp_dim, n_labels, in_channels and tile must be positive");
    }
    if (supported_widths.empty()) throw ConfigError("vit: supported_widths must not be empty");
    for (std::size_t w : supported_widths) {
      if (w < 2 || w > 4) throw ConfigError("vit: supported widths must lie in {2,3,4}, got " + std::to_string(w));
    }
  }

  bool operator==(const ViTConfig&) const = default;
};

template <class T>
struct TransformerBlock {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> qkv_weight, qkv_bias;  // [E x 3E], [3E]
  Tensor<T> out_weight, out_bias;  // [E x E], [E]
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> fc1_weight, fc1_bias;  // [E x M], [M]
  Tensor<T> fc2_weight, fc2_bias;  // [M x E], [E]
};

template <class T>
struct ViTParams {
  ViTConfig config;
  Tensor<T> proj_weight, proj_bias;  // [C x E], [E]
  Tensor<T> cls_token;               // [1 x E]
  std::vector<Tensor<T>> positional;  // one [(W*G)^2 + 1 x E] table per supported width
  std::vector<TransformerBlock<T>> blocks;
  Tensor<T> norm_gamma, norm_beta;
  Tensor<T> head_weight, head_bias;  // [E x L], [L]

  const Tensor<T>& positional_for(std::size_t width) const {
    const auto& widths = config.supported_widths;
    const auto it = std::find(widths.begin(), widths.end(), width);
    if (it == widths.end()) {
      throw ConfigError("vit: grid width " + std::to_string(width) + " is not among the supported widths");
    }
    return positional[static_cast<std::size_t>(it - widths.begin())];
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out{
        {"vit.proj.weight", &proj_weight}, {"vit.proj.bias", &proj_bias}, {"vit.cls", &cls_token}};
    for (std::size_t i = 0; i < positional.size(); ++i) {
      out.emplace_back("vit.pos.w" + std::to_string(config.supported_widths[i]), &positional[i]);
    }
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      auto& b = blocks[l];
      const std::string p = "vit.block" + std::to_string(l) + ".";
      out.emplace_back(p + "ln1.gamma", &b.ln1_gamma);
      out.emplace_back(p + "ln1.beta", &b.ln1_beta);
      out.emplace_back(p + "qkv.weight", &b.qkv_weight);
      out.emplace_back(p + "qkv.bias", &b.qkv_bias);
      out.emplace_back(p + "out.weight", &b.out_weight);
      out.emplace_back(p + "out.bias", &b.out_bias);
      out.emplace_back(p + "ln2.gamma", &b.ln2_gamma);
      out.emplace_back(p + "ln2.beta", &b.ln2_beta);
      out.emplace_back(p + "fc1.weight", &b.fc1_weight);
      out.emplace_back(p + "fc1.bias", &b.fc1_bias);
      out.emplace_back(p + "fc2.weight", &b.fc2_weight);
      out.emplace_back(p + "fc2.bias", &b.fc2_bias);
    }
    out.emplace_back("vit.norm.gamma", &norm_gamma);
    out.emplace_back("vit.norm.beta", &norm_beta);
    out.emplace_back("vit.head.weight", &head_weight);
    out.emplace_back("vit.head.bias", &head_bias);
    return out;
  }
};

namespace detail {

template <class T>
Tensor<T> uniform_parameter(Rng& rng, Shape shape, double bound) {
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(values), true);
}

template <class T>
Tensor<T> xavier_parameter(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  return uniform_parameter<T>(rng, Shape{fan_in, fan_out},
                              std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
}

template <class T>
Tensor<T> normal_parameter(Rng& rng, Shape shape, double stddev) {
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(stddev * rng.normal());
  return Tensor<T>(std::move(shape), std::move(values), true);
}

}  // namespace detail

template <class T>
ViTParams<T> init_vit(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, "vit"));
  const std::size_t e = config.embed_dim, m = config.mlp_dim;
  ViTParams<T> p;
  p.config = config;
  p.proj_weight = detail::xavier_parameter<T>(rng, config.in_channels, e);
  p.proj_bias = Tensor<T>::zeros(Shape{e}, true);
  p.cls_token = detail::normal_parameter<T>(rng, Shape{1, e}, 0.02);
  for (std::size_t w : config.supported_widths) {
    p.positional.push_back(detail::normal_parameter<T>(rng, Shape{config.tokens_for_width(w) + 1, e}, 0.02));
  }
  for (std::size_t l = 0; l < config.depth; ++l) {
    TransformerBlock<T> b;
    b.ln1_gamma = Tensor<T>::full(Shape{e}, T(1), true);
    b.ln1_beta = Tensor<T>::zeros(Shape{e}, true);
    b.qkv_weight = detail::xavier_parameter<T>(rng, e, 3 * e);
    b.qkv_bias = Tensor<T>::zeros(Shape{3 * e}, true);
    b.out_weight = detail::xavier_parameter<T>(rng, e, e);
    b.out_bias = Tensor<T>::zeros(Shape{e}, true);
    b.ln2_gamma = Tensor<T>::full(Shape{e}, T(1), true);
    b.ln2_beta = Tensor<T>::zeros(Shape{e}, true);
    b.fc1_weight = detail::xavier_parameter<T>(rng, e, m);
    b.fc1_bias = Tensor<T>::zeros(Shape{m}, true);
    b.fc2_weight = detail::xavier_parameter<T>(rng, m, e);
    b.fc2_bias = Tensor<T>::zeros(Shape{e}, true);
    p.blocks.push_back(std::move(b));
  }
  p.norm_gamma = Tensor<T>::full(Shape{e}, T(1), true);
  p.norm_beta = Tensor<T>::zeros(Shape{e}, true);
  p.head_weight = detail::xavier_parameter<T>(rng, e, config.n_labels);
  p.head_bias = Tensor<T>::zeros(Shape{config.n_labels}, true);
  return p;
}

// Grid cells in row-major order, each projected C -> E, CLS prepended, then the
// positional table for the grid width added. Result: [(W*G)^2 + 1 x E].
template <class T>
Tensor<T> tokenize(const FeatureGrid<T>& grid, const ViTParams<T>& params) {
  const auto& cfg = params.config;
  const Tensor<T>& pos = params.positional_for(grid.width);
  if (grid.channels != cfg.in_channels || grid.tile != cfg.tile) {
    throw DimensionError("tokenize: grid with C=" + std::to_string(grid.channels) + ", G=" +
                         std::to_string(grid.tile) + " does not match ViT config C=" +
                         std::to_string(cfg.in_channels) + ", G=" + std::to_string(cfg.tile));
  }
  const std::size_t cells = grid.data.dim(0) * grid.data.dim(1);
  Tensor<T> tokens = reshape(grid.data, Shape{cells, grid.channels});
  tokens = add_row_bias(matmul(tokens, params.proj_weight), params.proj_bias);
  tokens = concat_rows<T>({params.cls_token, tokens});
  return add(tokens, pos);
}

// Attention weights captured during encode: layers[l][h] is an N x N
// row-stochastic matrix, N = tokens (including CLS), stored row-major.
template <class T>
struct AttentionRecord {
  std::size_t tokens = 0;
  std::vector<std::vector<std::vector<T>>> layers;
};

template <class T>
struct Encoded {
  Tensor<T> tokens;
  std::optional<AttentionRecord<T>> attention;
};

// Pre-norm blocks: x + MHSA(LN(x)), then x + MLP(LN(x)) with a GELU MLP.
template <class T>
Encoded<T> encode(const Tensor<T>& tokens, const ViTParams<T>& params, bool record_attention = false) {
  const auto& cfg = params.config;
  if (tokens.rank() != 2 || tokens.dim(1) != cfg.embed_dim) {
    throw DimensionError("encode: tokens must be [N x " + std::to_string(cfg.embed_dim) + "], got " +
                         shape_string(tokens.shape()));
  }
  const std::size_t e = cfg.embed_dim, dh = e / cfg.heads;
  const T eps = static_cast<T>(cfg.ln_eps);
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
  Encoded<T> result;
  if (record_attention) result.attention = AttentionRecord<T>{tokens.dim(0), {}};

  Tensor<T> x = tokens;
  for (const auto& b : params.blocks) {
    Tensor<T> h = layer_norm(x, b.ln1_gamma, b.ln1_beta, eps);
    Tensor<T> qkv = add_row_bias(matmul(h, b.qkv_weight), b.qkv_bias);
    std::vector<Tensor<T>> heads;
    std::vector<std::vector<T>> layer_attention;
    for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
      Tensor<T> q = slice_cols(qkv, hd * dh, dh);
      Tensor<T> k = slice_cols(qkv, e + hd * dh, dh);
      Tensor<T> v = slice_cols(qkv, 2 * e + hd * dh, dh);
      Tensor<T> attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt_dh));
      if (record_attention) layer_attention.emplace_back(attn.data().begin(), attn.data().end());
      heads.push_back(matmul(attn, v));
    }
    if (record_attention) result.attention->layers.push_back(std::move(layer_attention));
    Tensor<T> mixed = heads.size() == 1 ? heads.front() : concat_cols(heads);
    x = add(x, add_row_bias(matmul(mixed, b.out_weight), b.out_bias));

    h = layer_norm(x, b.ln2_gamma, b.ln2_beta, eps);
    h = gelu(add_row_bias(matmul(h, b.fc1_weight), b.fc1_bias));
    x = add(x, add_row_bias(matmul(h, b.fc2_weight), b.fc2_bias));
  }
  result.tokens = x;
  return result;
}

// sigmoid(head(LN(CLS))) -> [L] independent label probabilities.
template <class T>
Tensor<T> classify(const Tensor<T>& encoded, const ViTParams<T>& params) {
  const auto& cfg = params.config;
  if (encoded.rank() != 2 || encoded.dim(1) != cfg.embed_dim) {
    throw DimensionError("classify: encoded tokens must be [N x " + std::to_string(cfg.embed_dim) + "], got " +
                         shape_string(encoded.shape()));
  }
  Tensor<T> cls = slice_rows(encoded, 0, 1);
  cls = layer_norm(cls, params.norm_gamma, params.norm_beta, static_cast<T>(cfg.ln_eps));
  Tensor<T> logits = add_row_bias(matmul(cls, params.head_weight), params.head_bias);
  return reshape(sigmoid(logits), Shape{cfg.n_labels});
}

template <class T>
Tensor<T> vit_forward(const FeatureGrid<T>& grid, const ViTParams<T>& params) {
  return classify(encode(tokenize(grid, params), params).tokens, params);
}

template <class T>
struct Rollout {
  Tensor<T> heatmap;        // [(W*G) x (W*G)], min-max normalised to [0, 1]
  bool degenerate = false;  // no attention mass reached the spatial tokens
};

// Head-averaged attention plus identity, rows renormalised, multiplied across
// layers (last layer leftmost). The CLS row restricted to the spatial tokens is
// reshaped row-major and min-max normalised. A constant positive map becomes
// all ones; an all-zero map stays zero and is flagged degenerate.
template <class T>
Rollout<T> attention_rollout(const AttentionRecord<T>& record) {
  if (record.layers.empty()) throw ContractError("attention_rollout: empty attention record");
  const std::size_t n = record.tokens;
  if (n < 2) throw ContractError("attention_rollout: record has no spatial tokens");
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n - 1))));
  if (side * side != n - 1) throw DimensionError("attention_rollout: spatial token count is not a square");

  detail::RowMatrix<T> rollout = detail::RowMatrix<T>::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (const auto& layer : record.layers) {
    if (layer.empty()) throw ContractError("attention_rollout: layer without heads");
    detail::RowMatrix<T> avg = detail::RowMatrix<T>::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (const auto& head : layer) {
      if (head.size() != n * n) throw DimensionError("attention_rollout: head matrix has wrong size");
      avg += detail::ConstMatrixMap<T>(head.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    }
    avg /= static_cast<T>(layer.size());
    avg += detail::RowMatrix<T>::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (Eigen::Index r = 0; r < avg.rows(); ++r) avg.row(r) /= avg.row(r).sum();
    rollout = (avg * rollout).eval();
  }

  std::vector<T> map(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) map[i] = rollout(0, static_cast<Eigen::Index>(i + 1));
  const auto [lo_it, hi_it] = std::minmax_element(map.begin(), map.end());
  const T lo = *lo_it, hi = *hi_it;
  Rollout<T> out;
  if (hi > lo) {
    for (auto& v : map) v = (v - lo) / (hi - lo);
  } else if (hi > T(0)) {
    std::fill(map.begin(), map.end(), T(1));
  } else {
    std::fill(map.begin(), map.end(), T(0));
    out.degenerate = true;
  }
  out.heatmap = Tensor<T>(Shape{side, side}, std::move(map));
  return out;
}

}  // namespace studyformer
