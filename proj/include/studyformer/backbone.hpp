#pragma once

// Convolutional feature extractor shared by every view of a study.
//
// Each stage is conv(kxk, same padding) + bias -> ReLU -> max-pool(factor).
// The product of the pooling factors maps input_size onto out_grid, so a
// B x 3 x S x S batch becomes B x C x G x G.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "studyformer/errors.hpp"
#include "studyformer/rng.hpp"
#include "studyformer/tensor.hpp"

namespace studyformer {

struct BackboneConfig {
  std::size_t input_size = 64;
  std::size_t in_channels = 3;
  std::vector<std::size_t> stage_channels{16, 32};
  std::vector<std::size_t> downsample{4, 4};
  std::size_t out_channels = 32;
  std::size_t out_grid = 4;
  std::size_t kernel_size = 3;

  // Two stages, 64 px views -> 4 x 4 x 32.
  static BackboneConfig desk() { return {}; }

  // 320 px views -> 10 x 10 x 1024.
  static BackboneConfig paper() {
    BackboneConfig c;
    c.input_size = 320;
    c.stage_channels = {64, 128, 256, 512, 1024};
    c.downsample = {2, 2, 2, 2, 2};
    c.out_channels = 1024;
    c.out_grid = 10;
    return c;
  }

  void validate() const {
    if (stage_channels.empty()) throw ConfigError("backbone: at least one stage is required");
    if (stage_channels.size() != downsample.size()) {
      throw ConfigError("backbone: stage_channels has " + std::to_string(stage_channels.size()) +
                        " entries but downsample has " + std::to_string(downsample.size()));
    }
    if (out_channels < 1) throw ConfigError("backbone: out_channels C must be >= 1");
    if (in_channels < 1) throw ConfigError("backbone: in_channels must be >= 1");
    if (kernel_size % 2 == 0) throw ConfigError("backbone: kernel_size must be odd for same padding");
    std::size_t product = 1;
    for (std::size_t f : downsample) {
      if (f < 1) throw ConfigError("backbone: downsample factors must be >= 1");
      product *= f;
    }
    if (product * out_grid != input_size) {
      throw ConfigError("backbone: product of downsample factors (" + std::to_string(product) + ") x out_grid G (" +
                        std::to_string(out_grid) + ") must equal input_size (" + std::to_string(input_size) + ")");
    }
    for (std::size_t c : stage_channels) {
      if (c < 1) throw ConfigError("backbone: stage channel counts must be >= 1");
    }
    if (stage_channels.back() != out_channels) {
      throw ConfigError("backbone: last stage channels (" + std::to_string(stage_channels.back()) +
                        ") must equal out_channels C (" + std::to_string(out_channels) + ")");
    }
  }

  bool operator==(const BackboneConfig&) const = default;
};

template <class T>
struct BackboneParams {
  BackboneConfig config;
  std::vector<Tensor<T>> kernels;  // [out x in x k x k] per stage
  std::vector<Tensor<T>> biases;   // [out] per stage
  bool frozen = false;

  // Frozen parameters record no graph and hold no gradient buffers.
  void set_frozen(bool on) {
    frozen = on;
    for (auto& k : kernels) k.set_requires_grad(!on);
    for (auto& b : biases) b.set_requires_grad(!on);
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t s = 0; s < kernels.size(); ++s) {
      out.emplace_back("backbone.stage" + std::to_string(s) + ".kernel", &kernels[s]);
      out.emplace_back("backbone.stage" + std::to_string(s) + ".bias", &biases[s]);
    }
    return out;
  }
};

// Fan-in scaled uniform kernels, zero biases. Bitwise reproducible per seed.
template <class T>
BackboneParams<T> init_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  BackboneParams<T> params;
  params.config = config;
  Rng rng(derive_seed(seed, "backbone"));
  std::size_t in = config.in_channels;
  const std::size_t k = config.kernel_size;
  for (std::size_t out : config.stage_channels) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
    std::vector<T> values(out * in * k * k);
    for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
    params.kernels.emplace_back(Shape{out, in, k, k}, std::move(values), true);
    params.biases.push_back(Tensor<T>::zeros(Shape{out}, true));
    in = out;
  }
  return params;
}

// batch[B x in_channels x S x S] -> [B x C x G x G]
template <class T>
Tensor<T> extract_features(const BackboneParams<T>& params, const Tensor<T>& batch) {
  const auto& cfg = params.config;
  if (batch.rank() != 4 || batch.dim(1) != cfg.in_channels || batch.dim(2) != cfg.input_size ||
      batch.dim(3) != cfg.input_size) {
    throw DimensionError("extract_features: expected [B x " + std::to_string(cfg.in_channels) + " x " +
                         std::to_string(cfg.input_size) + " x " + std::to_string(cfg.input_size) + "], got " +
                         shape_string(batch.shape()));
  }
  Tensor<T> x = batch;
  for (std::size_t s = 0; s < params.kernels.size(); ++s) {
    x = conv2d(x, params.kernels[s], 1, cfg.kernel_size / 2);
    x = relu(add_channel_bias(x, params.biases[s]));
    if (cfg.downsample[s] > 1) x = max_pool2d(x, cfg.downsample[s]);
  }
  return x;
}

}  // namespace studyformer
