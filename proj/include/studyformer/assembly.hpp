#pragma once

// Square concatenation of per-view feature maps.
//
// A study with n views is laid out on a W x W grid of tiles, W = max(2,
// ceil(sqrt(n))). The first n tiles (row-major) are the original views in
// study order; the remaining W^2 - n tiles are image-space augmentations of
// the originals, cycling view 1, view 2, ... Features are extracted per tile
// and placed so that tile (r, c) covers rows [rG, (r+1)G) and columns
// [cG, (c+1)G) of a (W*G) x (W*G) x C grid.

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "studyformer/errors.hpp"
#include "studyformer/image.hpp"
#include "studyformer/rng.hpp"
#include "studyformer/tensor.hpp"

namespace studyformer {

inline constexpr std::size_t kMaxViews = 16;

inline std::size_t choose_grid_width(std::size_t n_views) {
  if (n_views < 1) throw ContractError("choose_grid_width: a study needs at least one view");
  if (n_views > kMaxViews) {
    throw CapacityError("StudyFormer accepts at most 16 views, got " + std::to_string(n_views));
  }
  std::size_t w = 2;
  while (w * w < n_views) ++w;
  return w;
}

enum class TransformKind { flip_horizontal, flip_vertical, rotate, brightness };

struct ImageTransform {
  TransformKind kind = TransformKind::flip_horizontal;
  int quarter_turns = 0;     // rotate: 1, 2 or 3 clockwise quarter turns
  float brightness = 1.0f;   // brightness: factor in [0.8, 1.2]

  bool operator==(const ImageTransform&) const = default;
};

struct AugmentationDescriptor {
  std::vector<ImageTransform> transforms;
  std::uint64_t seed = 0;

  // Each of hflip / vflip / rotation is included with probability 1/2, in that
  // order, and a brightness factor is always drawn last.
  static AugmentationDescriptor sample(std::uint64_t seed) {
    AugmentationDescriptor d;
    d.seed = seed;
    Rng rng(seed);
    if (rng.bernoulli(0.5)) d.transforms.push_back({TransformKind::flip_horizontal});
    if (rng.bernoulli(0.5)) d.transforms.push_back({TransformKind::flip_vertical});
    if (rng.bernoulli(0.5)) {
      d.transforms.push_back({TransformKind::rotate, static_cast<int>(rng.between(1, 3))});
    }
    d.transforms.push_back({TransformKind::brightness, 0, static_cast<float>(rng.uniform(0.8, 1.2))});
    return d;
  }

  Image apply(const Image& source) const {
    Image img = source;
    for (const auto& t : transforms) {
      switch (t.kind) {
        case TransformKind::flip_horizontal: img = flip_horizontal(img); break;
        case TransformKind::flip_vertical: img = flip_vertical(img); break;
        case TransformKind::rotate: img = rotate_quarter(img, t.quarter_turns); break;
        case TransformKind::brightness: img = scale_brightness(img, t.brightness); break;
      }
    }
    return img;
  }

  std::string describe() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < transforms.size(); ++i) {
      if (i) os << ',';
      const auto& t = transforms[i];
      switch (t.kind) {
        case TransformKind::flip_horizontal: os << "hflip"; break;
        case TransformKind::flip_vertical: os << "vflip"; break;
        case TransformKind::rotate: os << "rot" << 90 * t.quarter_turns; break;
        case TransformKind::brightness: os << "brightness=" << t.brightness; break;
      }
    }
    return os.str();
  }

  bool operator==(const AugmentationDescriptor&) const = default;
};

struct TileProvenance {
  std::size_t source_view = 0;                        // 0-based index into the study
  std::optional<AugmentationDescriptor> augmentation;  // empty for originals

  bool original() const { return !augmentation.has_value(); }
};

struct SynthesizedViews {
  std::vector<Image> images;
  std::vector<TileProvenance> provenance;
};

// Pads `views` to `target` images with seeded augmentations of the originals.
inline SynthesizedViews synthesize_views(const std::vector<Image>& views, std::size_t target, std::uint64_t seed) {
  if (views.empty()) throw ContractError("synthesize_views: at least one view is required");
  if (views.size() > target) {
    throw ContractError("synthesize_views: " + std::to_string(views.size()) + " views exceed target " +
                        std::to_string(target));
  }
  SynthesizedViews out;
  out.images.reserve(target);
  for (std::size_t i = 0; i < views.size(); ++i) {
    out.images.push_back(views[i]);
    out.provenance.push_back({i, std::nullopt});
  }
  for (std::size_t k = views.size(); k < target; ++k) {
    const std::size_t source = (k - views.size()) % views.size();
    auto descriptor = AugmentationDescriptor::sample(derive_seed(seed, "augment-tile", k));
    out.images.push_back(descriptor.apply(views[source]));
    out.provenance.push_back({source, std::move(descriptor)});
  }
  return out;
}

template <class T>
struct FeatureGrid {
  Tensor<T> data;  // [(W*G) x (W*G) x C]
  std::size_t width = 0;
  std::size_t tile = 0;      // G
  std::size_t channels = 0;  // C
  std::vector<TileProvenance> provenance;
};

// Places feature map k ([C x G x G]) at tile (k / W, k % W). Differentiable
// with respect to every input map.
template <class T>
FeatureGrid<T> assemble_square(const std::vector<Tensor<T>>& features, std::size_t width,
                               std::vector<TileProvenance> provenance = {}) {
  if (width < 2 || width > 4) throw ContractError("assemble_square: grid width must be 2, 3 or 4");
  if (features.size() != width * width) {
    throw DimensionError("assemble_square: expected " + std::to_string(width * width) + " feature maps for W=" +
                         std::to_string(width) + ", got " + std::to_string(features.size()));
  }
  const Tensor<T>& first = features.front();
  if (first.rank() != 3 || first.dim(1) != first.dim(2)) {
    throw DimensionError("assemble_square: feature maps must be [C x G x G], got " + shape_string(first.shape()));
  }
  std::vector<detail::NodePtr<T>> nodes;
  for (const auto& f : features) {
    if (f.shape() != first.shape()) {
      throw DimensionError("assemble_square: inconsistent feature maps " + shape_string(first.shape()) + " vs " +
                           shape_string(f.shape()));
    }
    nodes.push_back(f.node());
  }
  if (provenance.empty()) {
    for (std::size_t k = 0; k < features.size(); ++k) provenance.push_back({k, std::nullopt});
  }
  if (provenance.size() != features.size()) {
    throw DimensionError("assemble_square: provenance has " + std::to_string(provenance.size()) + " entries for " +
                         std::to_string(features.size()) + " tiles");
  }

  const std::size_t c = first.dim(0), g = first.dim(1), side = width * g;
  // Flat offset in the grid of element (channel ch, y, x) of tile k.
  auto grid_index = [=](std::size_t k, std::size_t ch, std::size_t y, std::size_t x) {
    const std::size_t row = (k / width) * g + y, col = (k % width) * g + x;
    return (row * side + col) * c + ch;
  };
  std::vector<T> out(side * side * c);
  for (std::size_t k = 0; k < features.size(); ++k) {
    const auto src = features[k].data();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < g; ++y)
        for (std::size_t x = 0; x < g; ++x) out[grid_index(k, ch, y, x)] = src[(ch * g + y) * g + x];
  }
  FeatureGrid<T> grid;
  grid.data = detail::make_op<T>(Shape{side, side, c}, std::move(out), std::move(nodes),
                                 [=](detail::Node<T>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      auto& gr = in.grad_buffer();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < g; ++y)
          for (std::size_t x = 0; x < g; ++x) gr[(ch * g + y) * g + x] += self.grad[grid_index(k, ch, y, x)];
    }
  });
  grid.width = width;
  grid.tile = g;
  grid.channels = c;
  grid.provenance = std::move(provenance);
  return grid;
}

// Copy of tile k as [C x G x G].
template <class T>
Tensor<T> extract_tile(const FeatureGrid<T>& grid, std::size_t k) {
  if (k >= grid.width * grid.width) throw ContractError("extract_tile: tile index out of range");
  const std::size_t c = grid.channels, g = grid.tile, side = grid.width * g;
  const std::size_t r0 = (k / grid.width) * g, c0 = (k % grid.width) * g;
  std::vector<T> out(c * g * g);
  const auto src = grid.data.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < g; ++y)
      for (std::size_t x = 0; x < g; ++x) out[(ch * g + y) * g + x] = src[((r0 + y) * side + c0 + x) * c + ch];
  return Tensor<T>(Shape{c, g, g}, std::move(out));
}

}  // namespace studyformer
