#pragma once

// Procedural multi-view benchmark: grayscale "radiographs" with geometric
// shapes standing in for findings.
//
// Each view has four 32x32-style quadrant slots; every vocabulary shape is
// drawn independently with probability shape_probability into a free slot.
// Single-view labels mark the presence of one shape in a view. Conjunction
// labels (A, B) are positive for a study when A appears in one view and B in a
// different view; the two shapes of a conjunction pair are never drawn in the
// same view, and every view of a positive study carries the label because the
// evidence only exists at study level.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "studyformer/data.hpp"
#include "studyformer/errors.hpp"
#include "studyformer/image.hpp"
#include "studyformer/rng.hpp"

namespace studyformer {

enum class ShapeKind { disc, square, ring, plus, frame, diamond, xcross };

inline const char* shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::disc: return "disc";
    case ShapeKind::square: return "square";
    case ShapeKind::ring: return "ring";
    case ShapeKind::plus: return "plus";
    case ShapeKind::frame: return "frame";
    case ShapeKind::diamond: return "diamond";
    case ShapeKind::xcross: return "xcross";
  }
  return "?";
}

inline ShapeKind parse_shape(const std::string& name) {
  for (auto k : {ShapeKind::disc, ShapeKind::square, ShapeKind::ring, ShapeKind::plus, ShapeKind::frame,
                 ShapeKind::diamond, ShapeKind::xcross}) {
    if (name == shape_name(k)) return k;
  }
  throw ValidationError("unknown shape '" + name + "'");
}

struct LabelRule {
  std::string name;
  ShapeKind first = ShapeKind::disc;
  std::optional<ShapeKind> second;  // set for conjunction labels

  bool conjunction() const { return second.has_value(); }
};

struct SyntheticSpec {
  std::size_t image_size = 64;
  std::vector<ShapeKind> shapes{ShapeKind::disc, ShapeKind::square, ShapeKind::ring,
                                ShapeKind::plus, ShapeKind::frame, ShapeKind::diamond};
  std::vector<LabelRule> labels;
  std::size_t min_views = 1;
  std::size_t max_views = 6;
  double shape_probability = 0.25;
  double noise = 0.06;
  std::size_t studies_before_cutoff = 2000;
  std::size_t studies_after_cutoff = 600;
  Date cutoff = Date{std::chrono::year{2022}, std::chrono::month{4}, std::chrono::day{1}};
  std::uint64_t seed = 0;

  // Six single-view labels plus two conjunction labels over the same shapes.
  static SyntheticSpec benchmark(std::uint64_t seed) {
    SyntheticSpec s;
    s.seed = seed;
    for (auto k : s.shapes) s.labels.push_back({shape_name(k), k, std::nullopt});
    s.labels.push_back({"disc+square", ShapeKind::disc, ShapeKind::square});
    s.labels.push_back({"ring+plus", ShapeKind::ring, ShapeKind::plus});
    return s;
  }

  void validate() const {
    if (labels.empty()) throw ContractError("synthetic spec: at least one label is required");
    if (image_size < 16) throw ContractError("synthetic spec: image_size must be >= 16");
    if (min_views < 1 || max_views < min_views || max_views > 16) {
      throw ContractError("synthetic spec: views per study must satisfy 1 <= min <= max <= 16");
    }
    if (studies_before_cutoff + studies_after_cutoff == 0) throw ContractError("synthetic spec: no studies requested");
    auto in_vocab = [&](ShapeKind k) { return std::find(shapes.begin(), shapes.end(), k) != shapes.end(); };
    for (const auto& l : labels) {
      if (!in_vocab(l.first) || (l.second && !in_vocab(*l.second))) {
        throw ContractError("synthetic spec: label '" + l.name + "' uses a shape outside the vocabulary");
      }
      if (l.second && *l.second == l.first) throw ContractError("synthetic spec: conjunction of a shape with itself");
    }
  }
};

struct ShapePlacement {
  ShapeKind kind = ShapeKind::disc;
  int cx = 0, cy = 0;
  int radius = 0;
  float intensity = 1.0f;
};

// Whether pixel (x, y) lies inside the placed shape.
inline bool shape_covers(const ShapePlacement& s, int x, int y) {
  const double dx = x - s.cx, dy = y - s.cy, r = s.radius;
  const double ax = std::abs(dx), ay = std::abs(dy), d = std::hypot(dx, dy);
  switch (s.kind) {
    case ShapeKind::disc: return d <= r;
    case ShapeKind::square: return std::max(ax, ay) <= 0.8 * r;
    case ShapeKind::ring: return d <= r && d >= 0.55 * r;
    case ShapeKind::plus: return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);
    case ShapeKind::frame: return std::max(ax, ay) <= 0.85 * r && std::max(ax, ay) >= 0.5 * r;
    case ShapeKind::diamond: return ax + ay <= r;
    case ShapeKind::xcross: return std::abs(ax - ay) <= 0.3 * r && std::max(ax, ay) <= 0.8 * r;
  }
  return false;
}

inline std::vector<std::uint8_t> shape_mask(const ShapePlacement& s, std::size_t size) {
  std::vector<std::uint8_t> mask(size * size, 0);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      mask[y * size + x] = shape_covers(s, static_cast<int>(x), static_cast<int>(y)) ? 1 : 0;
  return mask;
}

// Background with a smooth gradient, shapes painted on top, then uniform noise.
inline Image render_view(const std::vector<ShapePlacement>& shapes, std::size_t size, double noise, Rng& rng) {
  const double base = rng.uniform(0.08, 0.22);
  const double gx = rng.uniform(-0.08, 0.08), gy = rng.uniform(-0.08, 0.08);
  Image img(size, size, 3);
  const double inv = 1.0 / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double v = base + gx * (static_cast<double>(x) * inv - 0.5) + gy * (static_cast<double>(y) * inv - 0.5);
      for (const auto& s : shapes) {
        if (shape_covers(s, static_cast<int>(x), static_cast<int>(y))) v = s.intensity;
      }
      v += rng.uniform(-noise, noise);
      const float q = static_cast<float>(quantize_pixel(static_cast<float>(v))) / 255.0f;
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = q;
    }
  return img;
}

struct SyntheticDataset {
  Manifest manifest;
  std::vector<std::vector<std::vector<ShapePlacement>>> placements;  // [study][view] -> shapes
};

namespace detail {

inline std::vector<ShapePlacement> sample_view_shapes(const SyntheticSpec& spec, Rng& rng) {
  std::vector<ShapeKind> chosen;
  for (auto k : spec.shapes) {
    if (rng.bernoulli(spec.shape_probability)) chosen.push_back(k);
  }
  // Keep conjunction partners out of the same view.
  for (const auto& rule : spec.labels) {
    if (!rule.conjunction()) continue;
    const auto a = std::find(chosen.begin(), chosen.end(), rule.first);
    const auto b = std::find(chosen.begin(), chosen.end(), *rule.second);
    if (a != chosen.end() && b != chosen.end()) chosen.erase(rng.bernoulli(0.5) ? a : b);
  }
  std::shuffle(chosen.begin(), chosen.end(), rng.engine());
  if (chosen.size() > 4) chosen.resize(4);
  std::array<int, 4> slots{0, 1, 2, 3};
  std::shuffle(slots.begin(), slots.end(), rng.engine());
  const int half = static_cast<int>(spec.image_size) / 2;
  const int jitter = std::max(1, half / 10);
  const int r_lo = std::max(3, half * 9 / 32), r_hi = std::max(r_lo, half * 11 / 32);
  std::vector<ShapePlacement> out;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    ShapePlacement s;
    s.kind = chosen[i];
    s.cx = (slots[i] % 2) * half + half / 2 + static_cast<int>(rng.between(-jitter, jitter));
    s.cy = (slots[i] / 2) * half + half / 2 + static_cast<int>(rng.between(-jitter, jitter));
    s.radius = static_cast<int>(rng.between(r_lo, r_hi));
    s.intensity = static_cast<float>(rng.uniform(0.6, 0.95));
    out.push_back(s);
  }
  return out;
}

inline bool view_has(const std::vector<ShapePlacement>& view, ShapeKind k) {
  return std::any_of(view.begin(), view.end(), [k](const ShapePlacement& s) { return s.kind == k; });
}

}  // namespace detail

// Label vector for one study's views given its shape placements.
inline LabelMatrix label_views(const SyntheticSpec& spec, const std::vector<std::vector<ShapePlacement>>& views) {
  LabelMatrix labels(views.size(), LabelVector(spec.labels.size(), 0));
  for (std::size_t i = 0; i < spec.labels.size(); ++i) {
    const auto& rule = spec.labels[i];
    if (!rule.conjunction()) {
      for (std::size_t v = 0; v < views.size(); ++v) labels[v][i] = detail::view_has(views[v], rule.first) ? 1 : 0;
      continue;
    }
    bool positive = false;
    for (std::size_t a = 0; a < views.size() && !positive; ++a)
      for (std::size_t b = 0; b < views.size() && !positive; ++b)
        positive = a != b && detail::view_has(views[a], rule.first) && detail::view_has(views[b], *rule.second);
    for (auto& row : labels) row[i] = positive ? 1 : 0;
  }
  return labels;
}

// Renders every study into out_dir/images, writes out_dir/manifest.tsv and a
// shapes.tsv ground-truth sidecar. Deterministic given spec.seed.
inline SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir / "images");
  SyntheticDataset ds;
  ds.manifest.root = out_dir;
  for (const auto& l : spec.labels) ds.manifest.label_names.push_back(l.name);

  const std::size_t total = spec.studies_before_cutoff + spec.studies_after_cutoff;
  const auto cutoff_days = std::chrono::sys_days(spec.cutoff);
  std::ofstream truth(out_dir / "shapes.tsv");
  truth << "study_id\tview\tshape\tcx\tcy\tradius\n";
  for (std::size_t s = 0; s < total; ++s) {
    Rng rng(derive_seed(spec.seed, "data", s));
    Study study;
    char id[32];
    std::snprintf(id, sizeof id, "s%05zu", s);
    study.id = id;
    const bool early = s < spec.studies_before_cutoff;
    const auto offset = std::chrono::days(static_cast<int>(rng.between(1, 365)));
    study.date = Date(early ? cutoff_days - offset : cutoff_days + offset - std::chrono::days(1));

    const auto n_views = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(spec.min_views), static_cast<std::int64_t>(spec.max_views)));
    std::vector<std::vector<ShapePlacement>> views;
    for (std::size_t v = 0; v < n_views; ++v) {
      views.push_back(detail::sample_view_shapes(spec, rng));
      const Image img = render_view(views.back(), spec.image_size, spec.noise, rng);
      const std::string rel = "images/" + study.id + "_v" + std::to_string(v + 1) + ".ppm";
      write_pnm((out_dir / rel).string(), img);
      study.views.push_back(rel);
      for (const auto& p : views.back()) {
        truth << study.id << '\t' << v << '\t' << shape_name(p.kind) << '\t' << p.cx << '\t' << p.cy << '\t'
              << p.radius << '\n';
      }
    }
    study.view_labels = label_views(spec, views);
    study.labels = aggregate_study_labels(study.view_labels);
    ds.manifest.studies.push_back(std::move(study));
    ds.placements.push_back(std::move(views));
  }
  save_manifest(out_dir / "manifest.tsv", ds.manifest);
  return ds;
}

}  // namespace studyformer
