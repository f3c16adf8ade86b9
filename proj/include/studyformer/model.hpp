#pragma once

// The three compared models and everything needed to run them on a study:
//
//   single_view  backbone -> GAP -> linear -> sigmoid, per view; the study
//                score is the column maximum over views
//   mvcnn        backbone per view -> element-wise max view pooling -> two
//                conv layers -> GAP -> linear -> sigmoid
//   studyformer  backbone per tile (originals + augmentations) -> square
//                concatenation -> patch-size-1 ViT

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "studyformer/assembly.hpp"
#include "studyformer/backbone.hpp"
#include "studyformer/data.hpp"
#include "studyformer/errors.hpp"
#include "studyformer/image.hpp"
#include "studyformer/optim.hpp"
#include "studyformer/rng.hpp"
#include "studyformer/tensor.hpp"
#include "studyformer/vit.hpp"

namespace studyformer {

enum class ModelKind { single_view, mvcnn, studyformer };

inline std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::single_view: return "single_view";
    case ModelKind::mvcnn: return "mvcnn";
    case ModelKind::studyformer: return "studyformer";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& name) {
  if (name == "single_view") return ModelKind::single_view;
  if (name == "mvcnn") return ModelKind::mvcnn;
  if (name == "studyformer") return ModelKind::studyformer;
  throw ConfigError("model must be single_view, mvcnn or studyformer, got '" + name + "'");
}

template <class T>
using NamedParameters = std::vector<std::pair<std::string, Tensor<T>*>>;

template <class T>
Tensor<T> clone_parameter(const Tensor<T>& t) {
  return Tensor<T>(t.shape(), std::vector<T>(t.data().begin(), t.data().end()), t.requires_grad());
}

// ---------------------------------------------------------------------------
// Per-view head
// ---------------------------------------------------------------------------

template <class T>
struct ViewHeadParams {
  Tensor<T> weight, bias;  // [C x L], [L]

  NamedParameters<T> named_parameters() { return {{"view_head.weight", &weight}, {"view_head.bias", &bias}}; }
};

template <class T>
ViewHeadParams<T> init_view_head(std::size_t channels, std::size_t n_labels, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "view-head"));
  return {detail::xavier_parameter<T>(rng, channels, n_labels), Tensor<T>::zeros(Shape{n_labels}, true)};
}

// features[B x C x G x G] -> probabilities [B x L]
template <class T>
Tensor<T> view_head_forward(const Tensor<T>& features, const ViewHeadParams<T>& head) {
  return sigmoid(add_row_bias(matmul(global_avg_pool(features), head.weight), head.bias));
}

// Column-wise maximum of per-view probabilities [n x L] -> [L].
template <class T>
Tensor<T> single_view_max_baseline(const Tensor<T>& per_view_probs) {
  detail::require_rank("single_view_max_baseline", per_view_probs, 2);
  std::vector<Tensor<T>> rows;
  for (std::size_t v = 0; v < per_view_probs.dim(0); ++v) rows.push_back(select(per_view_probs, v));
  return elementwise_max(rows);
}

template <class T>
std::vector<T> single_view_max_baseline(const std::vector<std::vector<T>>& per_view_probs) {
  if (per_view_probs.empty()) throw ContractError("single_view_max_baseline: no views");
  std::vector<T> out = per_view_probs.front();
  for (const auto& row : per_view_probs) {
    if (row.size() != out.size()) throw DimensionError("single_view_max_baseline: ragged probability matrix");
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = std::max(out[i], row[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// MVCNN head
// ---------------------------------------------------------------------------

struct MvcnnConfig {
  std::size_t in_channels = 32;
  std::size_t hidden = 32;
  std::size_t n_labels = 8;
  std::size_t kernel_size = 3;

  void validate() const {
    if (in_channels == 0 || hidden == 0 || n_labels == 0) throw ConfigError("mvcnn: channel counts must be positive");
    if (kernel_size % 2 == 0) throw ConfigError("mvcnn: kernel_size must be odd");
  }

  bool operator==(const MvcnnConfig&) const = default;
};

template <class T>
struct MvcnnHeadParams {
  MvcnnConfig config;
  Tensor<T> conv1_kernel, conv1_bias;  // [H x C x k x k], [H]
  Tensor<T> conv2_kernel, conv2_bias;  // [H x H x k x k], [H]
  Tensor<T> fc_weight, fc_bias;        // [H x L], [L]

  NamedParameters<T> named_parameters() {
    return {{"mvcnn.conv1.kernel", &conv1_kernel}, {"mvcnn.conv1.bias", &conv1_bias},
            {"mvcnn.conv2.kernel", &conv2_kernel}, {"mvcnn.conv2.bias", &conv2_bias},
            {"mvcnn.fc.weight", &fc_weight},       {"mvcnn.fc.bias", &fc_bias}};
  }
};

template <class T>
MvcnnHeadParams<T> init_mvcnn_head(const MvcnnConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, "mvcnn-head"));
  const std::size_t k = config.kernel_size, h = config.hidden;
  MvcnnHeadParams<T> p;
  p.config = config;
  p.conv1_kernel = detail::uniform_parameter<T>(rng, Shape{h, config.in_channels, k, k},
                                                std::sqrt(6.0 / static_cast<double>(config.in_channels * k * k)));
  p.conv1_bias = Tensor<T>::zeros(Shape{h}, true);
  p.conv2_kernel = detail::uniform_parameter<T>(rng, Shape{h, h, k, k}, std::sqrt(6.0 / static_cast<double>(h * k * k)));
  p.conv2_bias = Tensor<T>::zeros(Shape{h}, true);
  p.fc_weight = detail::xavier_parameter<T>(rng, h, config.n_labels);
  p.fc_bias = Tensor<T>::zeros(Shape{config.n_labels}, true);
  return p;
}

// Element-wise max over views, each [C x G x G].
template <class T>
Tensor<T> view_pool(const std::vector<Tensor<T>>& per_view_features) {
  if (per_view_features.empty()) throw ContractError("view_pool: at least one view is required");
  for (const auto& f : per_view_features) {
    if (f.rank() != 3 || f.shape() != per_view_features.front().shape()) {
      throw DimensionError("view_pool: inconsistent feature maps " + shape_string(per_view_features.front().shape()) +
                           " vs " + shape_string(f.shape()));
    }
  }
  return elementwise_max(per_view_features);
}

template <class T>
Tensor<T> mvcnn_forward(const std::vector<Tensor<T>>& per_view_features, const MvcnnHeadParams<T>& head) {
  const Tensor<T> pooled = view_pool(per_view_features);
  if (pooled.dim(0) != head.config.in_channels) {
    throw DimensionError("mvcnn_forward: features have " + std::to_string(pooled.dim(0)) + " channels, head expects " +
                         std::to_string(head.config.in_channels));
  }
  const std::size_t pad = head.config.kernel_size / 2;
  Tensor<T> x = reshape(pooled, Shape{1, pooled.dim(0), pooled.dim(1), pooled.dim(2)});
  x = relu(add_channel_bias(conv2d(x, head.conv1_kernel, 1, pad), head.conv1_bias));
  x = relu(add_channel_bias(conv2d(x, head.conv2_kernel, 1, pad), head.conv2_bias));
  Tensor<T> logits = add_row_bias(matmul(global_avg_pool(x), head.fc_weight), head.fc_bias);
  return reshape(sigmoid(logits), Shape{head.config.n_labels});
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

struct ModelSpec {
  ModelKind kind = ModelKind::studyformer;
  std::string name;
  std::uint64_t seed = 0;
  std::vector<std::string> label_names;  // the dataset vocabulary
  std::vector<std::size_t> label_subset;  // indices into label_names; empty = all
  BackboneConfig backbone;
  ViTConfig vit;            // in_channels, tile and n_labels are derived
  std::size_t mvcnn_hidden = 32;

  std::vector<std::size_t> output_labels() const {
    if (!label_subset.empty()) return label_subset;
    std::vector<std::size_t> all(label_names.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }

  void validate() const {
    if (label_names.empty()) throw ConfigError("model: label vocabulary is empty");
    std::vector<std::size_t> seen;
    for (std::size_t i : label_subset) {
      if (i >= label_names.size()) {
        throw ConfigError("model: label_subset index " + std::to_string(i) + " out of range for " +
                          std::to_string(label_names.size()) + " labels");
      }
      if (std::find(seen.begin(), seen.end(), i) != seen.end()) {
        throw ConfigError("model: label_subset repeats index " + std::to_string(i));
      }
      seen.push_back(i);
    }
    backbone.validate();
    if (kind == ModelKind::studyformer) derived_vit().validate();
    if (kind == ModelKind::mvcnn) derived_mvcnn().validate();
  }

  ViTConfig derived_vit() const {
    ViTConfig c = vit;
    c.in_channels = backbone.out_channels;
    c.tile = backbone.out_grid;
    c.n_labels = output_labels().size();
    return c;
  }

  MvcnnConfig derived_mvcnn() const {
    MvcnnConfig c;
    c.in_channels = backbone.out_channels;
    c.hidden = mvcnn_hidden;
    c.n_labels = output_labels().size();
    return c;
  }

  bool operator==(const ModelSpec&) const = default;
};

struct EpochRecord {
  int stage = 1;
  std::size_t epoch = 0;   // 0-based within the stage
  double train_loss = 0.0;
  double val_loss = 0.0;   // NaN when there is no validation set

  bool operator==(const EpochRecord& o) const {
    auto same = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
    return stage == o.stage && epoch == o.epoch && same(train_loss, o.train_loss) && same(val_loss, o.val_loss);
  }
};

struct TrainingMeta {
  std::size_t stage1_done = 0;
  std::size_t stage2_done = 0;
  std::vector<EpochRecord> history;

  bool trained() const { return !history.empty(); }
  bool operator==(const TrainingMeta&) const = default;
};

template <class T>
struct ModelBundle {
  ModelSpec spec;
  BackboneParams<T> backbone;
  std::optional<ViTParams<T>> vit;
  std::optional<MvcnnHeadParams<T>> mvcnn;
  std::optional<ViewHeadParams<T>> view_head;
  AdamState<T> optimizer;
  TrainingMeta meta;

  ModelKind kind() const { return spec.kind; }
  std::size_t n_outputs() const { return spec.output_labels().size(); }

  NamedParameters<T> named_parameters() {
    NamedParameters<T> out = backbone.named_parameters();
    auto append = [&](NamedParameters<T> more) { out.insert(out.end(), more.begin(), more.end()); };
    if (vit) append(vit->named_parameters());
    if (mvcnn) append(mvcnn->named_parameters());
    if (view_head) append(view_head->named_parameters());
    return out;
  }

  // Deep copy; tensors of the copy share nothing with this bundle.
  ModelBundle clone() const {
    ModelBundle out;
    out.spec = spec;
    out.backbone.config = backbone.config;
    out.backbone.frozen = backbone.frozen;
    for (const auto& k : backbone.kernels) out.backbone.kernels.push_back(clone_parameter(k));
    for (const auto& b : backbone.biases) out.backbone.biases.push_back(clone_parameter(b));
    if (vit) {
      out.vit = *vit;
      for (auto& [name, t] : out.vit->named_parameters()) *t = clone_parameter(*t);
    }
    if (mvcnn) {
      out.mvcnn = *mvcnn;
      for (auto& [name, t] : out.mvcnn->named_parameters()) *t = clone_parameter(*t);
    }
    if (view_head) {
      out.view_head = *view_head;
      for (auto& [name, t] : out.view_head->named_parameters()) *t = clone_parameter(*t);
    }
    out.optimizer = optimizer;
    out.meta = meta;
    return out;
  }
};

template <class T>
ModelBundle<T> make_bundle(const ModelSpec& spec) {
  spec.validate();
  ModelBundle<T> b;
  b.spec = spec;
  b.spec.vit = spec.derived_vit();
  const std::uint64_t init = derive_seed(spec.seed, "init");
  b.backbone = init_backbone<T>(spec.backbone, init);
  switch (spec.kind) {
    case ModelKind::studyformer: b.vit = init_vit<T>(spec.derived_vit(), init); break;
    case ModelKind::mvcnn: b.mvcnn = init_mvcnn_head<T>(spec.derived_mvcnn(), init); break;
    case ModelKind::single_view:
      b.view_head = init_view_head<T>(spec.backbone.out_channels, b.n_outputs(), init);
      break;
  }
  return b;
}

// Replace the backbone weights with a copy of `source`'s (a pretrained CNN).
template <class T>
void copy_backbone(ModelBundle<T>& target, const BackboneParams<T>& source) {
  if (!(target.spec.backbone == source.config)) throw ConfigError("copy_backbone: backbone configs differ");
  for (std::size_t s = 0; s < source.kernels.size(); ++s) {
    target.backbone.kernels[s] = clone_parameter(source.kernels[s]);
    target.backbone.biases[s] = clone_parameter(source.biases[s]);
  }
  target.backbone.set_frozen(target.backbone.frozen);
}

// ---------------------------------------------------------------------------
// Study inputs
// ---------------------------------------------------------------------------

// A study preprocessed for the network. `augmented` holds the W^2 - n padding
// tiles and is undefined when the grid is already full.
template <class T>
struct StudyInput {
  std::string id;
  Tensor<T> views;      // [n x 3 x S x S]
  Tensor<T> augmented;  // [(W^2 - n) x 3 x S x S] or undefined
  std::size_t width = 2;
  std::vector<TileProvenance> provenance;
  LabelVector labels;
  LabelMatrix view_labels;

  std::size_t n_views() const { return views.dim(0); }
};

inline std::uint64_t augmentation_seed(std::uint64_t seed, const std::string& study_id) {
  return derive_seed(seed, "augment", fnv1a(study_id));
}

template <class T>
StudyInput<T> prepare_study_images(const std::string& id, const std::vector<Image>& images, std::size_t input_size,
                                   std::uint64_t seed, LabelVector labels = {}, LabelMatrix view_labels = {}) {
  const std::size_t width = choose_grid_width(images.size());
  const SynthesizedViews synth = synthesize_views(images, width * width, augmentation_seed(seed, id));
  std::vector<Tensor<T>> originals, extras;
  for (std::size_t k = 0; k < synth.images.size(); ++k) {
    (k < images.size() ? originals : extras).push_back(preprocess_image<T>(synth.images[k], input_size));
  }
  StudyInput<T> in;
  in.id = id;
  in.views = stack(originals);
  if (!extras.empty()) in.augmented = stack(extras);
  in.width = width;
  in.provenance = synth.provenance;
  in.labels = std::move(labels);
  in.view_labels = std::move(view_labels);
  return in;
}

template <class T>
StudyInput<T> prepare_study(const Manifest& manifest, const Study& study, std::size_t input_size, std::uint64_t seed) {
  if (study.n_views() > kMaxViews) {
    throw CapacityError("StudyFormer accepts at most 16 views, study '" + study.id + "' has " +
                        std::to_string(study.n_views()));
  }
  std::vector<Image> images;
  for (std::size_t k = 0; k < study.n_views(); ++k) images.push_back(read_pnm(manifest.view_path(study, k).string()));
  return prepare_study_images<T>(study.id, images, input_size, seed, study.labels, study.view_labels);
}

template <class T>
std::vector<StudyInput<T>> prepare_studies(const Manifest& manifest, std::size_t input_size, std::uint64_t seed) {
  std::vector<StudyInput<T>> out;
  out.reserve(manifest.studies.size());
  for (const auto& s : manifest.studies) out.push_back(prepare_study<T>(manifest, s, input_size, seed));
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <class T>
struct StudyFeatures {
  Tensor<T> views;      // [n x C x G x G]
  Tensor<T> augmented;  // [(W^2 - n) x C x G x G] or undefined
};

// Augmentation tiles are only extracted for StudyFormer.
template <class T>
StudyFeatures<T> compute_features(const ModelBundle<T>& bundle, const StudyInput<T>& input) {
  StudyFeatures<T> f;
  f.views = extract_features(bundle.backbone, input.views);
  if (bundle.kind() == ModelKind::studyformer && input.augmented.defined()) {
    f.augmented = extract_features(bundle.backbone, input.augmented);
  }
  return f;
}

template <class T>
struct StudyOutput {
  Tensor<T> probs;       // [L'] study-level probabilities over the bundle's output labels
  Tensor<T> view_probs;  // [n x L'] (single_view only)
  std::optional<AttentionRecord<T>> attention;
  std::optional<FeatureGrid<T>> grid;
};

template <class T>
StudyOutput<T> forward_features(const ModelBundle<T>& bundle, const StudyInput<T>& input,
                                const StudyFeatures<T>& features, bool record_attention = false) {
  StudyOutput<T> out;
  const std::size_t n = features.views.dim(0);
  switch (bundle.kind()) {
    case ModelKind::single_view:
      out.view_probs = view_head_forward(features.views, *bundle.view_head);
      out.probs = single_view_max_baseline(out.view_probs);
      break;
    case ModelKind::mvcnn: {
      std::vector<Tensor<T>> maps;
      for (std::size_t v = 0; v < n; ++v) maps.push_back(select(features.views, v));
      out.probs = mvcnn_forward(maps, *bundle.mvcnn);
      break;
    }
    case ModelKind::studyformer: {
      std::vector<Tensor<T>> maps;
      for (std::size_t v = 0; v < n; ++v) maps.push_back(select(features.views, v));
      if (features.augmented.defined()) {
        for (std::size_t k = 0; k < features.augmented.dim(0); ++k) maps.push_back(select(features.augmented, k));
      }
      FeatureGrid<T> grid = assemble_square(maps, input.width, input.provenance);
      Encoded<T> enc = encode(tokenize(grid, *bundle.vit), *bundle.vit, record_attention);
      out.probs = classify(enc.tokens, *bundle.vit);
      out.attention = std::move(enc.attention);
      if (record_attention) out.grid = std::move(grid);
      break;
    }
  }
  return out;
}

template <class T>
StudyOutput<T> forward_study(const ModelBundle<T>& bundle, const StudyInput<T>& input, bool record_attention = false) {
  return forward_features(bundle, input, compute_features(bundle, input), record_attention);
}

// Inference: probabilities over the bundle's output labels, no graph recorded.
template <class T>
std::vector<double> predict_study(const ModelBundle<T>& bundle, const StudyInput<T>& input) {
  NoGradGuard guard;
  const Tensor<T> probs = forward_study(bundle, input).probs;
  return std::vector<double>(probs.data().begin(), probs.data().end());
}

}  // namespace studyformer
