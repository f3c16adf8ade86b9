#pragma once

// End-to-end pieces shared by the command-line tool and the benchmark runner:
// dataset splits, model specs from a RunConfig, backbone pretraining and the
// attention relevance measurement.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <functional>
#include <string>
#include <vector>

#include "studyformer/checkpoint.hpp"
#include "studyformer/data.hpp"
#include "studyformer/eval.hpp"
#include "studyformer/model.hpp"
#include "studyformer/run_config.hpp"
#include "studyformer/synthetic.hpp"
#include "studyformer/train.hpp"

namespace studyformer {

inline constexpr const char* kToolVersion = "studyformer 1.0.0";

using LogFn = std::function<void(const std::string&)>;

template <class T>
struct PreparedSplit {
  ManifestSplit manifests;
  std::vector<StudyInput<T>> train, val, test;
};

template <class T>
PreparedSplit<T> prepare_split(const Manifest& manifest, const RunConfig& cfg, std::size_t size) {
  PreparedSplit<T> out;
  out.manifests = split_by_study(manifest, cfg.split_cutoff(), cfg.val_fraction(), cfg.get_u64("seed"));
  const std::uint64_t seed = cfg.get_u64("seed");
  out.train = prepare_studies<T>(out.manifests.train, size, seed);
  if (!out.manifests.val.studies.empty()) out.val = prepare_studies<T>(out.manifests.val, size, seed);
  if (!out.manifests.test.studies.empty()) out.test = prepare_studies<T>(out.manifests.test, size, seed);
  return out;
}

inline ModelSpec model_spec(const RunConfig& cfg, ModelKind kind, const std::vector<std::string>& label_names,
                            bool use_subset = true) {
  ModelSpec spec;
  spec.kind = kind;
  spec.seed = derive_seed(cfg.get_u64("seed"), "model", static_cast<std::uint64_t>(kind));
  spec.label_names = label_names;
  if (use_subset) spec.label_subset = cfg.label_subset(label_names);
  spec.backbone = cfg.backbone_config();
  spec.vit = cfg.vit_config();
  spec.mvcnn_hidden = cfg.get_size("model.mvcnn_hidden");
  spec.name = model_kind_name(kind);
  if (!spec.label_subset.empty()) spec.name += "-" + std::to_string(spec.label_subset.size()) + "labels";
  spec.validate();
  return spec;
}

inline std::string describe_epoch(const std::string& model, const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s stage %d epoch %zu train_loss %.6f val_loss %.6f", model.c_str(), r.stage,
                r.epoch + 1, r.train_loss, r.val_loss);
  return buf;
}

// A per-view CNN trained end to end on per-view labels over the full
// vocabulary. Its backbone initialises every model of a benchmark run.
template <class T>
ModelBundle<T> pretrain_backbone(const RunConfig& cfg, const std::vector<std::string>& label_names,
                                 const std::vector<StudyInput<T>>& train, const std::vector<StudyInput<T>>& val,
                                 const LogFn& log = {}) {
  ModelSpec spec = model_spec(cfg, ModelKind::single_view, label_names, false);
  spec.name = "pretrain";
  spec.seed = derive_seed(cfg.get_u64("seed"), "pretrain");
  ModelBundle<T> b = make_bundle<T>(spec);
  TrainConfig tc = cfg.pretrain_config();
  tc.seed = derive_seed(cfg.get_u64("seed"), "pretrain-shuffle");
  train_staged(b, train, val, tc, [&](const EpochRecord& r) {
    if (log) log(describe_epoch("pretrain", r));
  });
  return b;
}

// Builds a model of `kind` on top of `backbone` and runs both stages.
template <class T>
ModelBundle<T> train_model(const RunConfig& cfg, ModelKind kind, const std::vector<std::string>& label_names,
                           const BackboneParams<T>* backbone, const std::vector<StudyInput<T>>& train,
                           const std::vector<StudyInput<T>>& val, const LogFn& log = {}) {
  ModelBundle<T> b = make_bundle<T>(model_spec(cfg, kind, label_names));
  if (backbone) copy_backbone(b, *backbone);
  TrainConfig tc = cfg.train_config();
  const std::string name = b.spec.name;
  train_staged(b, train, val, tc, [&](const EpochRecord& r) {
    if (log) log(describe_epoch(name, r));
  });
  return b;
}

// ---------------------------------------------------------------------------
// Attention relevance on synthetic studies
// ---------------------------------------------------------------------------

struct AttentionRelevance {
  std::size_t studies = 0;          // studies with both kinds of tile
  double relevant_mean = 0.0;       // mean tile attention over shape-bearing tiles
  double irrelevant_mean = 0.0;     // ... over tiles whose source view is blank
  std::size_t studies_favouring = 0;  // studies where relevant > irrelevant
};

// Tiles inherit the shapes of their source view. A study counts when it is
// positive for some label and has tiles both with and without shapes.
template <class T>
AttentionRelevance attention_relevance(const ModelBundle<T>& bundle, const std::vector<StudyInput<T>>& inputs,
                                       const std::vector<std::vector<std::vector<ShapePlacement>>>& placements) {
  if (inputs.size() != placements.size()) throw DimensionError("attention_relevance: placements do not match studies");
  AttentionRelevance out;
  double rel_total = 0.0, irr_total = 0.0;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    const auto& in = inputs[s];
    if (std::none_of(in.labels.begin(), in.labels.end(), [](std::uint8_t v) { return v != 0; })) continue;
    const auto att = compute_attention(bundle, in);
    const auto means = tile_attention_means(att.rollout.heatmap, att.width, att.tile);
    double rel = 0.0, irr = 0.0;
    std::size_t n_rel = 0, n_irr = 0;
    for (std::size_t k = 0; k < means.size(); ++k) {
      const auto& view = placements[s].at(att.provenance[k].source_view);
      if (view.empty()) {
        irr += means[k];
        ++n_irr;
      } else {
        rel += means[k];
        ++n_rel;
      }
    }
    if (n_rel == 0 || n_irr == 0) continue;
    rel /= static_cast<double>(n_rel);
    irr /= static_cast<double>(n_irr);
    rel_total += rel;
    irr_total += irr;
    if (rel > irr) ++out.studies_favouring;
    ++out.studies;
  }
  if (out.studies > 0) {
    out.relevant_mean = rel_total / static_cast<double>(out.studies);
    out.irrelevant_mean = irr_total / static_cast<double>(out.studies);
  }
  return out;
}

// Reads the shapes.tsv sidecar written next to a synthetic manifest.
inline std::map<std::string, std::vector<std::vector<ShapePlacement>>> read_shape_sidecar(
    const std::filesystem::path& path, const Manifest& manifest) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::map<std::string, std::vector<std::vector<ShapePlacement>>> out;
  for (const auto& s : manifest.studies) out[s.id].resize(s.n_views());
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto f = detail::split(line, '\t');
    if (f.size() != 6) throw FormatError(path.string() + ": expected 6 fields per line");
    const auto it = out.find(f[0]);
    if (it == out.end()) continue;
    ShapePlacement p;
    p.kind = parse_shape(f[2]);
    p.cx = std::stoi(f[3]);
    p.cy = std::stoi(f[4]);
    p.radius = std::stoi(f[5]);
    it->second.at(std::stoul(f[1])).push_back(p);
  }
  return out;
}

}  // namespace studyformer
