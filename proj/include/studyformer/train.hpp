#pragma once

// Two-stage training. Stage 1 freezes the backbone and trains only the head
// (ViT, MVCNN head or per-view head) on cached features; stage 2 trains the
// whole network. Progress is tracked in the bundle so a run can stop after any
// epoch, be checkpointed, and resume to the identical trajectory.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "studyformer/errors.hpp"
#include "studyformer/losses.hpp"
#include "studyformer/model.hpp"
#include "studyformer/optim.hpp"
#include "studyformer/rng.hpp"
#include "studyformer/tensor.hpp"

namespace studyformer {

struct TrainConfig {
  std::size_t stage1_epochs = 10;
  std::size_t stage2_epochs = 4;
  std::size_t batch_size = 8;  // studies
  double lr_stage1 = 1e-3;
  double lr_stage2 = 3e-4;
  LossKind loss = LossKind::bce;
  double focal_alpha = 1.0;
  double focal_gamma = 2.0;
  std::uint64_t seed = 0;
  // When set, must equal the bundle's label subset.
  std::optional<std::vector<std::size_t>> label_subset;
  // Stop this call after this many epochs (resume later from the bundle).
  std::optional<std::size_t> max_epochs_this_call;

  void validate() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (!(lr_stage1 > 0.0) || !(lr_stage2 > 0.0)) throw ConfigError("train: learning rates must be positive");
    if (!(focal_gamma >= 0.0)) throw ConfigError("train: focal_gamma must be >= 0");
    if (!(focal_alpha > 0.0 && focal_alpha <= 1.0)) throw ConfigError("train: focal_alpha must lie in (0, 1]");
  }
};

using EpochCallback = std::function<void(const EpochRecord&)>;

namespace detail {

// Targets for the bundle's output labels: one row per study, or one row per
// view for the per-view model.
template <class T>
std::vector<T> study_targets(const StudyInput<T>& in, const std::vector<std::size_t>& labels, bool per_view) {
  std::vector<T> out;
  if (per_view) {
    if (in.view_labels.size() != in.n_views()) throw ContractError("train: study '" + in.id + "' lacks view labels");
    for (const auto& row : in.view_labels)
      for (std::size_t i : labels) out.push_back(static_cast<T>(row.at(i)));
  } else {
    if (in.labels.empty()) throw ContractError("train: study '" + in.id + "' has no labels");
    for (std::size_t i : labels) out.push_back(static_cast<T>(in.labels.at(i)));
  }
  return out;
}

template <class T>
Tensor<T> batch_loss(const ModelBundle<T>& bundle, const std::vector<const StudyInput<T>*>& batch,
                     const std::vector<const StudyFeatures<T>*>& cached, const TrainConfig& cfg) {
  const auto labels = bundle.spec.output_labels();
  const bool per_view = bundle.kind() == ModelKind::single_view;
  std::vector<Tensor<T>> rows;
  std::vector<T> targets;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const StudyOutput<T> out = cached[i] ? forward_features(bundle, *batch[i], *cached[i])
                                         : forward_study(bundle, *batch[i]);
    rows.push_back(per_view ? out.view_probs : reshape(out.probs, Shape{1, out.probs.size()}));
    const auto t = study_targets(*batch[i], labels, per_view);
    targets.insert(targets.end(), t.begin(), t.end());
  }
  const Tensor<T> probs = rows.size() == 1 ? rows.front() : concat_rows(rows);
  const Tensor<T> target(probs.shape(), std::move(targets));
  return multilabel_loss(cfg.loss, probs, target, static_cast<T>(cfg.focal_alpha), static_cast<T>(cfg.focal_gamma));
}

template <class T>
std::vector<StudyFeatures<T>> cache_features(const ModelBundle<T>& bundle, const std::vector<StudyInput<T>>& inputs) {
  NoGradGuard guard;
  std::vector<StudyFeatures<T>> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) out.push_back(compute_features(bundle, in));
  return out;
}

// Mean loss over a set, weighted by batch size, no graph recorded.
template <class T>
double dataset_loss(const ModelBundle<T>& bundle, const std::vector<StudyInput<T>>& inputs,
                    const std::vector<StudyFeatures<T>>* cached, const TrainConfig& cfg) {
  if (inputs.empty()) return std::numeric_limits<double>::quiet_NaN();
  NoGradGuard guard;
  double total = 0.0;
  for (std::size_t start = 0; start < inputs.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(inputs.size(), start + cfg.batch_size);
    std::vector<const StudyInput<T>*> batch;
    std::vector<const StudyFeatures<T>*> feats;
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(&inputs[i]);
      feats.push_back(cached ? &(*cached)[i] : nullptr);
    }
    total += static_cast<double>(batch_loss(bundle, batch, feats, cfg).item()) * static_cast<double>(end - start);
  }
  return total / static_cast<double>(inputs.size());
}

}  // namespace detail

// Runs the remaining epochs of both stages. Returns the records appended by
// this call; the full history lives in bundle.meta.
template <class T>
std::vector<EpochRecord> train_staged(ModelBundle<T>& bundle, const std::vector<StudyInput<T>>& train,
                                      const std::vector<StudyInput<T>>& val, const TrainConfig& cfg,
                                      const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train.empty()) throw ContractError("train_staged: the training set is empty");
  if (cfg.label_subset && *cfg.label_subset != bundle.spec.label_subset) {
    throw ConfigError("train: label_subset does not match the model's label subset");
  }
  const std::size_t n_labels = bundle.spec.label_names.size();
  for (const auto* set : {&train, &val}) {
    for (const auto& in : *set) {
      if (in.labels.size() != n_labels) {
        throw ConfigError("train: study '" + in.id + "' has " + std::to_string(in.labels.size()) +
                          " labels, model vocabulary has " + std::to_string(n_labels));
      }
    }
  }

  std::vector<EpochRecord> appended;
  std::size_t budget = cfg.max_epochs_this_call.value_or(std::numeric_limits<std::size_t>::max());
  auto params = bundle.named_parameters();

  for (int stage = 1; stage <= 2; ++stage) {
    std::size_t& done = stage == 1 ? bundle.meta.stage1_done : bundle.meta.stage2_done;
    const std::size_t target = stage == 1 ? cfg.stage1_epochs : cfg.stage2_epochs;
    if (done >= target) continue;
    if (budget == 0) break;
    bundle.backbone.set_frozen(stage == 1);
    const double lr = stage == 1 ? cfg.lr_stage1 : cfg.lr_stage2;

    std::vector<StudyFeatures<T>> train_cache, val_cache;
    if (stage == 1) {
      train_cache = detail::cache_features(bundle, train);
      val_cache = detail::cache_features(bundle, val);
    }

    for (; done < target && budget > 0; ++done, --budget) {
      std::vector<std::size_t> order(train.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(stage) * 1000003u + done));
      std::shuffle(order.begin(), order.end(), rng.engine());

      double total = 0.0;
      std::size_t batch_index = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        std::vector<const StudyInput<T>*> batch;
        std::vector<const StudyFeatures<T>*> feats;
        for (std::size_t i = start; i < end; ++i) {
          batch.push_back(&train[order[i]]);
          feats.push_back(stage == 1 ? &train_cache[order[i]] : nullptr);
        }
        const Tensor<T> loss = detail::batch_loss(bundle, batch, feats, cfg);
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value)) {
          throw TrainingError("non-finite loss in stage " + std::to_string(stage) + ", epoch " +
                              std::to_string(done + 1) + ", batch " + std::to_string(batch_index + 1));
        }
        backward(loss);
        adam_step(bundle.optimizer, params, lr);
        total += value * static_cast<double>(end - start);
      }

      EpochRecord rec;
      rec.stage = stage;
      rec.epoch = done;
      rec.train_loss = total / static_cast<double>(train.size());
      rec.val_loss = detail::dataset_loss(bundle, val, stage == 1 ? &val_cache : nullptr, cfg);
      bundle.meta.history.push_back(rec);
      appended.push_back(rec);
      if (on_epoch) on_epoch(rec);
    }
  }
  bundle.backbone.set_frozen(false);
  return appended;
}

}  // namespace studyformer
