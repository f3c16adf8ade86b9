#pragma once

// ROC-AUC, ROC curves, the model-comparison report and attention-map export.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "studyformer/data.hpp"
#include "studyformer/errors.hpp"
#include "studyformer/image.hpp"
#include "studyformer/model.hpp"
#include "studyformer/vit.hpp"

namespace studyformer {

namespace detail {

inline void check_scores(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels,
                         std::size_t& positives, std::size_t& negatives) {
  if (scores.size() != labels.size()) throw DimensionError("roc: scores and labels differ in length");
  for (double v : scores) {
    if (!std::isfinite(v)) throw ContractError("roc: scores must be finite");
  }
  positives = 0;
  for (auto y : labels) {
    if (y > 1) throw ContractError("roc: labels must be 0 or 1");
    positives += y;
  }
  negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw UndefinedMetricError("ROC-AUC undefined: labels contain a single class");
  }
}

}  // namespace detail

// Mann-Whitney statistic with midranks for ties.
inline double roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  std::size_t pos = 0, neg = 0;
  detail::check_scores(scores, labels, pos, neg);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum += midrank;
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

// One point per distinct score threshold, from (0,0) to (1,1).
inline std::vector<RocPoint> roc_curve_points(const std::vector<double>& scores,
                                              const std::vector<std::uint8_t>& labels) {
  std::size_t pos = 0, neg = 0;
  detail::check_scores(scores, labels, pos, neg);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> pts{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? tp : fp) += 1;
      ++j;
    }
    pts.push_back({static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos)});
    i = j;
  }
  return pts;
}

inline double trapezoid_area(const std::vector<RocPoint>& pts) {
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    area += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) * 0.5;
  }
  return area;
}

// ---------------------------------------------------------------------------
// Model comparison
// ---------------------------------------------------------------------------

struct ModelScores {
  std::string model;
  std::vector<std::size_t> label_indices;   // dataset labels the model scores
  std::vector<std::vector<double>> scores;  // [study][k], k indexes label_indices
};

struct EvalReport {
  std::vector<std::string> label_names;
  std::vector<std::string> model_names;
  std::vector<std::vector<std::optional<double>>> auc;  // [label][model]; empty = undefined
  std::vector<std::vector<bool>> covered;               // [label][model]
  std::vector<std::vector<std::vector<RocPoint>>> curves;
  std::map<std::string, std::string> metadata;

  std::size_t model_index(const std::string& name) const {
    const auto it = std::find(model_names.begin(), model_names.end(), name);
    if (it == model_names.end()) throw ContractError("report has no model '" + name + "'");
    return static_cast<std::size_t>(it - model_names.begin());
  }

  // Mean over the listed labels with a defined AUC; empty if none.
  std::optional<double> macro_auc(const std::string& model, const std::vector<std::size_t>& labels) const {
    const std::size_t m = model_index(model);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t l : labels) {
      if (covered.at(l)[m] && auc[l][m]) {
        total += *auc[l][m];
        ++count;
      }
    }
    if (count == 0) return std::nullopt;
    return total / static_cast<double>(count);
  }
};

inline EvalReport evaluate_scores(const std::vector<std::string>& label_names,
                                  const std::vector<LabelVector>& study_labels,
                                  const std::vector<ModelScores>& models) {
  EvalReport r;
  r.label_names = label_names;
  const std::size_t n_labels = label_names.size();
  for (const auto& m : models) r.model_names.push_back(m.model);
  r.auc.assign(n_labels, std::vector<std::optional<double>>(models.size()));
  r.covered.assign(n_labels, std::vector<bool>(models.size(), false));
  r.curves.assign(n_labels, std::vector<std::vector<RocPoint>>(models.size()));
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    const auto& m = models[mi];
    if (m.scores.size() != study_labels.size()) {
      throw DimensionError("evaluate: model '" + m.model + "' scored " + std::to_string(m.scores.size()) +
                           " studies, dataset has " + std::to_string(study_labels.size()));
    }
    for (std::size_t k = 0; k < m.label_indices.size(); ++k) {
      const std::size_t l = m.label_indices[k];
      if (l >= n_labels) throw ConfigError("evaluate: model '" + m.model + "' scores a label outside the vocabulary");
      r.covered[l][mi] = true;
      std::vector<double> s;
      std::vector<std::uint8_t> y;
      for (std::size_t i = 0; i < study_labels.size(); ++i) {
        s.push_back(m.scores[i].at(k));
        y.push_back(study_labels[i].at(l));
      }
      try {
        r.auc[l][mi] = roc_auc(s, y);
        r.curves[l][mi] = roc_curve_points(s, y);
      } catch (const UndefinedMetricError&) {
        r.auc[l][mi] = std::nullopt;
      }
    }
  }
  return r;
}

template <class T>
ModelScores score_model(const std::string& name, const ModelBundle<T>& bundle,
                        const std::vector<StudyInput<T>>& inputs) {
  ModelScores s;
  s.model = name;
  s.label_indices = bundle.spec.output_labels();
  for (const auto& in : inputs) s.scores.push_back(predict_study(bundle, in));
  return s;
}

template <class T>
struct NamedModel {
  std::string name;
  const ModelBundle<T>* bundle = nullptr;
};

template <class T>
std::pair<EvalReport, std::vector<ModelScores>> evaluate_models(const std::vector<NamedModel<T>>& models,
                                                                const std::vector<StudyInput<T>>& dataset,
                                                                const std::vector<std::string>& label_names) {
  if (dataset.empty()) throw ContractError("evaluate_models: empty dataset");
  for (const auto& m : models) {
    if (m.bundle->spec.label_names.size() != label_names.size()) {
      throw ConfigError("evaluate_models: model '" + m.name + "' was built for " +
                        std::to_string(m.bundle->spec.label_names.size()) + " labels, dataset has " +
                        std::to_string(label_names.size()));
    }
  }
  std::vector<LabelVector> labels;
  for (const auto& in : dataset) {
    if (in.labels.size() != label_names.size()) throw ConfigError("evaluate_models: study '" + in.id + "' label count");
    labels.push_back(in.labels);
  }
  std::vector<ModelScores> scores;
  for (const auto& m : models) scores.push_back(score_model(m.name, *m.bundle, dataset));
  EvalReport report = evaluate_scores(label_names, labels, scores);
  report.metadata["studies"] = std::to_string(dataset.size());
  return {std::move(report), std::move(scores)};
}

namespace detail {

inline std::string format_auc(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// UTF-8 continuation bytes take no columns.
inline std::size_t display_width(const std::string& s) {
  std::size_t shown = 0;
  for (unsigned char c : s) shown += (c & 0xC0) != 0x80;
  return shown;
}

inline std::string pad_right(const std::string& s, std::size_t width) {
  const std::size_t shown = display_width(s);
  return s + std::string(width > shown ? width - shown : 0, ' ');
}

inline std::string file_safe(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return out;
}

}  // namespace detail

// Aligned table: "*" marks the best model per label, "—" an undefined AUC,
// "/" a label the model does not score.
inline std::string render_table(const EvalReport& r) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"label"};
  header.insert(header.end(), r.model_names.begin(), r.model_names.end());
  rows.push_back(header);
  for (std::size_t l = 0; l < r.label_names.size(); ++l) {
    double best = -1.0;
    for (std::size_t m = 0; m < r.model_names.size(); ++m)
      if (r.covered[l][m] && r.auc[l][m]) best = std::max(best, *r.auc[l][m]);
    std::vector<std::string> row{r.label_names[l]};
    for (std::size_t m = 0; m < r.model_names.size(); ++m) {
      if (!r.covered[l][m]) {
        row.push_back("/");
      } else if (!r.auc[l][m]) {
        row.push_back("—");
      } else {
        const std::string v = detail::format_auc(*r.auc[l][m]);
        row.push_back(v + (detail::format_auc(best) == v ? "*" : " "));
      }
    }
    rows.push_back(row);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], detail::display_width(row[c]));
  std::ostringstream os;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      os << (c ? "  " : "") << detail::pad_right(rows[i][c], width[c]);
    }
    os << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (std::size_t w : width) total += w + 2;
      os << std::string(total - 2, '-') << '\n';
    }
  }
  os << "(* best per label, — undefined AUC, / label not scored by the model)\n";
  return os.str();
}

// label <TAB> model <TAB> auc ("NA" when undefined); unscored labels omitted.
inline std::string render_tsv(const EvalReport& r) {
  std::ostringstream os;
  for (std::size_t l = 0; l < r.label_names.size(); ++l)
    for (std::size_t m = 0; m < r.model_names.size(); ++m) {
      if (!r.covered[l][m]) continue;
      os << r.label_names[l] << '\t' << r.model_names[m] << '\t';
      if (r.auc[l][m]) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", *r.auc[l][m]);
        os << buf;
      } else {
        os << "NA";
      }
      os << '\n';
    }
  return os.str();
}

// report.txt, report.tsv, scores/<model>.tsv and roc/<label>__<model>.tsv.
inline void write_report(const std::filesystem::path& dir, const EvalReport& r, const std::vector<ModelScores>& scores,
                         const std::vector<std::string>& study_ids) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "scores");
  fs::create_directories(dir / "roc");
  auto open = [](const fs::path& p) {
    std::ofstream out(p);
    if (!out) throw InputError("cannot open " + p.string() + " for writing");
    return out;
  };
  open(dir / "report.txt") << render_table(r);
  open(dir / "report.tsv") << render_tsv(r);
  for (const auto& s : scores) {
    auto out = open(dir / "scores" / (detail::file_safe(s.model) + ".tsv"));
    out << "study_id";
    for (std::size_t l : s.label_indices) out << '\t' << r.label_names.at(l);
    out << '\n';
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
      out << (i < study_ids.size() ? study_ids[i] : std::to_string(i));
      for (double v : s.scores[i]) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << '\t' << buf;
      }
      out << '\n';
    }
  }
  for (std::size_t l = 0; l < r.label_names.size(); ++l)
    for (std::size_t m = 0; m < r.model_names.size(); ++m) {
      if (!r.auc[l][m]) continue;
      auto out = open(dir / "roc" / (detail::file_safe(r.label_names[l]) + "__" + detail::file_safe(r.model_names[m]) + ".tsv"));
      out << "fpr\ttpr\n";
      for (const auto& p : r.curves[l][m]) {
        char buf[80];
        std::snprintf(buf, sizeof buf, "%.17g\t%.17g", p.fpr, p.tpr);
        out << buf << '\n';
      }
    }
}

// ---------------------------------------------------------------------------
// Attention maps
// ---------------------------------------------------------------------------

template <class T>
struct AttentionResult {
  Rollout<T> rollout;
  std::size_t width = 0;  // W
  std::size_t tile = 0;   // G
  std::vector<TileProvenance> provenance;
  std::vector<double> probs;
};

template <class T>
AttentionResult<T> compute_attention(const ModelBundle<T>& bundle, const StudyInput<T>& input) {
  if (bundle.kind() != ModelKind::studyformer || !bundle.vit) {
    throw ContractError("attention maps need a StudyFormer model, got " + model_kind_name(bundle.kind()));
  }
  if (!bundle.meta.trained()) throw ContractError("attention maps need a trained model; this bundle has no epochs");
  NoGradGuard guard;
  StudyOutput<T> out = forward_study(bundle, input, true);
  AttentionResult<T> r;
  r.rollout = attention_rollout(*out.attention);
  r.width = input.width;
  r.tile = bundle.spec.backbone.out_grid;
  r.provenance = input.provenance;
  r.probs.assign(out.probs.data().begin(), out.probs.data().end());
  return r;
}

// Mean heatmap value over each G x G tile, row-major.
template <class T>
std::vector<double> tile_attention_means(const Tensor<T>& heatmap, std::size_t width, std::size_t tile) {
  const std::size_t side = width * tile;
  if (heatmap.rank() != 2 || heatmap.dim(0) != side || heatmap.dim(1) != side) {
    throw DimensionError("tile_attention_means: heatmap " + shape_string(heatmap.shape()) + " is not " +
                         std::to_string(side) + "x" + std::to_string(side));
  }
  std::vector<double> means(width * width, 0.0);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) means[(y / tile) * width + x / tile] += static_cast<double>(heatmap[y * side + x]);
  for (auto& m : means) m /= static_cast<double>(tile * tile);
  return means;
}

struct AttentionFiles {
  std::filesystem::path heatmap;  // P5, (W*G) x (W*G)
  std::filesystem::path overlay;  // P6, (W*S) x (W*S)
  std::filesystem::path sidecar;  // tile provenance text
};

namespace detail {

// Grayscale [0,1] image of a preprocessed [3 x S x S] tile (channel 0).
template <class T>
Image denormalize_tile(const Tensor<T>& tile) {
  const std::size_t s = tile.dim(1);
  Image img(s, s, 1);
  for (std::size_t i = 0; i < s * s; ++i) {
    img.pixels[i] = std::clamp(static_cast<float>(static_cast<double>(tile[i]) * kImageNetStd[0] + kImageNetMean[0]), 0.0f, 1.0f);
  }
  return img;
}

}  // namespace detail

// Writes <prefix>_heatmap.pgm, <prefix>_overlay.ppm and <prefix>_tiles.txt.
template <class T>
AttentionFiles export_attention_map(const ModelBundle<T>& bundle, const StudyInput<T>& input,
                                    const std::filesystem::path& prefix) {
  const AttentionResult<T> att = compute_attention(bundle, input);
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  AttentionFiles files{prefix.string() + "_heatmap.pgm", prefix.string() + "_overlay.ppm", prefix.string() + "_tiles.txt"};

  const std::size_t w = att.width, g = att.tile, side = w * g;
  Image heat(side, side, 1);
  for (std::size_t i = 0; i < side * side; ++i) heat.pixels[i] = static_cast<float>(att.rollout.heatmap[i]);
  write_pnm(files.heatmap.string(), heat);

  const std::size_t s = input.views.dim(2);
  Image overlay(w * s, w * s, 3);
  const std::size_t n = input.n_views();
  for (std::size_t k = 0; k < w * w; ++k) {
    const Tensor<T> tile = k < n ? select(input.views, k) : select(input.augmented, k - n);
    const Image gray = detail::denormalize_tile(tile);
    Image local(g, g, 1);
    for (std::size_t y = 0; y < g; ++y)
      for (std::size_t x = 0; x < g; ++x) local.at(y, x, 0) = heat.at((k / w) * g + y, (k % w) * g + x, 0);
    const Image up = resize_bilinear(local, s, s);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const float v = gray.at(y, x, 0), a = 0.6f * up.at(y, x, 0);
        const std::size_t oy = (k / w) * s + y, ox = (k % w) * s + x;
        overlay.at(oy, ox, 0) = v * (1.0f - a) + a;
        overlay.at(oy, ox, 1) = v * (1.0f - a);
        overlay.at(oy, ox, 2) = v * (1.0f - a);
      }
  }
  write_pnm(files.overlay.string(), overlay);

  std::ofstream side_out(files.sidecar);
  if (!side_out) throw InputError("cannot open " + files.sidecar.string() + " for writing");
  side_out << "study\t" << input.id << "\nwidth\t" << w << "\ntile\t" << g << "\ndegenerate\t"
           << (att.rollout.degenerate ? "yes" : "no") << '\n';
  const auto means = tile_attention_means(att.rollout.heatmap, w, g);
  for (std::size_t k = 0; k < att.provenance.size(); ++k) {
    const auto& p = att.provenance[k];
    side_out << "tile " << k << " (row " << k / w << ", col " << k % w << ")\t";
    if (p.original()) {
      side_out << "original view " << p.source_view + 1;
    } else {
      side_out << "augmented from view " << p.source_view + 1 << " [" << p.augmentation->describe() << "]";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", means[k]);
    side_out << "\tmean attention " << buf << '\n';
  }
  const auto labels = bundle.spec.output_labels();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    side_out << "p(" << bundle.spec.label_names[labels[i]] << ")\t" << att.probs[i] << '\n';
  }
  return files;
}

}  // namespace studyformer
