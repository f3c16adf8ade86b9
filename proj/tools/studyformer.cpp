// studyformer command-line tool: synth-data, train, eval, predict, attn-map.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 invalid config.
// Failures print exactly one line on stderr: "error: <kind>: <message>".

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "studyformer/pipeline.hpp"

namespace fs = std::filesystem;
using namespace studyformer;

namespace {

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage", what) {}
};

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
  std::string labels;
  bool desk = false;
  bool paper = false;
};

struct Options {
  CommonFlags common;
  std::string data;
  std::vector<std::string> checkpoints;
  std::string model;
  std::string backbone_from;
  std::string split = "test";
  std::vector<std::string> studies;
  std::size_t limit = 8;
  std::optional<std::size_t> max_epochs;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "key=value config file ('#' comments)");
  cmd->add_option("--seed", f.seed, "master seed for every random stream");
  cmd->add_option("--out", f.out, "output directory (nothing is written elsewhere)");
  cmd->add_option("--set", f.sets, "override one config key, KEY=VALUE (repeatable)");
  cmd->add_option("--labels", f.labels, "comma-separated label subset");
  auto* desk = cmd->add_flag("--desk", f.desk, "desk-scale preset (default)");
  cmd->add_flag("--paper", f.paper, "paper-scale preset")->excludes(desk);
}

// defaults < --config < presets < --set < dedicated flags
RunConfig build_config(const CommonFlags& f) {
  RunConfig cfg;
  if (!f.config.empty()) cfg.merge_file(f.config);
  if (f.desk) cfg.set("scale", "desk");
  if (f.paper) cfg.set("scale", "paper");
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) cfg.set("seed", std::to_string(*f.seed));
  if (!f.labels.empty()) cfg.set("model.labels", f.labels);
  cfg.paper_scale();  // validates the scale key early
  return cfg;
}

fs::path require_out(const CommonFlags& f) {
  if (f.out.empty()) throw UsageError("--out DIR is required");
  fs::create_directories(f.out);
  return f.out;
}

std::string require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw UsageError(flag + " is required");
  return value;
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return fnv1a(os.str());
}

// run.log: everything needed to replay the run. The effective config is also
// written as effective.cfg so it can be passed straight back to --config.
class RunLog {
 public:
  RunLog(const fs::path& out, const std::string& command, const RunConfig& cfg) : path_(out / "run.log") {
    std::ofstream(out / "effective.cfg") << cfg.effective_text();
    std::ofstream log(path_);
    if (!log) throw InputError("cannot open " + path_.string() + " for writing");
    log << "tool\t" << kToolVersion << "\ncommand\t" << command << "\ncheckpoint_format\t" << kCheckpointVersion
        << "\nseed\t" << cfg.get("seed") << "\nreplay_config\teffective.cfg\n";
    for (const auto& line : detail::split(cfg.effective_text(), '\n')) {
      if (!line.empty()) log << "config\t" << line << '\n';
    }
  }

  void input(const std::string& name, const fs::path& p) {
    append("input\t" + name + "\t" + p.string() + "\tfnv1a=" + hex64(file_hash(p)));
  }

  void append(const std::string& line) {
    std::ofstream log(path_, std::ios::app);
    log << line << '\n';
  }

  // Progress also goes to stderr.
  void event(const std::string& line) {
    append("event\t" + line);
    std::cerr << line << '\n';
  }

 private:
  fs::path path_;
};

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int run_synth(const Options& o) {
  const RunConfig cfg = build_config(o.common);
  const fs::path out = require_out(o.common);
  const SyntheticSpec spec = cfg.synthetic_spec();
  RunLog log(out, "synth-data", cfg);
  const SyntheticDataset ds = generate_synthetic_dataset(spec, out);
  std::size_t views = 0;
  for (const auto& s : ds.manifest.studies) views += s.n_views();
  log.event("wrote " + std::to_string(ds.manifest.studies.size()) + " studies, " + std::to_string(views) +
            " views to manifest.tsv");
  return 0;
}

void write_history(const fs::path& path, const std::vector<std::pair<std::string, const TrainingMeta*>>& metas) {
  std::ofstream out(path);
  out << "model\tstage\tepoch\ttrain_loss\tval_loss\n";
  for (const auto& [name, meta] : metas)
    for (const auto& r : meta->history) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%d\t%zu\t%.9g\t%.9g", r.stage, r.epoch + 1, r.train_loss, r.val_loss);
      out << name << '\t' << buf << '\n';
    }
}

int run_train(const Options& o) {
  const RunConfig cfg = build_config(o.common);
  const std::string data = require(o.data, "--data");
  const fs::path out = require_out(o.common);
  RunLog log(out, "train", cfg);
  log.input("data", data);

  const Manifest manifest = load_manifest(data);
  const auto events = [&](const std::string& s) { log.event(s); };
  std::vector<ModelBundle<float>> bundles;
  std::optional<ModelBundle<float>> pretrained;
  TrainConfig tc = cfg.train_config();
  tc.max_epochs_this_call = o.max_epochs;

  if (!o.checkpoints.empty()) {
    if (o.checkpoints.size() != 1) throw UsageError("train resumes exactly one --checkpoint");
    log.input("resume", o.checkpoints.front());
    bundles.push_back(load_checkpoint<float>(o.checkpoints.front()));
    if (bundles.back().spec.label_names != manifest.label_names) {
      throw ConfigError("checkpoint label vocabulary does not match the manifest");
    }
  } else {
    std::vector<ModelKind> kinds;
    const std::string model = o.model.empty() ? cfg.get("model.kind") : o.model;
    if (model == "all") {
      kinds = {ModelKind::single_view, ModelKind::mvcnn, ModelKind::studyformer};
    } else {
      kinds = {parse_model_kind(model)};
    }
    for (auto k : kinds) bundles.push_back(make_bundle<float>(model_spec(cfg, k, manifest.label_names)));
  }

  const std::size_t size = bundles.front().spec.backbone.input_size;
  PreparedSplit<float> split = prepare_split<float>(manifest, cfg, size);
  for (const auto& w : split.manifests.warnings) log.event("warning: " + w);
  log.event("split: " + std::to_string(split.train.size()) + " train, " + std::to_string(split.val.size()) +
            " val, " + std::to_string(split.test.size()) + " test studies");

  if (o.checkpoints.empty()) {
    if (!o.backbone_from.empty()) {
      log.input("backbone", o.backbone_from);
      pretrained = load_checkpoint<float>(o.backbone_from);
    } else if (cfg.get_size("train.pretrain_epochs") > 0) {
      pretrained = pretrain_backbone<float>(cfg, manifest.label_names, split.train, split.val, events);
      save_checkpoint(*pretrained, out / "backbone.ckpt");
      log.event("saved backbone.ckpt");
    }
    if (pretrained) {
      for (auto& b : bundles) copy_backbone(b, pretrained->backbone);
    }
  }

  for (auto& b : bundles) {
    const fs::path ckpt = out / (b.spec.name + ".ckpt");
    train_staged(b, split.train, split.val, tc, [&](const EpochRecord& r) {
      log.event(describe_epoch(b.spec.name, r));
      save_checkpoint(b, ckpt);
    });
    save_checkpoint(b, ckpt);
    log.event("saved " + ckpt.filename().string());
  }
  std::vector<std::pair<std::string, const TrainingMeta*>> metas;
  if (pretrained && !pretrained->meta.history.empty()) metas.emplace_back("pretrain", &pretrained->meta);
  for (const auto& b : bundles) metas.emplace_back(b.spec.name, &b.meta);
  write_history(out / "history.tsv", metas);
  return 0;
}

// Loads every --checkpoint and the studies of the requested split.
struct EvalInputs {
  Manifest manifest;
  std::vector<ModelBundle<float>> bundles;
  std::vector<StudyInput<float>> studies;
};

EvalInputs load_eval_inputs(const Options& o, const RunConfig& cfg, RunLog& log) {
  EvalInputs in;
  const std::string data = require(o.data, "--data");
  if (o.checkpoints.empty()) throw UsageError("--checkpoint is required");
  log.input("data", data);
  in.manifest = load_manifest(data);
  for (const auto& c : o.checkpoints) {
    log.input("checkpoint", c);
    in.bundles.push_back(load_checkpoint<float>(c));
    if (in.bundles.back().spec.label_names != in.manifest.label_names) {
      throw ConfigError("checkpoint " + c + " was trained on a different label vocabulary than " + data);
    }
  }
  const std::size_t size = in.bundles.front().spec.backbone.input_size;
  for (const auto& b : in.bundles) {
    if (b.spec.backbone.input_size != size) throw ConfigError("checkpoints use different input sizes");
  }
  Manifest chosen;
  if (o.split == "all") {
    chosen = in.manifest;
  } else {
    const ManifestSplit parts = split_by_study(in.manifest, cfg.split_cutoff(), cfg.val_fraction(), cfg.get_u64("seed"));
    if (o.split == "train") chosen = parts.train;
    else if (o.split == "val") chosen = parts.val;
    else if (o.split == "test") chosen = parts.test;
    else throw UsageError("--split must be train, val, test or all");
  }
  if (!o.studies.empty()) {
    Manifest picked = chosen;
    picked.studies.clear();
    for (const auto& id : o.studies) {
      const auto it = std::find_if(in.manifest.studies.begin(), in.manifest.studies.end(),
                                   [&](const Study& s) { return s.id == id; });
      if (it == in.manifest.studies.end()) throw InputError("study '" + id + "' is not in " + data);
      picked.studies.push_back(*it);
    }
    chosen = picked;
  }
  if (chosen.studies.empty()) throw InputError("the " + o.split + " split of " + data + " has no studies");
  in.studies = prepare_studies<float>(chosen, size, cfg.get_u64("seed"));
  return in;
}

std::vector<std::string> ids_of(const std::vector<StudyInput<float>>& studies) {
  std::vector<std::string> ids;
  for (const auto& s : studies) ids.push_back(s.id);
  return ids;
}

int run_eval(const Options& o) {
  const RunConfig cfg = build_config(o.common);
  const fs::path out = require_out(o.common);
  RunLog log(out, "eval", cfg);
  EvalInputs in = load_eval_inputs(o, cfg, log);
  std::vector<NamedModel<float>> models;
  for (const auto& b : in.bundles) models.push_back({b.spec.name, &b});
  auto [report, scores] = evaluate_models(models, in.studies, in.manifest.label_names);
  report.metadata["split"] = o.split;
  write_report(out, report, scores, ids_of(in.studies));
  std::cout << render_table(report);
  log.event("evaluated " + std::to_string(models.size()) + " models on " + std::to_string(in.studies.size()) +
            " studies");
  return 0;
}

int run_predict(const Options& o) {
  const RunConfig cfg = build_config(o.common);
  const fs::path out = require_out(o.common);
  RunLog log(out, "predict", cfg);
  Options all = o;
  if (all.split == "test" && o.studies.empty()) all.split = "all";
  EvalInputs in = load_eval_inputs(all, cfg, log);
  for (const auto& b : in.bundles) {
    const ModelScores s = score_model(b.spec.name, b, in.studies);
    std::ofstream f(out / ("predictions_" + detail::file_safe(b.spec.name) + ".tsv"));
    f << "study_id";
    for (std::size_t l : s.label_indices) f << '\t' << in.manifest.label_names[l];
    f << '\n';
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
      f << in.studies[i].id;
      for (double v : s.scores[i]) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", v);
        f << '\t' << buf;
      }
      f << '\n';
    }
    log.event("wrote predictions_" + detail::file_safe(b.spec.name) + ".tsv (" + std::to_string(s.scores.size()) +
              " studies)");
  }
  return 0;
}

int run_attn(const Options& o) {
  const RunConfig cfg = build_config(o.common);
  const fs::path out = require_out(o.common);
  RunLog log(out, "attn-map", cfg);
  if (o.checkpoints.size() > 1) throw UsageError("attn-map takes one --checkpoint");
  EvalInputs in = load_eval_inputs(o, cfg, log);
  const auto& bundle = in.bundles.front();
  const std::size_t n = o.studies.empty() ? std::min(o.limit, in.studies.size()) : in.studies.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto files = export_attention_map(bundle, in.studies[i], out / detail::file_safe(in.studies[i].id));
    log.event("wrote " + files.heatmap.filename().string() + ", " + files.overlay.filename().string() + ", " +
              files.sidecar.filename().string());
  }
  return 0;
}

std::string one_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"StudyFormer: multi-view study classification with a vision transformer"};
  app.name("studyformer");
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Options o;
  auto* synth = app.add_subcommand("synth-data", "generate the synthetic shape benchmark");
  add_common(synth, o.common);

  auto* train = app.add_subcommand("train", "pretrain the backbone and train models in two stages");
  add_common(train, o.common);
  train->add_option("--data", o.data, "manifest.tsv");
  train->add_option("--model", o.model, "single_view, mvcnn, studyformer or all (default: model.kind)");
  train->add_option("--backbone-from", o.backbone_from, "checkpoint whose backbone initialises the models");
  train->add_option("--checkpoint", o.checkpoints, "checkpoint to resume");
  train->add_option("--max-epochs", o.max_epochs, "stop after this many epochs (resume later)");

  auto* eval = app.add_subcommand("eval", "ROC-AUC table for one or more checkpoints");
  add_common(eval, o.common);
  eval->add_option("--data", o.data, "manifest.tsv");
  eval->add_option("--checkpoint", o.checkpoints, "model checkpoint (repeatable)");
  eval->add_option("--split", o.split, "train, val, test (default) or all");

  auto* predict = app.add_subcommand("predict", "per-study label probabilities");
  add_common(predict, o.common);
  predict->add_option("--data", o.data, "manifest.tsv");
  predict->add_option("--checkpoint", o.checkpoints, "model checkpoint (repeatable)");
  predict->add_option("--split", o.split, "train, val, test or all (default)");
  predict->add_option("--study", o.studies, "restrict to these study ids (repeatable)");

  auto* attn = app.add_subcommand("attn-map", "attention rollout heatmaps for a StudyFormer checkpoint");
  add_common(attn, o.common);
  attn->add_option("--data", o.data, "manifest.tsv");
  attn->add_option("--checkpoint", o.checkpoints, "StudyFormer checkpoint");
  attn->add_option("--split", o.split, "split to draw studies from (default test)");
  attn->add_option("--study", o.studies, "study id (repeatable)");
  attn->add_option("--limit", o.limit, "number of studies when --study is not given (default 8)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    std::cout << kToolVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << '\n' << app.help();
    return 2;
  }

  try {
    if (synth->parsed()) return run_synth(o);
    if (train->parsed()) return run_train(o);
    if (eval->parsed()) return run_eval(o);
    if (predict->parsed()) return run_predict(o);
    if (attn->parsed()) return run_attn(o);
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << one_line(e.what()) << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << '\n';
    return 1;
  }
}
