// Acceptance runner: one PASS/FAIL line per criterion, details indented below.
// Exit status is the number of failed criteria.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "studyformer/pipeline.hpp"
#include "suites.hpp"

namespace sf = studyformer;
using sf_test::Measurement;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Criterion {
  explicit Criterion(std::string n) : name(std::move(n)) {}

  std::string name;
  bool pass = true;
  std::vector<std::string> details;

  void note(const std::string& line) { details.push_back(line); }
  void require(bool ok, const std::string& line) {
    pass = pass && ok;
    details.push_back(std::string(ok ? "ok   " : "FAIL ") + line);
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void add_measurements(Criterion& c, const std::vector<Measurement>& ms, bool show_values) {
  for (const auto& m : ms) {
    c.require(m.pass, show_values ? m.name + ": " + fmt("%.3g", m.value) + " (limit " + fmt("%.0e", m.limit) + ")"
                                  : m.name);
  }
}

int report(const Criterion& c) {
  std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << '\n';
  for (const auto& d : c.details) std::cout << "         " << d << '\n';
  std::cout.flush();
  return c.pass ? 0 : 1;
}

Criterion gradient_criterion() {
  Criterion c{"gradient suite: finite differences, max relative error < 1e-4 at 64-bit, < 2 min"};
  const auto t0 = Clock::now();
  sf_test::GradientSuite suite;
  auto ops = suite.run_ops();
  auto vit = suite.run_vit();
  double worst = 0.0;
  for (const auto& m : ops) worst = std::max(worst, m.value);
  for (const auto& m : vit) worst = std::max(worst, m.value);
  add_measurements(c, ops, true);
  add_measurements(c, vit, true);
  c.note("worst relative error " + fmt("%.3g", worst));
  const double t = seconds_since(t0);
  c.require(t < 120.0, "runtime " + fmt("%.1f", t) + " s");
  return c;
}

Criterion oracle_criterion() {
  Criterion c{"oracle suite: matmul/conv2d 1e-10, AUC vs pair counting and trapezoid 1e-9, aggregation exact, < 5 min"};
  const auto t0 = Clock::now();
  add_measurements(c, sf_test::run_oracle_suite(10000), true);
  const double t = seconds_since(t0);
  c.require(t < 300.0, "runtime " + fmt("%.1f", t) + " s");
  return c;
}

Criterion shape_criterion() {
  Criterion c{"shape contracts at paper scale (forward only), < 1 min"};
  const auto t0 = Clock::now();
  add_measurements(c, sf_test::run_shape_contracts(), false);
  const double t = seconds_since(t0);
  c.require(t < 60.0, "runtime " + fmt("%.1f", t) + " s");
  return c;
}

Criterion staged_criterion(const std::filesystem::path& scratch) {
  Criterion c{"staged training: frozen backbone in stage 1, exact resume, seed determinism"};
  add_measurements(c, sf_test::run_staged_contract(scratch), false);
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark, attention check and label-subset mode share one run.
// ---------------------------------------------------------------------------

struct Benchmark {
  sf::RunConfig cfg;
  sf::SyntheticDataset data;
  sf::PreparedSplit<float> split;
  std::vector<sf::ModelBundle<float>> models;  // single_view, mvcnn, studyformer
  std::optional<sf::ModelBundle<float>> pretrained;
  double train_seconds = 0.0;
};

bool table_well_formed(const sf::EvalReport& r, const std::string& table, Criterion& c) {
  bool ok = true;
  for (const auto& m : r.model_names) ok = ok && table.find(m) != std::string::npos;
  for (const auto& row : r.auc)
    for (const auto& v : row) ok = ok && (!v || (*v >= 0.0 && *v <= 1.0));
  for (const auto& l : r.label_names) ok = ok && table.find(l) != std::string::npos;
  c.require(ok, "table renders every model column and every defined AUC lies in [0, 1]");
  return ok;
}

Criterion benchmark_criterion(Benchmark& b, const std::filesystem::path& scratch) {
  Criterion c{"synthetic benchmark: single-label macro-AUC >= 0.90, conjunction gain over single-view max >= 0.05, table"};
  const auto t0 = Clock::now();
  const sf::SyntheticSpec spec = b.cfg.synthetic_spec();
  b.data = sf::generate_synthetic_dataset(spec, scratch / "data");
  const std::size_t size = b.cfg.backbone_config().input_size;
  b.split = sf::prepare_split<float>(b.data.manifest, b.cfg, size);
  c.require(b.split.train.size() == 2000 && b.split.val.size() == 300 && b.split.test.size() == 300,
            "split " + std::to_string(b.split.train.size()) + " / " + std::to_string(b.split.val.size()) + " / " +
                std::to_string(b.split.test.size()) + " studies, " + std::to_string(spec.labels.size()) + " labels");

  const auto& names = b.data.manifest.label_names;
  sf::LogFn log = [&](const std::string& s) { std::cerr << fmt("%7.1f s  ", seconds_since(t0)) << s << '\n'; };
  b.pretrained = sf::pretrain_backbone<float>(b.cfg, names, b.split.train, b.split.val, log);
  for (auto k : {sf::ModelKind::single_view, sf::ModelKind::mvcnn, sf::ModelKind::studyformer}) {
    b.models.push_back(
        sf::train_model<float>(b.cfg, k, names, &b.pretrained->backbone, b.split.train, b.split.val, log));
  }
  b.train_seconds = seconds_since(t0);
  c.note("budget per model: pretrained backbone (" + b.cfg.get("train.pretrain_epochs") + " epochs, shared), stage 1 " +
         b.cfg.get("train.stage1_epochs") + " epochs, stage 2 " + b.cfg.get("train.stage2_epochs") + " epochs");

  std::vector<sf::NamedModel<float>> named;
  for (const auto& m : b.models) named.push_back({m.spec.name, &m});
  auto [rep, scores] = sf::evaluate_models(named, b.split.test, names);
  const std::string table = sf::render_table(rep);
  std::istringstream lines(table);
  for (std::string line; std::getline(lines, line);) c.note(line);

  std::vector<std::size_t> single, conj;
  for (std::size_t l = 0; l < spec.labels.size(); ++l) (spec.labels[l].conjunction() ? conj : single).push_back(l);
  const auto sf_single = rep.macro_auc("studyformer", single);
  c.require(sf_single && *sf_single >= 0.90,
            "studyformer macro-AUC on single-view labels " + fmt("%.4f", sf_single.value_or(-1.0)) + " >= 0.90");
  const auto sf_conj = rep.macro_auc("studyformer", conj);
  const auto sv_conj = rep.macro_auc("single_view", conj);
  const double gain = sf_conj && sv_conj ? *sf_conj - *sv_conj : -1.0;
  for (std::size_t l : conj) {
    const auto a = rep.auc[l][rep.model_index("studyformer")], s = rep.auc[l][rep.model_index("single_view")];
    c.note(names[l] + ": studyformer " + fmt("%.4f", a.value_or(-1)) + " vs single-view max " +
           fmt("%.4f", s.value_or(-1)));
  }
  c.require(gain >= 0.05, "conjunction macro-AUC gain over single-view max " + fmt("%.4f", gain) + " >= 0.05");
  table_well_formed(rep, table, c);
  const double t = seconds_since(t0);
  c.require(t < 45.0 * 60.0, "wall time " + fmt("%.0f", t) + " s for data, pretraining, 3 models and evaluation");
  return c;
}

bool pnm_p5_well_formed(const std::filesystem::path& p, std::size_t expect_side, std::string& why) {
  const std::string bytes = sf_test::read_file(p);
  std::istringstream in(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5") return why = "magic " + magic, false;
  if (w != expect_side || h != expect_side) return why = "size " + std::to_string(w) + "x" + std::to_string(h), false;
  if (maxval != 255) return why = "maxval " + std::to_string(maxval), false;
  in.get();
  const auto header = static_cast<std::size_t>(in.tellg());
  if (bytes.size() - header != w * h) return why = "payload " + std::to_string(bytes.size() - header), false;
  return true;
}

Criterion attention_criterion(const Benchmark& b, const std::filesystem::path& scratch) {
  Criterion c{"attention maps: rollout favours shape-bearing tiles on >= 20 positive studies; P5 heatmaps"};
  if (b.models.size() != 3) {
    c.require(false, "benchmark models unavailable");
    return c;
  }
  const auto& model = b.models[2];
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < b.data.manifest.studies.size(); ++i) index[b.data.manifest.studies[i].id] = i;
  std::vector<std::vector<std::vector<sf::ShapePlacement>>> placements;
  for (const auto& s : b.split.test) placements.push_back(b.data.placements.at(index.at(s.id)));
  const auto rel = sf::attention_relevance(model, b.split.test, placements);
  c.require(rel.studies >= 20, std::to_string(rel.studies) + " positive test studies with shape and blank tiles");
  c.require(rel.relevant_mean > rel.irrelevant_mean, "mean tile attention: shape-bearing " +
                                                         fmt("%.4f", rel.relevant_mean) + " > blank " +
                                                         fmt("%.4f", rel.irrelevant_mean));
  c.note(std::to_string(rel.studies_favouring) + " of " + std::to_string(rel.studies) +
         " studies individually favour shape-bearing tiles");

  std::size_t exported = 0, well_formed = 0;
  std::string why;
  for (const auto& in : b.split.test) {
    if (exported == 6) break;
    const auto files = sf::export_attention_map(model, in, scratch / "attn" / in.id);
    ++exported;
    const std::size_t side = in.width * model.spec.backbone.out_grid;
    if (pnm_p5_well_formed(files.heatmap, side, why) && std::filesystem::exists(files.overlay) &&
        std::filesystem::exists(files.sidecar)) {
      ++well_formed;
    }
  }
  c.require(exported > 0 && well_formed == exported,
            std::to_string(well_formed) + " of " + std::to_string(exported) + " heatmaps are well-formed P5 graymaps" +
                (why.empty() ? "" : " (" + why + ")"));
  return c;
}

Criterion subset_criterion(Benchmark& b, const std::filesystem::path& scratch) {
  Criterion c{"label-subset mode: 3-label StudyFormer trains and evaluates end to end"};
  {
    if (!b.pretrained) throw sf::ContractError("benchmark did not produce a pretrained backbone");
    const std::vector<std::string> subset{"disc", "ring", "disc+square"};
    sf::RunConfig cfg = b.cfg;
    cfg.set("model.labels", "disc,ring,disc+square");
    const auto& names = b.data.manifest.label_names;
    auto model = sf::train_model<float>(cfg, sf::ModelKind::studyformer, names, &b.pretrained->backbone,
                                        b.split.train, b.split.val);
    c.require(model.n_outputs() == 3, "model has " + std::to_string(model.n_outputs()) + " outputs");
    sf::save_checkpoint(model, scratch / "subset.ckpt");
    auto loaded = sf::load_checkpoint<float>(scratch / "subset.ckpt");
    c.require(sf::predict_study(loaded, b.split.test.front()) == sf::predict_study(model, b.split.test.front()),
              "checkpoint round trip preserves predictions");

    std::vector<sf::NamedModel<float>> named;
    for (const auto& m : b.models) named.push_back({m.spec.name, &m});
    named.push_back({loaded.spec.name, &loaded});
    auto [rep, scores] = sf::evaluate_models(named, b.split.test, names);
    const std::size_t m = rep.model_index(loaded.spec.name);
    std::size_t covered = 0;
    bool defined = true;
    for (std::size_t l = 0; l < names.size(); ++l) {
      if (!rep.covered[l][m]) continue;
      ++covered;
      const bool in_subset = std::find(subset.begin(), subset.end(), names[l]) != subset.end();
      defined = defined && in_subset && rep.auc[l][m] && *rep.auc[l][m] >= 0.0 && *rep.auc[l][m] <= 1.0;
      c.note(names[l] + " AUC " + fmt("%.4f", rep.auc[l][m].value_or(-1.0)));
    }
    c.require(covered == 3 && defined, "report covers exactly the 3 subset labels with defined AUCs");
    const std::string table = sf::render_table(rep);
    std::istringstream lines(table);
    for (std::string line; std::getline(lines, line);) c.note(line);
    table_well_formed(rep, table, c);
  }
  return c;
}

}  // namespace

// An exception inside a criterion becomes a failed line rather than a crash.
template <class Fn>
Criterion guarded(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    Criterion c{name};
    c.require(false, std::string("error: ") + e.what());
    return c;
  }
}

int main() {
  sf_test::TempDir scratch("acceptance");
  const auto& dir = scratch.path();
  int failed = 0;
  failed += report(guarded("gradient suite", [] { return gradient_criterion(); }));
  failed += report(guarded("oracle suite", [] { return oracle_criterion(); }));
  failed += report(guarded("shape contracts", [] { return shape_criterion(); }));
  failed += report(guarded("staged training contract", [&] { return staged_criterion(dir); }));

  Benchmark bench;
  failed += report(guarded("synthetic benchmark", [&] { return benchmark_criterion(bench, dir); }));
  failed += report(guarded("attention maps", [&] { return attention_criterion(bench, dir); }));
  failed += report(guarded("label-subset mode", [&] { return subset_criterion(bench, dir); }));

  std::cout << (failed == 0 ? "all 7 acceptance criteria passed" : std::to_string(failed) + " of 7 criteria failed")
            << '\n';
  return failed;
}
