#pragma once

// Property suites shared by the unit tests and the acceptance runner. Each
// returns named measurements so callers can both assert and report them.

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "studyformer/assembly.hpp"
#include "studyformer/backbone.hpp"
#include "studyformer/checkpoint.hpp"
#include "studyformer/data.hpp"
#include "studyformer/eval.hpp"
#include "studyformer/losses.hpp"
#include "studyformer/model.hpp"
#include "studyformer/train.hpp"
#include "studyformer/vit.hpp"

namespace sf_test {

namespace sf = studyformer;

struct Measurement {
  std::string name;
  double value = 0.0;
  double limit = 0.0;  // pass when value < limit (or <= for exact checks)
  bool pass = false;
};

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

inline constexpr double kGradientLimit = 1e-4;

class GradientSuite {
 public:
  explicit GradientSuite(std::uint64_t seed = 17) : rng_(seed) {}

  std::vector<Measurement> run_ops() {
    std::vector<Measurement> out;
    auto x = [&](Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor(rng_, std::move(s), lo, hi, true); };
    using T = Tensor<double>;

    {
      T a = x({3, 4}), b = x({3, 4});
      out.push_back(check("add", [&] { return sf::add(a, b); }, {&a, &b}));
      out.push_back(check("sub", [&] { return sf::sub(a, b); }, {&a, &b}));
      out.push_back(check("mul", [&] { return sf::mul(a, b); }, {&a, &b}));
      out.push_back(check("scale", [&] { return sf::scale(a, 1.7); }, {&a}));
      out.push_back(check("add_scalar", [&] { return sf::add_scalar(a, -0.3); }, {&a}));
      out.push_back(check("relu", [&] { return sf::relu(a); }, {&a}));
      out.push_back(check("gelu", [&] { return sf::gelu(a); }, {&a}));
      out.push_back(check("sigmoid", [&] { return sf::sigmoid(sf::scale(a, 4.0)); }, {&a}));
      out.push_back(check("transpose", [&] { return sf::transpose(a); }, {&a}));
      out.push_back(check("sum", [&] { return sf::scale(sf::sum(a), 1.0); }, {&a}));
      out.push_back(check("mean", [&] { return sf::mean(a); }, {&a}));
      out.push_back(check("softmax", [&] { return sf::softmax(sf::scale(a, 3.0)); }, {&a}));
      out.push_back(check("reshape", [&] { return sf::reshape(a, Shape{2, 6}); }, {&a}));
      out.push_back(check("slice_cols", [&] { return sf::slice_cols(a, 1, 2); }, {&a}));
      out.push_back(check("slice_rows", [&] { return sf::slice_rows(a, 1, 2); }, {&a}));
      out.push_back(check("concat_cols", [&] { return sf::concat_cols<double>({a, b}); }, {&a, &b}));
      out.push_back(check("concat_rows", [&] { return sf::concat_rows<double>({a, b}); }, {&a, &b}));
      out.push_back(check("select", [&] { return sf::select(a, 2); }, {&a}));
      out.push_back(check("stack", [&] { return sf::stack<double>({a, b}); }, {&a, &b}));
      out.push_back(check("elementwise_max", [&] { return sf::elementwise_max<double>({a, b}); }, {&a, &b}));
      out.push_back(check("reuse x+x", [&] { return sf::add(a, a); }, {&a}));
    }
    {
      T p = x({3, 4}, 0.2, 2.0);
      out.push_back(check("log", [&] { return sf::log(p); }, {&p}));
      out.push_back(check("pow_scalar", [&] { return sf::pow_scalar(p, 2.5); }, {&p}));
      T c = x({3, 4}, -2.0, 2.0);
      out.push_back(check("clamp", [&] { return sf::clamp(c, -0.9, 0.9); }, {&c}));
    }
    {
      T a = x({5, 3}), b = x({3, 4}), bias = x({4});
      out.push_back(check("matmul", [&] { return sf::matmul(a, b); }, {&a, &b}));
      out.push_back(check("add_row_bias", [&] { return sf::add_row_bias(sf::matmul(a, b), bias); }, {&a, &b, &bias}));
      T g = x({4}, 0.5, 1.5), beta = x({4});
      T m = x({3, 4}, -2.0, 2.0);
      out.push_back(check("layer_norm", [&] { return sf::layer_norm(m, g, beta, 1e-5); }, {&m, &g, &beta}));
    }
    {
      T in = x({2, 3, 5, 5}), k = x({4, 3, 3, 3}), cb = x({4});
      out.push_back(check("conv2d", [&] { return sf::conv2d(in, k, 1, 0); }, {&in, &k}));
      out.push_back(check("conv2d stride2 pad1", [&] { return sf::conv2d(in, k, 2, 1); }, {&in, &k}));
      out.push_back(check("add_channel_bias", [&] { return sf::add_channel_bias(sf::conv2d(in, k, 1, 1), cb); },
                          {&in, &k, &cb}));
      T q = x({2, 3, 4, 6});
      out.push_back(check("max_pool2d", [&] { return sf::max_pool2d(q, 2); }, {&q}));
      out.push_back(check("global_avg_pool", [&] { return sf::global_avg_pool(q); }, {&q}));
    }
    {
      std::vector<T> maps;
      for (int i = 0; i < 4; ++i) maps.push_back(x({3, 2, 2}));
      std::vector<T*> ptrs;
      for (auto& m : maps) ptrs.push_back(&m);
      out.push_back(check("assemble_square", [&] { return sf::assemble_square(maps, 2).data; }, ptrs));
    }
    {
      T p = x({3, 4}, 0.05, 0.95), a = x({3, 4});
      std::uniform_int_distribution<int> bit(0, 1);
      std::vector<double> y(12);
      for (auto& v : y) v = bit(rng_);
      const T target(Shape{3, 4}, y);
      out.push_back(check_scalar("bce_loss", [&] { return sf::bce_loss(p, target); }, {&p}));
      out.push_back(check_scalar("focal_loss", [&] { return sf::focal_loss(p, target, 0.8, 2.0); }, {&p}));
      out.push_back(check_scalar("matmul->softmax->bce", [&] {
        T w = a;  // 3x4 input through a fixed chain
        return sf::bce_loss(sf::softmax(w), target);
      }, {&a}));
    }
    {
      sf::BackboneConfig cfg;
      cfg.input_size = 8;
      cfg.stage_channels = {3, 4};
      cfg.downsample = {2, 2};
      cfg.out_channels = 4;
      cfg.out_grid = 2;
      auto bb = sf::init_backbone<double>(cfg, 5);
      T img = x({2, 3, 8, 8});
      std::vector<T*> ps{&img};
      for (auto& [n, p] : bb.named_parameters()) ps.push_back(p);
      out.push_back(check("backbone", [&] { return sf::extract_features(bb, img); }, ps));

      sf::MvcnnConfig mc;
      mc.in_channels = 4;
      mc.hidden = 3;
      mc.n_labels = 2;
      auto head = sf::init_mvcnn_head<double>(mc, 3);
      T v1 = x({4, 2, 2}), v2 = x({4, 2, 2});
      std::vector<T*> hp{&v1, &v2};
      for (auto& [n, p] : head.named_parameters()) hp.push_back(p);
      out.push_back(check("mvcnn head", [&] { return sf::mvcnn_forward<double>({v1, v2}, head); }, hp));

      auto vh = sf::init_view_head<double>(4, 3, 9);
      T f = x({2, 4, 2, 2});
      std::vector<T*> vp{&f, &vh.weight, &vh.bias};
      out.push_back(check("view head + column max", [&] {
        return sf::single_view_max_baseline(sf::view_head_forward(f, vh));
      }, vp));
    }
    return out;
  }

  // Desk ViT (depth 2, heads 2, embed 16) on a W=2, G=4 grid through BCE;
  // one measurement per parameter group.
  std::vector<Measurement> run_vit() {
    sf::ViTConfig cfg;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.embed_dim = 16;
    cfg.mlp_dim = 24;
    cfg.in_channels = 6;
    cfg.tile = 4;
    cfg.n_labels = 3;
    auto params = sf::init_vit<double>(cfg, 11);
    // Perturb the zero-initialised biases and LN affine terms so their
    // gradients are exercised away from the symmetric starting point.
    std::normal_distribution<double> jitter(0.0, 0.1);
    for (auto& [name, t] : params.named_parameters()) {
      for (auto& v : t->mutable_data()) v += jitter(rng_);
    }
    std::vector<Tensor<double>> maps;
    for (int i = 0; i < 4; ++i) maps.push_back(random_tensor(rng_, {6, 4, 4}));
    const sf::FeatureGrid<double> grid = sf::assemble_square(maps, 2);
    const Tensor<double> target(Shape{1, 3}, {1.0, 0.0, 1.0});
    auto loss = [&] {
      return sf::bce_loss(sf::reshape(sf::vit_forward(grid, params), Shape{1, 3}), target);
    };
    std::vector<Measurement> out;
    auto all = params.named_parameters();
    // group by prefix up to the last '.'
    std::vector<std::pair<std::string, std::vector<Tensor<double>*>>> groups;
    for (auto& [name, t] : all) {
      const std::string group = name.substr(0, name.rfind('.'));
      if (groups.empty() || groups.back().first != group) groups.push_back({group, {}});
      groups.back().second.push_back(t);
    }
    for (auto& [group, ts] : groups) {
      const double err = max_gradient_error(loss, ts);
      out.push_back({"vit " + group, err, kGradientLimit, err < kGradientLimit});
    }
    return out;
  }

 private:
  Measurement check(const std::string& name, const std::function<Tensor<double>()>& op,
                    std::vector<Tensor<double>*> params) {
    // Fixed random weights for this op.
    const Tensor<double> probe = op();
    const Tensor<double> r = random_tensor(rng_, probe.shape());
    auto loss = [&] { return sf::sum(sf::mul(op(), r)); };
    const double err = max_gradient_error(loss, std::move(params));
    return {name, err, kGradientLimit, err < kGradientLimit};
  }

  Measurement check_scalar(const std::string& name, const std::function<Tensor<double>()>& loss,
                           std::vector<Tensor<double>*> params) {
    const double err = max_gradient_error(loss, std::move(params));
    return {name, err, kGradientLimit, err < kGradientLimit};
  }

  std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Oracle suite
// ---------------------------------------------------------------------------

inline std::vector<Measurement> run_oracle_suite(std::size_t auc_trials = 10000, std::uint64_t seed = 23) {
  std::mt19937_64 rng(seed);
  std::vector<Measurement> out;

  double mm = 0.0;
  for (int t = 0; t < 100; ++t) {
    std::uniform_int_distribution<std::size_t> ext(1, 8);
    const std::size_t m = ext(rng), k = ext(rng), n = ext(rng);
    const auto a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n});
    const auto c = sf::matmul(a, b);
    const auto ref = loop_matmul({a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()}, m, k, n);
    for (std::size_t i = 0; i < ref.size(); ++i) mm = std::max(mm, std::abs(c[i] - ref[i]));
  }
  out.push_back({"matmul vs loop oracle (100 cases, max abs diff)", mm, 1e-10, mm < 1e-10});

  double cv = 0.0;
  for (int t = 0; t < 100; ++t) {
    std::uniform_int_distribution<std::size_t> small(1, 4), side(3, 8), kk(1, 3), st(1, 2), pd(0, 1);
    const std::size_t b = small(rng), ci = small(rng), co = small(rng), h = side(rng), w = side(rng);
    const std::size_t k = kk(rng), stride = st(rng), pad = pd(rng);
    const auto in = random_tensor(rng, {b, ci, h, w}), ker = random_tensor(rng, {co, ci, k, k});
    const auto got = sf::conv2d(in, ker, stride, pad);
    const auto ref = loop_conv2d(in, ker, stride, pad);
    for (std::size_t i = 0; i < ref.size(); ++i) cv = std::max(cv, std::abs(got[i] - ref[i]));
  }
  out.push_back({"conv2d vs loop oracle (100 cases, max abs diff)", cv, 1e-10, cv < 1e-10});

  double auc = 0.0, trap = 0.0;
  for (std::size_t t = 0; t < auc_trials; ++t) {
    std::uniform_int_distribution<std::size_t> len(2, 60);
    std::uniform_int_distribution<int> coarse(0, 9);
    std::bernoulli_distribution pos(0.4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t n = len(rng);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    const bool ties = t % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = ties ? coarse(rng) / 10.0 : u(rng);
      y[i] = pos(rng) ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    const double a = sf::roc_auc(s, y);
    auc = std::max(auc, std::abs(a - pair_count_auc(s, y)));
    trap = std::max(trap, std::abs(a - sf::trapezoid_area(sf::roc_curve_points(s, y))));
  }
  out.push_back({"roc_auc vs pair counting (" + std::to_string(auc_trials) + " trials)", auc, 1e-9, auc < 1e-9});
  out.push_back({"trapezoid area vs rank AUC (" + std::to_string(auc_trials) + " trials)", trap, 1e-9, trap < 1e-9});

  std::size_t mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    std::uniform_int_distribution<std::size_t> rows(1, 16), cols(1, 41);
    std::bernoulli_distribution bit(0.3);
    sf::LabelMatrix m(rows(rng), sf::LabelVector(cols(rng)));
    for (auto& r : m) {
      r.resize(m.front().size());
      for (auto& v : r) v = bit(rng) ? 1 : 0;
    }
    if (sf::aggregate_study_labels(m) != column_max(m)) ++mismatches;
  }
  out.push_back({"label aggregation vs column max (1000 cases, mismatches)", static_cast<double>(mismatches), 0.5,
                 mismatches == 0});
  return out;
}

// ---------------------------------------------------------------------------
// Paper-scale shape contracts (forward only)
// ---------------------------------------------------------------------------

inline std::vector<Measurement> run_shape_contracts() {
  std::vector<Measurement> out;
  auto record = [&](const std::string& name, bool ok) { out.push_back({name, ok ? 0.0 : 1.0, 0.5, ok}); };
  sf::NoGradGuard guard;

  const auto bcfg = sf::BackboneConfig::paper();
  const auto backbone = sf::init_backbone<float>(bcfg, 1);
  const Tensor<float> view = Tensor<float>::full(Shape{1, 3, 320, 320}, 0.1f);
  const Tensor<float> feats = sf::extract_features(backbone, view);
  record("backbone 1x3x320x320 -> 1x1024x10x10 (" + sf::shape_string(feats.shape()) + ")",
         feats.shape() == Shape{1, 1024, 10, 10});

  const Tensor<float> one = sf::select(feats, 0);
  const auto grid2 = sf::assemble_square<float>({one, one, one, one}, 2);
  record("W=2 grid 20x20x1024 (" + sf::shape_string(grid2.data.shape()) + ")",
         grid2.data.shape() == Shape{20, 20, 1024});

  auto vcfg = sf::ViTConfig::paper();
  const auto vit = sf::init_vit<float>(vcfg, 2);
  const auto probs = sf::vit_forward(grid2, vit);
  record("41 output probabilities (" + sf::shape_string(probs.shape()) + ")", probs.shape() == Shape{41});
  bool in_range = true;
  for (float p : probs.data()) in_range = in_range && p > 0.0f && p < 1.0f;
  record("probabilities in (0,1)", in_range);

  std::vector<Tensor<float>> sixteen(16, one);
  const auto grid4 = sf::assemble_square(sixteen, 4);
  const auto tokens = sf::tokenize(grid4, vit);
  record("W=4 tokens 1600+1 (" + sf::shape_string(tokens.shape()) + ")", tokens.shape() == Shape{1601, 1024});
  record("choose_grid_width(16) = 4", sf::choose_grid_width(16) == 4);
  return out;
}

// ---------------------------------------------------------------------------
// Staged training contract
// ---------------------------------------------------------------------------

// Small in-memory dataset: disc-like bright blob => label 0, bar => label 1.
inline std::vector<sf::StudyInput<double>> tiny_studies(std::size_t count, std::uint64_t seed, std::size_t size = 16) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<std::size_t> nviews(1, 3);
  std::vector<sf::StudyInput<double>> out;
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t n = nviews(rng);
    std::vector<sf::Image> imgs;
    sf::LabelMatrix vl;
    for (std::size_t v = 0; v < n; ++v) {
      sf::Image img(size, size, 3, 0.1f);
      const bool blob = coin(rng), bar = coin(rng);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const bool in_blob = blob && y >= 2 && y < 6 && x >= 2 && x < 6;
          const bool in_bar = bar && y >= size - 4 && x >= 4 && x < size - 2;
          for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = in_blob ? 0.9f : (in_bar ? 0.6f : 0.1f);
        }
      imgs.push_back(img);
      vl.push_back({static_cast<std::uint8_t>(blob), static_cast<std::uint8_t>(bar)});
    }
    out.push_back(sf::prepare_study_images<double>("t" + std::to_string(s), imgs, size, seed,
                                                   sf::aggregate_study_labels(vl), vl));
  }
  return out;
}

inline sf::ModelSpec tiny_spec(sf::ModelKind kind, std::uint64_t seed) {
  sf::ModelSpec spec;
  spec.kind = kind;
  spec.seed = seed;
  spec.label_names = {"blob", "bar"};
  spec.backbone.input_size = 16;
  spec.backbone.stage_channels = {4, 8};
  spec.backbone.downsample = {2, 4};
  spec.backbone.out_channels = 8;
  spec.backbone.out_grid = 2;
  spec.vit.depth = 1;
  spec.vit.heads = 2;
  spec.vit.embed_dim = 8;
  spec.vit.mlp_dim = 16;
  spec.mvcnn_hidden = 8;
  return spec;
}

inline bool backbone_bitwise_equal(const sf::BackboneParams<double>& a, const sf::BackboneParams<double>& b) {
  for (std::size_t s = 0; s < a.kernels.size(); ++s) {
    if (!std::equal(a.kernels[s].data().begin(), a.kernels[s].data().end(), b.kernels[s].data().begin())) return false;
    if (!std::equal(a.biases[s].data().begin(), a.biases[s].data().end(), b.biases[s].data().begin())) return false;
  }
  return true;
}

inline bool parameters_bitwise_equal(sf::ModelBundle<double>& a, sf::ModelBundle<double>& b) {
  auto pa = a.named_parameters(), pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first || pa[i].second->shape() != pb[i].second->shape()) return false;
    if (!std::equal(pa[i].second->data().begin(), pa[i].second->data().end(), pb[i].second->data().begin())) return false;
  }
  return true;
}

inline std::vector<Measurement> run_staged_contract(const std::filesystem::path& scratch) {
  std::vector<Measurement> out;
  auto record = [&](const std::string& name, bool ok) { out.push_back({name, ok ? 0.0 : 1.0, 0.5, ok}); };
  const auto train = tiny_studies(12, 1), val = tiny_studies(4, 2);

  for (auto kind : {sf::ModelKind::studyformer, sf::ModelKind::mvcnn, sf::ModelKind::single_view}) {
    const std::string k = sf::model_kind_name(kind);
    auto bundle = sf::make_bundle<double>(tiny_spec(kind, 3));
    const auto initial = bundle.clone();
    sf::TrainConfig cfg;
    cfg.stage1_epochs = 3;
    cfg.stage2_epochs = 0;
    cfg.batch_size = 4;
    cfg.seed = 4;
    sf::train_staged(bundle, train, val, cfg);
    record(k + ": stage 1 leaves the backbone bitwise unchanged", backbone_bitwise_equal(bundle.backbone, initial.backbone));
  }

  sf::TrainConfig cfg;
  cfg.stage1_epochs = 2;
  cfg.stage2_epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 9;

  auto full = sf::make_bundle<double>(tiny_spec(sf::ModelKind::studyformer, 5));
  sf::train_staged(full, train, val, cfg);

  auto part = sf::make_bundle<double>(tiny_spec(sf::ModelKind::studyformer, 5));
  sf::TrainConfig first = cfg;
  first.max_epochs_this_call = 3;  // stops one epoch into stage 2
  sf::train_staged(part, train, val, first);
  const auto path = scratch / "resume.ckpt";
  sf::save_checkpoint(part, path);
  auto resumed = sf::load_checkpoint<double>(path);
  sf::train_staged(resumed, train, val, cfg);
  record("resume after checkpoint reproduces the loss trajectory bitwise",
         resumed.meta.history == full.meta.history && full.meta.history.size() == 4);
  record("resume after checkpoint reproduces the parameters bitwise", parameters_bitwise_equal(resumed, full));

  auto again = sf::make_bundle<double>(tiny_spec(sf::ModelKind::studyformer, 5));
  sf::train_staged(again, train, val, cfg);
  record("fixed seed reproduces the run bitwise",
         again.meta.history == full.meta.history && parameters_bitwise_equal(again, full));
  return out;
}

}  // namespace sf_test
