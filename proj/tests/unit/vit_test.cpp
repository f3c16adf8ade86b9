#include <gtest/gtest.h>

#include "oracles.hpp"
#include "studyformer/vit.hpp"

namespace sf = studyformer;
using sf::Shape;
using sf::Tensor;

sf::ViTConfig small_config(std::size_t heads) {
  sf::ViTConfig c;
  c.depth = 1;
  c.heads = heads;
  c.embed_dim = 8;
  c.mlp_dim = 12;
  c.in_channels = 5;
  c.tile = 2;
  c.n_labels = 3;
  return c;
}

TEST(Vit, TokenCountPerWidth) {
  auto cfg = small_config(1);
  const auto p = sf::init_vit<double>(cfg, 1);
  std::mt19937_64 rng(1);
  for (std::size_t w : {2u, 3u, 4u}) {
    std::vector<Tensor<double>> maps;
    for (std::size_t k = 0; k < w * w; ++k) maps.push_back(sf_test::random_tensor(rng, {5, 2, 2}));
    const auto tokens = sf::tokenize(sf::assemble_square(maps, w), p);
    EXPECT_EQ(tokens.shape(), (Shape{w * w * 4 + 1, 8}));
  }
}

TEST(Vit, SingleHeadBlockMatchesReference) {
  auto cfg = small_config(1);
  auto p = sf::init_vit<double>(cfg, 3);
  std::mt19937_64 rng(2);
  for (auto& [name, t] : p.named_parameters()) {
    for (auto& v : t->mutable_data()) v += std::normal_distribution<double>(0.0, 0.05)(rng);
  }
  const auto x = sf_test::random_tensor(rng, {9, 8});
  const auto enc = sf::encode(x, p, true);
  sf_test::Mat attention;
  const auto ref = sf_test::reference_block(sf_test::to_mat(x), p.blocks[0], cfg.ln_eps, attention);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(enc.tokens[i * 8 + d], ref[i][d], 1e-12);
  const auto& rec = enc.attention->layers[0][0];
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(rec[i * 9 + j], attention[i][j], 1e-12);
}

TEST(Vit, OutputsAreProbabilities) {
  const auto p = sf::init_vit<double>(small_config(2), 4);
  std::mt19937_64 rng(3);
  std::vector<Tensor<double>> maps;
  for (int k = 0; k < 9; ++k) maps.push_back(sf_test::random_tensor(rng, {5, 2, 2}, -5.0, 5.0));
  const auto probs = sf::vit_forward(sf::assemble_square(maps, 3), p);
  ASSERT_EQ(probs.shape(), Shape{3});
  for (double v : probs.data()) EXPECT_TRUE(v > 0.0 && v < 1.0);
}

TEST(Vit, ConfigValidation) {
  auto c = small_config(3);
  EXPECT_THROW(c.validate(), sf::ConfigError);
  c = small_config(2);
  c.patch_size = 2;
  EXPECT_THROW(c.validate(), sf::ConfigError);
  c = small_config(2);
  c.supported_widths = {2, 5};
  EXPECT_THROW(c.validate(), sf::ConfigError);
}

TEST(Vit, GridMismatchIsDimensionError) {
  const auto p = sf::init_vit<double>(small_config(2), 4);
  std::vector<Tensor<double>> maps(4, Tensor<double>::zeros(Shape{6, 2, 2}));
  EXPECT_THROW(sf::tokenize(sf::assemble_square(maps, 2), p), sf::DimensionError);
}

TEST(Rollout, MatchesExplicitProducts) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    sf::AttentionRecord<double> rec;
    rec.tokens = 17;
    for (int l = 0; l < 3; ++l) {
      std::vector<std::vector<double>> layer;
      for (int h = 0; h < 2; ++h) {
        const auto s = sf::softmax(sf_test::random_tensor(rng, {17, 17}, -3.0, 3.0));
        layer.emplace_back(s.data().begin(), s.data().end());
      }
      rec.layers.push_back(layer);
    }
    const auto r = sf::attention_rollout(rec);
    const auto ref = sf_test::reference_rollout(rec);
    ASSERT_EQ(r.heatmap.shape(), (Shape{4, 4}));
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(r.heatmap[i], ref[i], 1e-12);
    EXPECT_FALSE(r.degenerate);
  }
}

TEST(Rollout, ConstantMapBecomesOnes) {
  sf::AttentionRecord<double> rec;
  rec.tokens = 5;
  rec.layers.push_back({std::vector<double>(25, 0.2)});
  const auto r = sf::attention_rollout(rec);
  for (double v : r.heatmap.data()) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_FALSE(r.degenerate);
}

TEST(Rollout, CLSOnlyAttentionIsDegenerate) {
  sf::AttentionRecord<double> rec;
  rec.tokens = 5;
  std::vector<double> a(25, 0.0);
  for (std::size_t i = 0; i < 5; ++i) a[i * 5] = 1.0;  // every row attends to CLS
  rec.layers.push_back({a});
  const auto r = sf::attention_rollout(rec);
  EXPECT_TRUE(r.degenerate);
  for (double v : r.heatmap.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Rollout, Errors) {
  sf::AttentionRecord<double> rec;
  rec.tokens = 5;
  EXPECT_THROW(sf::attention_rollout(rec), sf::ContractError);
  rec.tokens = 6;
  rec.layers.push_back({std::vector<double>(36, 1.0 / 6)});
  EXPECT_THROW(sf::attention_rollout(rec), sf::DimensionError);
}
