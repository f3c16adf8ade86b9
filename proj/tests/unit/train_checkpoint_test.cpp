#include <gtest/gtest.h>

#include "oracles.hpp"
#include "studyformer/checkpoint.hpp"
#include "studyformer/train.hpp"
#include "suites.hpp"

namespace sf = studyformer;

TEST(StagedTraining, Contract) {
  sf_test::TempDir dir("staged");
  for (const auto& m : sf_test::run_staged_contract(dir.path())) EXPECT_TRUE(m.pass) << m.name;
}

TEST(StagedTraining, StageTwoMovesTheBackbone) {
  const auto train = sf_test::tiny_studies(8, 1);
  auto b = sf::make_bundle<double>(sf_test::tiny_spec(sf::ModelKind::studyformer, 2));
  const auto before = b.clone();
  sf::TrainConfig cfg;
  cfg.stage1_epochs = 0;
  cfg.stage2_epochs = 1;
  sf::train_staged(b, train, {}, cfg);
  EXPECT_FALSE(sf_test::backbone_bitwise_equal(b.backbone, before.backbone));
  EXPECT_FALSE(b.backbone.frozen);
}

TEST(StagedTraining, LossDecreasesOnTinySet) {
  const auto train = sf_test::tiny_studies(16, 3);
  auto b = sf::make_bundle<double>(sf_test::tiny_spec(sf::ModelKind::mvcnn, 2));
  sf::TrainConfig cfg;
  cfg.stage1_epochs = 8;
  cfg.stage2_epochs = 0;
  cfg.lr_stage1 = 1e-2;
  const auto hist = sf::train_staged(b, train, {}, cfg);
  ASSERT_EQ(hist.size(), 8u);
  EXPECT_LT(hist.back().train_loss, hist.front().train_loss);
  EXPECT_TRUE(std::isnan(hist.back().val_loss));
}

TEST(StagedTraining, Errors) {
  auto b = sf::make_bundle<double>(sf_test::tiny_spec(sf::ModelKind::studyformer, 2));
  sf::TrainConfig cfg;
  EXPECT_THROW(sf::train_staged(b, {}, {}, cfg), sf::ContractError);
  auto train = sf_test::tiny_studies(2, 1);
  train[0].labels.push_back(0);
  EXPECT_THROW(sf::train_staged(b, train, {}, cfg), sf::ConfigError);
  cfg.label_subset = std::vector<std::size_t>{1};
  EXPECT_THROW(sf::train_staged(b, sf_test::tiny_studies(2, 1), {}, cfg), sf::ConfigError);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(sf::train_staged(b, sf_test::tiny_studies(2, 1), {}, cfg), sf::ConfigError);
}

TEST(StagedTraining, NonFiniteLossNamesEpochAndBatch) {
  auto b = sf::make_bundle<double>(sf_test::tiny_spec(sf::ModelKind::studyformer, 2));
  b.vit->head_bias.mutable_data()[0] = std::nan("");
  sf::TrainConfig cfg;
  cfg.stage1_epochs = 1;
  try {
    sf::train_staged(b, sf_test::tiny_studies(4, 1), {}, cfg);
    FAIL();
  } catch (const sf::TrainingError& e) {
    const std::string w = e.what();
    EXPECT_NE(w.find("epoch 1"), std::string::npos);
    EXPECT_NE(w.find("batch 1"), std::string::npos);
  }
}

TEST(StagedTraining, FocalLossTrains) {
  auto b = sf::make_bundle<double>(sf_test::tiny_spec(sf::ModelKind::single_view, 2));
  sf::TrainConfig cfg;
  cfg.loss = sf::LossKind::focal;
  cfg.focal_alpha = 0.5;
  cfg.stage1_epochs = 2;
  cfg.stage2_epochs = 1;
  const auto hist = sf::train_staged(b, sf_test::tiny_studies(6, 1), sf_test::tiny_studies(2, 2), cfg);
  EXPECT_EQ(hist.size(), 3u);
  for (const auto& r : hist) EXPECT_TRUE(std::isfinite(r.train_loss) && std::isfinite(r.val_loss));
}

TEST(Checkpoint, RoundTripEveryKind) {
  sf_test::TempDir dir("ckpt");
  const auto train = sf_test::tiny_studies(4, 1);
  for (auto kind : {sf::ModelKind::single_view, sf::ModelKind::mvcnn, sf::ModelKind::studyformer}) {
    auto spec = sf_test::tiny_spec(kind, 4);
    spec.label_subset = {1};
    auto b = sf::make_bundle<double>(spec);
    sf::TrainConfig cfg;
    cfg.stage1_epochs = 1;
    cfg.stage2_epochs = 1;
    sf::train_staged(b, train, {}, cfg);
    const auto path = dir.path() / (sf::model_kind_name(kind) + ".ckpt");
    sf::save_checkpoint(b, path);
    auto back = sf::load_checkpoint<double>(path);
    EXPECT_EQ(back.spec, b.spec);
    EXPECT_TRUE(sf_test::parameters_bitwise_equal(back, b));
    EXPECT_EQ(back.meta.history, b.meta.history);
    EXPECT_EQ(back.optimizer.moments, b.optimizer.moments);
    EXPECT_EQ(sf::serialize_checkpoint(back), sf::serialize_checkpoint(b));
    EXPECT_EQ(sf::predict_study(back, train[0]), sf::predict_study(b, train[0]));
  }
}

TEST(Checkpoint, CorruptionIsFormatError) {
  auto b = sf::make_bundle<double>(sf_test::tiny_spec(sf::ModelKind::studyformer, 4));
  const std::string bytes = sf::serialize_checkpoint(b);
  EXPECT_THROW(sf::deserialize_checkpoint<double>("XXXX" + bytes.substr(4)), sf::FormatError);
  EXPECT_THROW(sf::deserialize_checkpoint<double>(bytes.substr(0, bytes.size() / 2)), sf::FormatError);
  EXPECT_THROW(sf::deserialize_checkpoint<double>(bytes + "junk"), sf::FormatError);
  EXPECT_THROW(sf::deserialize_checkpoint<float>(bytes), sf::FormatError);
  std::string version = bytes;
  version[4] = 9;
  EXPECT_THROW(sf::deserialize_checkpoint<double>(version), sf::FormatError);
}

TEST(Checkpoint, MissingFileIsInputError) {
  EXPECT_THROW(sf::load_checkpoint<double>("/nonexistent/model.ckpt"), sf::InputError);
}
