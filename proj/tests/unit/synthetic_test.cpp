#include <gtest/gtest.h>

#include "oracles.hpp"
#include "studyformer/synthetic.hpp"

namespace sf = studyformer;

sf::SyntheticSpec small_spec(std::uint64_t seed) {
  auto s = sf::SyntheticSpec::benchmark(seed);
  s.studies_before_cutoff = 30;
  s.studies_after_cutoff = 10;
  s.image_size = 32;
  return s;
}

TEST(Synthetic, BenchmarkVocabulary) {
  const auto s = sf::SyntheticSpec::benchmark(0);
  ASSERT_EQ(s.labels.size(), 8u);
  std::size_t conj = 0;
  for (const auto& l : s.labels) conj += l.conjunction();
  EXPECT_EQ(conj, 2u);
}

TEST(Synthetic, DeterministicGivenSeed) {
  sf_test::TempDir a("synth_a"), b("synth_b");
  sf::generate_synthetic_dataset(small_spec(5), a.path());
  sf::generate_synthetic_dataset(small_spec(5), b.path());
  EXPECT_EQ(sf_test::read_file(a.path() / "manifest.tsv"), sf_test::read_file(b.path() / "manifest.tsv"));
  EXPECT_EQ(sf_test::read_file(a.path() / "shapes.tsv"), sf_test::read_file(b.path() / "shapes.tsv"));
  EXPECT_EQ(sf_test::read_file(a.path() / "images" / "s00003_v1.ppm"),
            sf_test::read_file(b.path() / "images" / "s00003_v1.ppm"));
}

TEST(Synthetic, ManifestValidatesAndDatesRespectCutoff) {
  sf_test::TempDir dir("synth");
  const auto spec = small_spec(6);
  const auto ds = sf::generate_synthetic_dataset(spec, dir.path());
  const auto m = sf::load_manifest(dir.path() / "manifest.tsv");
  ASSERT_EQ(m.studies.size(), 40u);
  for (std::size_t i = 0; i < m.studies.size(); ++i) {
    EXPECT_EQ(m.studies[i].date < spec.cutoff, i < 30) << m.studies[i].id;
    EXPECT_GE(m.studies[i].n_views(), 1u);
    EXPECT_LE(m.studies[i].n_views(), 6u);
    EXPECT_EQ(m.studies[i].view_labels, ds.manifest.studies[i].view_labels);
  }
}

TEST(Synthetic, LabelsFollowPlacements) {
  sf_test::TempDir dir("synth_labels");
  const auto spec = small_spec(7);
  const auto ds = sf::generate_synthetic_dataset(spec, dir.path());
  for (std::size_t s = 0; s < ds.placements.size(); ++s) {
    const auto& views = ds.placements[s];
    const auto& study = ds.manifest.studies[s];
    for (std::size_t l = 0; l < spec.labels.size(); ++l) {
      const auto& rule = spec.labels[l];
      if (!rule.conjunction()) {
        for (std::size_t v = 0; v < views.size(); ++v) {
          EXPECT_EQ(study.view_labels[v][l], sf::detail::view_has(views[v], rule.first));
        }
        continue;
      }
      bool any_a = false, any_b = false;
      for (const auto& v : views) {
        // Partners never share a view, so the study label is "both somewhere".
        EXPECT_FALSE(sf::detail::view_has(v, rule.first) && sf::detail::view_has(v, *rule.second));
        any_a = any_a || sf::detail::view_has(v, rule.first);
        any_b = any_b || sf::detail::view_has(v, *rule.second);
      }
      EXPECT_EQ(study.labels[l], any_a && any_b);
    }
  }
}

TEST(Synthetic, ConjunctionNeedsTwoViews) {
  auto spec = sf::SyntheticSpec::benchmark(0);
  sf::ShapePlacement disc{sf::ShapeKind::disc, 16, 16, 6, 0.8f};
  sf::ShapePlacement square{sf::ShapeKind::square, 40, 40, 6, 0.8f};
  const auto one = sf::label_views(spec, {{disc}});
  EXPECT_EQ(one[0][6], 0);
  const auto two = sf::label_views(spec, {{disc}, {square}});
  EXPECT_EQ(two[0][6], 1);
  EXPECT_EQ(two[1][6], 1);
  EXPECT_EQ(two[0][0], 1);
  EXPECT_EQ(two[1][0], 0);
}

TEST(Synthetic, SpecValidation) {
  auto s = small_spec(1);
  s.max_views = 17;
  EXPECT_THROW(s.validate(), sf::ContractError);
  s = small_spec(1);
  s.labels.push_back({"bad", sf::ShapeKind::xcross, std::nullopt});
  EXPECT_THROW(s.validate(), sf::ContractError);
  EXPECT_THROW(sf::parse_shape("hexagon"), sf::ValidationError);
}
