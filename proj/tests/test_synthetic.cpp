#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "support/oracles.hpp"

using namespace mcvi;

namespace {

double column_variance(const Matrix& x, std::size_t j) {
  double mean = 0.0;
  for (std::size_t s = 0; s < x.rows(); ++s) mean += x(s, j);
  mean /= static_cast<double>(x.rows());
  double var = 0.0;
  for (std::size_t s = 0; s < x.rows(); ++s) var += (x(s, j) - mean) * (x(s, j) - mean);
  return var / static_cast<double>(x.rows());
}

ScenarioSpec small_spec() { return {2, 6, 3, 200, 10.0, 1, 0}; }

}  // namespace

TEST(GenerateScenario, LoadingRowsHaveUnitNorm) {
  for (const auto& spec : {small_spec(), preset("elbow"), preset("channels-2")}) {
    const auto ds = generate_scenario(spec);
    for (const auto& g : ds.loadings)
      for (std::size_t j = 0; j < g.rows(); ++j) EXPECT_NEAR(std::sqrt(dot(g.row(j), g.row(j))), 1.0, 1e-10);
  }
}

TEST(GenerateScenario, BasesHaveOrthonormalColumns) {
  const auto ds = generate_scenario(preset("elbow"));
  for (const auto& r : ds.bases)
    EXPECT_LE(max_abs_diff(oracle::mul(oracle::tr(r), r), Matrix::identity(r.cols())), 1e-10);
}

TEST(GenerateScenario, LoadingsAreRowScaledBases) {
  const auto ds = generate_scenario(small_spec());
  for (std::size_t c = 0; c < ds.loadings.size(); ++c) {
    const Matrix& r = ds.bases[c];
    const Matrix rrt = oracle::mul(r, oracle::tr(r));
    for (std::size_t j = 0; j < r.rows(); ++j)
      for (std::size_t k = 0; k < r.cols(); ++k)
        EXPECT_NEAR(ds.loadings[c](j, k), r(j, k) / std::sqrt(rrt(j, j)), 1e-12);
  }
}

TEST(GenerateScenario, CoordinateVarianceFollowsSnr) {
  for (double snr : {100.0, 10.0, 1.0, 0.1}) {
    const auto ds = generate_scenario({3, 16, 4, 10000, snr, 1, 0});
    const double target = 1.0 + 1.0 / snr;
    for (const auto& x : ds.channels)
      for (std::size_t j = 0; j < x.cols(); ++j)
        EXPECT_NEAR(column_variance(x, j), target, 0.05 * target) << "snr " << snr << " coord " << j;
  }
}

TEST(GenerateScenario, NoiseVarianceIsInverseSnr) {
  const auto ds = generate_scenario({2, 8, 2, 1000, 4.0, 1, 0});
  for (std::size_t c = 0; c < 2; ++c) {
    Matrix noise = ds.channels[c];
    for (std::size_t k = 0; k < noise.size(); ++k) noise.values()[k] -= ds.signals[c].values()[k];
    for (std::size_t j = 0; j < noise.cols(); ++j) EXPECT_NEAR(column_variance(noise, j), 0.25, 0.025);
  }
}

TEST(GenerateScenario, NoiselessHookGivesSignalExactly) {
  const auto ds = generate_scenario(small_spec(), {true});
  for (std::size_t c = 0; c < ds.channels.size(); ++c) {
    EXPECT_EQ(ds.channels[c], ds.signals[c]);
    EXPECT_LE(max_abs_diff(ds.channels[c], oracle::mul(ds.z, oracle::tr(ds.loadings[c]))), 1e-12);
  }
}

TEST(GenerateScenario, CrossChannelSignalHasRankL) {
  const auto ds = generate_scenario({3, 16, 4, 10000, 100.0, 1, 0});
  const Matrix& a = ds.channels[0];
  const Matrix& b = ds.channels[1];
  Matrix cross = oracle::mul(oracle::tr(a), b);
  for (double& v : cross.values()) v /= static_cast<double>(a.rows());
  const auto eig = symmetric_eigen(oracle::mul(oracle::tr(cross), cross));
  const double sv_l = std::sqrt(eig.values[3]);
  const double sv_next = std::sqrt(std::max(eig.values[4], 0.0));
  EXPECT_GE(sv_l, 5.0 * sv_next);
}

TEST(GenerateScenario, RejectsLatentLargerThanDim) {
  try {
    generate_scenario({3, 4, 10, 100, 10.0, 1, 0});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("smaller than the latent dimension"), std::string::npos);
  }
  EXPECT_THROW(generate_scenario({3, 4, 2, 100, 0.0, 1, 0}), DataError);
  EXPECT_THROW(generate_scenario({0, 4, 2, 100, 1.0, 1, 0}), DataError);
}

TEST(GenerateScenario, SeedIsPureFunctionOfSpec) {
  const auto a = generate_scenario(small_spec());
  const auto b = generate_scenario(small_spec());
  EXPECT_EQ(a.channels, b.channels);
  ScenarioSpec other = small_spec();
  other.replication = 2;
  const auto c = generate_scenario(other);
  EXPECT_NE(a.bases, c.bases);
}

TEST(EnumerateGrid, Counts) {
  GridRanges only_c = GridRanges::none();
  only_c.channels = {2, 3, 5, 10};
  EXPECT_EQ(enumerate_grid(default_base_scenario(), only_c).size(), 20u);
  const auto full = enumerate_grid(default_base_scenario());
  EXPECT_EQ(full.size(), 110u);
  // One-at-a-time: every spec differs from the base in at most one attribute.
  const auto base = default_base_scenario();
  for (const auto& s : full) {
    const int diffs = (s.channels != base.channels) + (s.dim != base.dim) + (s.latent_dim != base.latent_dim) +
                      (s.samples != base.samples) + (s.snr != base.snr);
    EXPECT_LE(diffs, 1);
    EXPECT_GE(s.replication, 1u);
    EXPECT_LE(s.replication, 5u);
  }
}

TEST(EnumerateGrid, DeterministicRegeneration) {
  GridRanges r = GridRanges::none();
  r.snrs = {100, 0.1};
  r.replications = 2;
  ScenarioSpec base = default_base_scenario();
  base.samples = 60;
  const auto a = enumerate_grid(base, r);
  const auto b = enumerate_grid(base, r);
  ASSERT_EQ(a, b);
  for (std::size_t k = 0; k < a.size(); ++k)
    EXPECT_EQ(generate_scenario(a[k]).channels, generate_scenario(b[k]).channels);
}

TEST(TrainTestSplit, SizesUnionAndDeterminism) {
  ScenarioSpec spec = small_spec();
  spec.samples = 100;
  const auto ds = generate_scenario(spec);
  const auto [train, test] = train_test_split(ds, 0.2, 9);
  EXPECT_EQ(train.samples(), 80u);
  EXPECT_EQ(test.samples(), 20u);
  std::set<std::size_t> all(train.sample_index.begin(), train.sample_index.end());
  all.insert(test.sample_index.begin(), test.sample_index.end());
  EXPECT_EQ(all.size(), 100u);
  const auto [train2, test2] = train_test_split(ds, 0.2, 9);
  EXPECT_EQ(train.sample_index, train2.sample_index);
  EXPECT_EQ(test.sample_index, test2.sample_index);
}

TEST(TrainTestSplit, RowsStayAlignedAcrossChannelsAndTruth) {
  const auto ds = generate_scenario(small_spec());
  const auto [train, test] = train_test_split(ds, 0.3, 4);
  for (const auto* part : {&train, &test}) {
    for (std::size_t k = 0; k < part->samples(); ++k) {
      const std::size_t orig = part->sample_index[k];
      for (std::size_t j = 0; j < ds.z.cols(); ++j) ASSERT_EQ(part->z(k, j), ds.z(orig, j));
      for (std::size_t c = 0; c < ds.channels.size(); ++c) {
        for (std::size_t j = 0; j < ds.channels[c].cols(); ++j) {
          ASSERT_EQ(part->channels[c](k, j), ds.channels[c](orig, j));
          ASSERT_EQ(part->signals[c](k, j), ds.signals[c](orig, j));
        }
      }
    }
  }
}

TEST(TrainTestSplit, RejectsDegenerateFractions) {
  ScenarioSpec spec = small_spec();
  spec.samples = 4;
  const auto ds = generate_scenario(spec);
  EXPECT_THROW(train_test_split(ds, 0.0, 1), DataError);
  EXPECT_THROW(train_test_split(ds, 1.0, 1), DataError);
  EXPECT_THROW(train_test_split(ds, 0.05, 1), DataError);
}

TEST(Presets, AllNamesResolve) {
  for (const auto& name : preset_names()) EXPECT_NO_THROW(preset(name).validate()) << name;
  EXPECT_THROW(preset("nope"), DataError);
  const auto e = preset("elbow");
  EXPECT_EQ(e.channels, 10u);
  EXPECT_EQ(e.dim, 32u);
  EXPECT_EQ(e.latent_dim, 4u);
}
