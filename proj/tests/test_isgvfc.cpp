#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "support/oracles.hpp"
#include "vfetps/core/gradcheck.hpp"
#include "vfetps/core/ops.hpp"
#include "vfetps/core/rng.hpp"
#include "vfetps/model/isgvfc.hpp"
#include "vfetps/nn/adam.hpp"
#include "vfetps/nn/layers.hpp"

using namespace vfetps;
using T64 = Tensor<double>;

namespace {

T64 normal_tensor(Shape shape, Rng& rng, double sd = 1.0, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return T64(std::move(shape), std::move(v), grad);
}

// Rows share one direction plus small per-row noise, so cos/tau stays out of
// softmax saturation.
T64 clustered(std::size_t n, std::size_t d, Rng& rng, double spread, bool grad = true) {
  std::vector<double> centre(d), v(n * d);
  for (auto& c : centre) c = rng.normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] = centre[j] + rng.normal(0.0, spread);
  return T64({n, d}, std::move(v), grad);
}

double cosine_gap(const T64& f, const std::vector<std::int64_t>& pids) {
  const auto n = f.dim(0), d = f.dim(1);
  const auto v = f.values();
  double same = 0, cross = 0;
  std::size_t ns = 0, nc = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (pids[i] == pids[j]) {
        same += oracle::cosine(v, i, v, j, d);
        ++ns;
      } else {
        cross += oracle::cosine(v, i, v, j, d);
        ++nc;
      }
    }
  return same / static_cast<double>(ns) - cross / static_cast<double>(nc);
}

}  // namespace

TEST(SamplePairs, SingleIdentityGivesAllOnesAndUniformTargets) {
  Rng rng(1);
  const std::vector<std::int64_t> pids(6, 7);
  const auto s = sample_pairs(pids, 4, rng);
  EXPECT_EQ(s.labels, std::vector<std::uint8_t>(16, 1));
  for (double q : match_targets(s.labels, 4)) EXPECT_EQ(q, 0.25);
}

TEST(SamplePairs, DistinctIdentitiesGiveIdentityMatrix) {
  Rng rng(2);
  const std::vector<std::int64_t> pids{0, 1, 2, 3, 4};
  const auto s = sample_pairs(pids, 5, rng);
  const auto q = match_targets(s.labels, 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_EQ(s.labels[i * 5 + j], i == j ? 1 : 0);
      EXPECT_EQ(q[i * 5 + j], i == j ? 1.0 : 0.0);
    }
}

TEST(SamplePairs, PaperDefaultsDrawTwentyDistinctAnchors) {
  Rng rng(3);
  std::vector<std::int64_t> pids(100);
  for (std::size_t i = 0; i < 100; ++i) pids[i] = static_cast<std::int64_t>(i / 2);
  const auto s = sample_pairs(pids, 20, rng);
  EXPECT_EQ(s.size(), 20u);
  EXPECT_EQ(std::set<std::size_t>(s.indices.begin(), s.indices.end()).size(), 20u);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(s.pids[i], pids[s.indices[i]]);
}

TEST(SamplePairs, LabelsMatchIdentitiesIncludingDiagonal) {
  Rng rng(4);
  const std::vector<std::int64_t> pids{3, 1, 3, 2, 1, 3, 0, 2};
  const auto s = sample_pairs(pids, 6, rng);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(s.labels[i * 6 + j], s.pids[i] == s.pids[j] ? 1 : 0);
}

TEST(SamplePairs, AlwaysContainsACrossPositiveWhenTheBatchHasOne) {
  std::vector<std::int64_t> pids(20);
  for (std::size_t i = 0; i < 20; ++i) pids[i] = static_cast<std::int64_t>(i);
  pids[17] = 4;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const auto s = sample_pairs(pids, 3, rng);
    EXPECT_TRUE(s.has_cross_positive()) << "seed " << seed;
    EXPECT_EQ(std::set<std::size_t>(s.indices.begin(), s.indices.end()).size(), 3u);
  }
}

TEST(SamplePairs, InvalidSizesAreConfigErrors) {
  Rng rng(5);
  const std::vector<std::int64_t> pids{0, 1, 2};
  EXPECT_THROW(sample_pairs(pids, 4, rng), ConfigError);
  const std::vector<std::int64_t> one{0};
  EXPECT_THROW(sample_pairs(one, 1, rng), ConfigError);
}

TEST(MatchProb, OrthogonalUnitFeaturesAtUnitTemperature) {
  const auto p = match_prob(T64({2, 2}, {1, 0, 0, 1}), 1.0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(p.at(0, 0), e / (e + 1), 1e-15);
  EXPECT_NEAR(p.at(0, 1), 1 / (e + 1), 1e-15);
  EXPECT_NEAR(p.at(1, 0), 1 / (e + 1), 1e-15);
  EXPECT_NEAR(p.at(1, 1), e / (e + 1), 1e-15);
}

TEST(MatchProb, InvariantToPositiveRescaling) {
  Rng rng(6);
  const auto f = normal_tensor({5, 8}, rng);
  auto g = T64(f.shape(), f.values());
  auto v = g.mutable_data();
  for (std::size_t j = 0; j < 8; ++j) v[2 * 8 + j] *= 37.5;
  const auto a = match_prob(f, 0.5), b = match_prob(g, 0.5);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(MatchProb, MatchesDoubleLoopOracle) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    const auto f = normal_tensor({5, 8}, rng);
    const double tau = 0.1 + rng.uniform();
    const auto p = match_prob(f, tau);
    const auto ref = oracle::match_prob(f.values(), f.values(), 5, 8, tau);
    for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(p[i], ref[i], 1e-10);
  }
}

TEST(MatchProb, RowsSumToOneAndEntriesInUnitInterval) {
  Rng rng(7);
  const auto p = match_prob(normal_tensor({6, 4}, rng), 0.02);
  for (std::size_t i = 0; i < 6; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_GE(p.at(i, j), 0.0);
      EXPECT_LE(p.at(i, j), 1.0);
      row += p.at(i, j);
    }
    EXPECT_NEAR(row, 1.0, 1e-6);
  }
}

TEST(MatchProb, NonPositiveTemperatureIsConfigError) {
  Rng rng(8);
  EXPECT_THROW(match_prob(normal_tensor({3, 4}, rng), 0.0), ConfigError);
  EXPECT_THROW(match_prob(normal_tensor({3, 4}, rng), -1.0), ConfigError);
}

TEST(IsgvfcLoss, HandExampleUniformPredictionAgainstIdentityTargets) {
  const double eps = 1e-8;
  const auto dist = MatchDistribution<double>::from_probabilities(T64({2, 2}, {0.5, 0.5, 0.5, 0.5}), {1, 0, 0, 1});
  const double row = 0.5 * std::log(0.5 / (0 + eps)) + 0.5 * std::log(0.5 / (1 + eps));
  EXPECT_NEAR(isgvfc_loss(dist, eps).item(), row, 1e-12);
  EXPECT_NEAR(row, 8.52, 5e-3);
}

TEST(IsgvfcLoss, ExactMatchIsEpsilonSmall) {
  const auto dist =
      MatchDistribution<double>::from_probabilities(T64({2, 2}, {0.5, 0.5, 0.5, 0.5}), {0.5, 0.5, 0.5, 0.5});
  const double l = isgvfc_loss(dist, 1e-8).item();
  EXPECT_LE(l, 0.0);
  EXPECT_GE(l, -2e-8);
}

TEST(IsgvfcLoss, MatchesLoopOracleAndLowerBound) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    const std::vector<std::int64_t> pids{0, 1, 0, 2, 1, 0};
    const auto f = normal_tensor({6, 8}, rng, 1.0, false);
    const double tau = 0.05 + rng.uniform();
    const auto dist = match_distribution(f, identity_labels(pids), tau);
    const double got = isgvfc_loss(dist, 1e-8).item();
    EXPECT_NEAR(got, oracle::isgvfc(f.values(), pids, 8, tau, 1e-8), 1e-10 * std::max(1.0, std::abs(got)));
    EXPECT_GE(got, -1e-6);
  }
}

TEST(IsgvfcLoss, GradientPassesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const std::vector<std::int64_t> pids{0, 0, 1, 1};
    auto f = clustered(4, 8, rng, 0.1);
    const auto labels = identity_labels(pids);
    const std::function<T64()> fn = [&] { return isgvfc_loss(match_distribution(f, labels, 0.02), 1e-8); };
    EXPECT_LE(finite_difference_check<double>(fn, {f}).max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(IsgvfcLoss, GradientStepsSeparateIdentities) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng(seed);
    const std::vector<std::int64_t> pids{0, 0, 1, 1, 2, 2, 3, 3};
    auto f = clustered(8, 16, rng, 0.3);
    const auto labels = identity_labels(pids);
    const double loss0 = isgvfc_loss(match_distribution(f, labels, 0.02)).item();
    const double gap0 = cosine_gap(f, pids);
    nn::Adam<double> opt({f}, {.lr = 0.01});
    for (int step = 0; step < 100; ++step) {
      f.zero_grad();
      backward(isgvfc_loss(match_distribution(f, labels, 0.02)));
      opt.step();
    }
    const double loss = isgvfc_loss(match_distribution(f, labels, 0.02)).item();
    EXPECT_LT(loss, loss0) << "seed " << seed;
    EXPECT_GT(cosine_gap(f, pids), gap0) << "seed " << seed;
  }
}

TEST(IdLoss, UniformLogitsGiveLogK) {
  Rng rng(9);
  nn::ParameterStore<double> store;
  nn::Linear<double> clf(store, "clf", 8, 5, rng);
  for (auto& x : clf.weight().mutable_data()) x = 0.0;
  const std::vector<std::size_t> cls{0, 3, 4};
  EXPECT_NEAR(id_loss(normal_tensor({3, 8}, rng), cls, clf).item(), std::log(5.0), 1e-12);
}

TEST(IdLoss, LargeMarginOneHotLogitsGiveNearZero) {
  Rng rng(10);
  nn::ParameterStore<double> store;
  nn::Linear<double> clf(store, "clf", 3, 3, rng);
  auto w = clf.weight().mutable_data();
  for (std::size_t i = 0; i < 9; ++i) w[i] = i % 4 == 0 ? 100.0 : 0.0;
  const std::vector<std::size_t> cls{0, 1, 2};
  EXPECT_LT(id_loss(T64({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), cls, clf).item(), 1e-30);
}

TEST(IdLoss, MatchesSoftmaxCrossEntropyOracle) {
  Rng rng(11);
  nn::ParameterStore<double> store;
  nn::Linear<double> clf(store, "clf", 6, 4, rng, true, 0.5);
  for (auto& x : clf.bias().mutable_data()) x = rng.normal(0.0, 0.5);
  const auto f = normal_tensor({5, 6}, rng);
  const std::vector<std::size_t> cls{1, 0, 3, 3, 2};
  const auto w = clf.weight().values(), b = clf.bias().values();
  double expected = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> logit(4);
    for (std::size_t k = 0; k < 4; ++k) {
      logit[k] = b[k];
      for (std::size_t j = 0; j < 6; ++j) logit[k] += f.at(i, j) * w[j * 4 + k];
    }
    double z = 0;
    for (double l : logit) z += std::exp(l);
    expected -= logit[cls[i]] - std::log(z);
  }
  EXPECT_NEAR(id_loss(f, cls, clf).item(), expected / 5, 1e-10);
}

TEST(IdLoss, ClassOutsideRangeIsContractError) {
  Rng rng(12);
  nn::ParameterStore<double> store;
  nn::Linear<double> clf(store, "clf", 4, 3, rng);
  const std::vector<std::size_t> cls{0, 3};
  EXPECT_THROW(id_loss(normal_tensor({2, 4}, rng), cls, clf), ContractError);
}

TEST(TripletLoss, IdenticalFeaturesGiveMargin) {
  const std::vector<double> row{0.3, -1.2, 0.7};
  std::vector<double> v;
  for (int i = 0; i < 4; ++i) v.insert(v.end(), row.begin(), row.end());
  const std::vector<std::int64_t> pids{0, 0, 1, 1};
  EXPECT_NEAR(triplet_loss(T64({4, 3}, v), pids, 0.3).item(), 0.3, 1e-12);
}

TEST(TripletLoss, SeparatedIdentitiesGiveZero) {
  const std::vector<std::int64_t> pids{0, 0, 1, 1};
  const T64 f({4, 2}, {1, 0, 2, 0, 0, 1, 0, 3});
  EXPECT_EQ(triplet_loss(f, pids, 0.5).item(), 0.0);
}

TEST(TripletLoss, NoValidTripleGivesZero) {
  Rng rng(13);
  const std::vector<std::int64_t> pids{0, 1, 2};
  EXPECT_EQ(triplet_loss(normal_tensor({3, 4}, rng), pids, 0.3).item(), 0.0);
}

TEST(TripletLoss, MatchesExhaustiveMiningOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const std::size_t n = 3 + rng.below(4);
    std::vector<std::int64_t> pids(n);
    for (auto& p : pids) p = static_cast<std::int64_t>(rng.below(3));
    const auto f = normal_tensor({n, 4}, rng);
    const double margin = 0.2;
    const auto v = f.values();
    double total = 0;
    std::size_t anchors = 0;
    for (std::size_t a = 0; a < n; ++a) {
      double hardest_pos = -1, hardest_neg = 1e300;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == a) continue;
        const double dist = 1.0 - oracle::cosine(v, a, v, j, 4);
        if (pids[j] == pids[a]) hardest_pos = std::max(hardest_pos, dist);
        else hardest_neg = std::min(hardest_neg, dist);
      }
      if (hardest_pos < 0 || hardest_neg == 1e300) continue;
      total += std::max(0.0, hardest_pos - hardest_neg + margin);
      ++anchors;
    }
    const double expected = anchors ? total / static_cast<double>(anchors) : 0.0;
    EXPECT_NEAR(triplet_loss(f, pids, margin).item(), expected, 1e-12) << "seed " << seed;
  }
}
