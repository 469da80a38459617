// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "../oracles/oracles.hpp"
#include "robustseg/distill_core.hpp"
#include "test_util.hpp"

using namespace robustseg;

namespace {

template <typename F>
double central(F f, double& x, double h = 1e-6) {
  const double o = x;
  x = o + h;
  const double a = f();
  x = o - h;
  const double b = f();
  x = o;
  return (a - b) / (2 * h);
}

std::vector<const FeatureMap<double>*> ptrs(const std::vector<FeatureMap<double>>& v) {
  std::vector<const FeatureMap<double>*> p;
  for (const auto& m : v) p.push_back(&m);
  return p;
}

}  // namespace

TEST(Softmax, MatchesOracleAndIsStable) {
  const std::vector<double> x = {1.0, -2.0, 0.5, 3.0};
  const auto p = prob_normalize(x);
  const auto q = oracle::softmax(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-14);
  const auto big = prob_normalize(std::vector<double>{1000.0, 1000.0});
  EXPECT_DOUBLE_EQ(big[0], 0.5);
  EXPECT_THROW(prob_normalize(std::vector<double>{0.0, std::nan("")}), ContractError);
}

TEST(KlRow, MatchesOracleBothDirections) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(5), t(5);
    for (auto& v : s) v = 2 * rng.normal();
    for (auto& v : t) v = 2 * rng.normal();
    EXPECT_NEAR(kl_row<double>(s, t, KlDirection::kTeacherStudent), oracle::kl(s, t, true), 1e-12);
    EXPECT_NEAR(kl_row<double>(s, t, KlDirection::kStudentTeacher), oracle::kl(s, t, false), 1e-12);
    EXPECT_GE(kl_row<double>(s, t, KlDirection::kTeacherStudent), -1e-15);
  }
  std::vector<double> s = {0.3, 0.1, -0.4};
  EXPECT_NEAR(kl_row<double>(s, s, KlDirection::kTeacherStudent), 0.0, 1e-15);
  // Shift invariance.
  std::vector<double> s2 = {10.3, 10.1, 9.6};
  EXPECT_NEAR(kl_row<double>(s, s2, KlDirection::kStudentTeacher), 0.0, 1e-12);
}

TEST(KlRow, GradientMatchesFiniteDifference) {
  Rng rng(2);
  for (auto dir : {KlDirection::kTeacherStudent, KlDirection::kStudentTeacher}) {
    std::vector<double> s(6), t(6), g(6);
    for (auto& v : s) v = rng.normal();
    for (auto& v : t) v = rng.normal();
    kl_row<double>(s, t, dir, g);
    for (std::size_t c = 0; c < s.size(); ++c) {
      const double fd = central([&] { return kl_row<double>(s, t, dir); }, s[c]);
      EXPECT_NEAR(g[c], fd, 1e-8);
    }
  }
}

TEST(CeLoss, UniformLogitsGiveLogC) {
  FeatureMap<double> x(4, 4, 6);
  LabelGrid y(4, 4, 2);
  const auto r = ce_loss<double>({&x}, {&y});
  EXPECT_NEAR(r.value, std::log(6.0), 1e-12);
  EXPECT_EQ(r.counted, 16u);
}

TEST(CeLoss, IgnoreAndErrors) {
  Rng rng(3);
  auto x = testutil::random_map<double>(4, 4, 3, rng);
  LabelGrid y = testutil::random_labels(4, 4, 3, rng, 0.3);
  const auto r = ce_loss<double>({&x}, {&y});
  double ref = 0;
  int n = 0;
  for (std::size_t p = 0; p < 16; ++p) {
    if (y.data[p] == kIgnoreLabel) continue;
    ref -= std::log(oracle::softmax(oracle::row(x, p / 4, p % 4))[y.data[p]]);
    ++n;
  }
  EXPECT_NEAR(r.value, ref / n, 1e-12);

  LabelGrid ign(4, 4, kIgnoreLabel);
  const auto z = ce_loss<double>({&x}, {&ign});
  EXPECT_TRUE(z.all_ignored);
  EXPECT_EQ(z.value, 0.0);

  LabelGrid bad(4, 4, 7);
  EXPECT_THROW(ce_loss<double>({&x}, {&bad}), ContractError);
  LabelGrid small(2, 2, 0);
  EXPECT_THROW(ce_loss<double>({&x}, {&small}), ContractError);
}

TEST(LOrigin, ValueAndGradient) {
  Rng rng(4);
  std::vector<FeatureMap<double>> s, t;
  std::vector<LabelGrid> y;
  for (int n = 0; n < 2; ++n) {
    s.push_back(testutil::random_map<double>(3, 3, 4, rng));
    t.push_back(testutil::random_map<double>(3, 3, 4, rng));
    y.push_back(testutil::random_labels(3, 3, 4, rng, 0.2));
  }
  std::vector<const LabelGrid*> yp = {&y[0], &y[1]};
  for (auto dir : {KlDirection::kTeacherStudent, KlDirection::kStudentTeacher}) {
    const auto r = l_origin<double>(ptrs(s), ptrs(t), yp, 50.0, dir);
    double ce = 0, kl = 0;
    int cnt = 0;
    for (int n = 0; n < 2; ++n) {
      for (std::size_t p = 0; p < 9; ++p) {
        if (y[n].data[p] == kIgnoreLabel) continue;
        const auto sr = oracle::row(s[n], p / 3, p % 3), tr = oracle::row(t[n], p / 3, p % 3);
        ce -= std::log(oracle::softmax(sr)[y[n].data[p]]);
        kl += oracle::kl(sr, tr, dir == KlDirection::kTeacherStudent);
        ++cnt;
      }
    }
    EXPECT_NEAR(r.ce, ce / cnt, 1e-12);
    EXPECT_NEAR(r.kl, kl / cnt, 1e-12);
    EXPECT_NEAR(r.total, r.ce + 50.0 * r.kl, 1e-10);
    for (int n = 0; n < 2; ++n) {
      for (std::size_t i = 0; i < s[n].data.size(); i += 5) {
        const double fd = central(
            [&] { return l_origin<double>(ptrs(s), ptrs(t), yp, 50.0, dir, false).total; }, s[n].data[i]);
        EXPECT_NEAR(r.grad[n].data[i], fd, 1e-6);
      }
    }
  }
  // lambda = 0 reduces to CE; identical logits make the KL vanish.
  const auto ce_only = l_origin<double>(ptrs(s), ptrs(t), yp, 0.0);
  EXPECT_EQ(ce_only.total, ce_only.ce);
  const auto same = l_origin<double>(ptrs(s), ptrs(s), yp, 50.0);
  EXPECT_NEAR(same.kl, 0.0, 1e-14);
}

TEST(TotalLoss, CompositionAndMissingTerms) {
  LossWeights w;
  const auto b = total_loss({1.5, 0.2, 0.01}, w);
  EXPECT_NEAR(b.total, 1.5 + 100 * 0.2 + 12 * 0.01, 1e-12);
  EXPECT_THROW(total_loss({1.5, std::nullopt, 0.01}, w), CompositionError);
  EXPECT_THROW(total_loss({1.5, 0.2, std::nullopt}, w), CompositionError);
  w.prototype_mode = PrototypeMode::kOff;
  w.regularizer_mode = RegularizerMode::kOff;
  EXPECT_EQ(total_loss({1.5, std::nullopt, std::nullopt}, w).total, 1.5);
  w.lambda = -1;
  EXPECT_THROW(w.validate(), ConfigError);
}

TEST(Dropout, UniformSubsetFrequencies) {
  DropoutPolicy pol;
  Rng rng(5);
  std::vector<int> hist(16, 0);
  const int n = 150000;
  for (int i = 0; i < n; ++i) ++hist[sample_dropout_subset(pol, 4, rng)];
  EXPECT_EQ(hist[0], 0);
  for (int m = 1; m < 16; ++m) EXPECT_NEAR(hist[m] / double(n), 1.0 / 15, 0.004) << m;
}

TEST(Dropout, BernoulliAndWeighted) {
  DropoutPolicy pol;
  pol.kind = DropoutPolicy::Kind::kBernoulli;
  pol.keep_prob = 0.5;
  Rng rng(6);
  std::vector<int> hist(16, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++hist[sample_dropout_subset(pol, 4, rng)];
  EXPECT_EQ(hist[0], 0);
  for (int m = 1; m < 16; ++m) EXPECT_NEAR(hist[m] / double(n), 1.0 / 15, 0.005);

  pol.kind = DropoutPolicy::Kind::kWeighted;
  pol.weights.assign(16, 0.0);
  pol.weights[3] = 0.25;
  pol.weights[15] = 0.75;
  EXPECT_NO_THROW(pol.validate(4));
  int full = 0;
  for (int i = 0; i < n; ++i) {
    const auto m = sample_dropout_subset(pol, 4, rng);
    ASSERT_TRUE(m == 3 || m == 15);
    full += m == 15;
  }
  EXPECT_NEAR(full / double(n), 0.75, 0.01);
  pol.weights[0] = 0.1;
  EXPECT_THROW(pol.validate(4), ConfigError);
  pol.weights.assign(8, 0.0);
  EXPECT_THROW(pol.validate(4), ConfigError);
}
