#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "cvil/density.hpp"
#include "support.hpp"

using namespace cvil;
using testing_support::error_code_of;
using testing_support::scores_of;

namespace {

std::vector<std::size_t> indices_of(const SelectionResult& r) {
  std::vector<std::size_t> out;
  for (const auto& it : r.items) out.push_back(it.index);
  return out;
}

}  // namespace

TEST(BandwidthTest, SilvermanRuleAndFloor) {
  std::vector<double> v{1.0, 2.0, 3.0, 4.0, 5.0};
  // sd = sqrt(2.5), IQR = 4 - 2 = 2 -> min(1.5811, 1.4925)
  const double expected = 0.9 * std::min(std::sqrt(2.5), 2.0 / 1.34) * std::pow(5.0, -0.2);
  EXPECT_NEAR(silverman_bandwidth(v), expected, 1e-12);
  EXPECT_DOUBLE_EQ(silverman_bandwidth(std::vector<double>{3.0, 3.0, 3.0}), kMinBandwidth);
  EXPECT_DOUBLE_EQ(silverman_bandwidth(std::vector<double>{0.5}), kMinBandwidth);
}

TEST(BandwidthTest, ZeroIqrFallsBackToStandardDeviation) {
  std::vector<double> v{0, 0, 0, 0, 0, 0, 0, 0, 0, 10};
  const double mean = 1.0;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / 9.0);
  EXPECT_NEAR(silverman_bandwidth(v), 0.9 * sd * std::pow(10.0, -0.2), 1e-12);
}

TEST(KdeTest, SingleValuePeak) {
  auto c = kde_curve(std::vector<double>{0.4}, 2);
  ASSERT_EQ(c.x.size(), kDensityPoints);
  EXPECT_EQ(c.class_id, 2);
  EXPECT_EQ(c.count, 1u);
  const double peak = *std::max_element(c.y.begin(), c.y.end());
  EXPECT_NEAR(peak, 1.0 / (c.bandwidth * std::sqrt(2.0 * std::numbers::pi)), 1e-3 * peak);
  const auto at = std::max_element(c.y.begin(), c.y.end()) - c.y.begin();
  EXPECT_NEAR(c.x[static_cast<std::size_t>(at)], 0.4, c.x[1] - c.x[0]);
  for (std::size_t i = 0; i < c.y.size(); ++i) EXPECT_NEAR(c.y[i], c.y[c.y.size() - 1 - i], 1e-9 * peak);
}

TEST(KdeTest, AllEqualValuesUseTheFloor) {
  auto c = kde_curve(std::vector<double>(20, 0.0));
  EXPECT_DOUBLE_EQ(c.bandwidth, kMinBandwidth);
  EXPECT_NEAR(c.x.front() + c.x.back(), 0.0, 1e-12);
  EXPECT_NEAR(curve_integral(c), 1.0, 0.02);
}

TEST(KdeTest, UniformValuesIntegrateToOne) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(1000);
  for (auto& x : v) x = u(rng);
  auto c = kde_curve(v);
  EXPECT_NEAR(oracle::trapezoid(c.x, c.y), 1.0, 0.02);
  EXPECT_DOUBLE_EQ(curve_integral(c), oracle::trapezoid(c.x, c.y));
  EXPECT_DOUBLE_EQ(c.value_min, *std::min_element(v.begin(), v.end()));
  EXPECT_DOUBLE_EQ(c.value_max, *std::max_element(v.begin(), v.end()));
}

TEST(KdeTest, EmptyAndInvalidInput) {
  auto c = kde_curve(std::vector<double>{}, 1);
  EXPECT_TRUE(c.empty());
  EXPECT_EQ(c.class_id, 1);
  EXPECT_EQ(error_code_of([] { kde_curve(std::vector<double>{0.1, std::nan("")}); }), errc::kNonFinite);
}

TEST(KdeTest, NonNegativeAndPermutationInvariant) {
  std::mt19937_64 rng(2);
  std::exponential_distribution<double> e(3.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(2 + rng() % 300);
    for (auto& x : v) x = e(rng);
    auto a = kde_curve(v);
    std::shuffle(v.begin(), v.end(), rng);
    auto b = kde_curve(v);
    for (double y : a.y) EXPECT_GE(y, 0.0);
    EXPECT_EQ(a.x, b.x);
    for (std::size_t i = 0; i < a.y.size(); ++i) EXPECT_NEAR(a.y[i], b.y[i], 1e-9 * (1.0 + a.y[i]));
  }
}

class SelectionTest : public ::testing::Test {
 protected:
  // Class 0 partition: a(0)=0.2, b(1)=0.5, c(2)=0.9; class 1: d(3)=0.4.
  PropertyScores scores = scores_of({0.2, 0.5, 0.9, 0.4}, {0, 0, 0, 1}, 2);
  LabelLedger ledger{4};
};

TEST_F(SelectionTest, RangeFilterAndSort) {
  auto r = resolve_selection({0, 0.1, 0.6}, scores, ledger, 10);
  EXPECT_EQ(indices_of(r), (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(r.total, 2u);
}

TEST_F(SelectionTest, TruncationKeepsTotal) {
  auto r = resolve_selection({0, 0.0, 1.0}, scores, ledger, 1);
  EXPECT_EQ(indices_of(r), (std::vector<std::size_t>{2}));
  EXPECT_EQ(r.total, 3u);
  EXPECT_TRUE(resolve_selection({0, 0.0, 1.0}, scores, ledger, 0).items.empty());
}

TEST_F(SelectionTest, ClosedIntervalBoundary) {
  auto r = resolve_selection({0, 0.5, 0.5}, scores, ledger, 10);
  EXPECT_EQ(indices_of(r), (std::vector<std::size_t>{1}));
  EXPECT_EQ(r.total, 1u);
}

TEST_F(SelectionTest, LabeledInstancesAreExcluded) {
  ledger.label_instance(1, 0);
  ledger.label_batch(2, 0);
  auto r = resolve_selection({0, 0.0, 1.0}, scores, ledger, 10);
  EXPECT_EQ(indices_of(r), (std::vector<std::size_t>{0}));
}

TEST_F(SelectionTest, Errors) {
  EXPECT_EQ(error_code_of([&] { resolve_selection({5, 0.0, 1.0}, scores, ledger, 10); }), errc::kUnknownClass);
  EXPECT_EQ(error_code_of([&] { resolve_selection({0, 0.7, 0.1}, scores, ledger, 10); }),
            errc::kInvalidArgument);
}

TEST(HoverTest, Examples) {
  auto s = scores_of({0.1, 0.4, 0.7}, {0, 0, 0}, 2);
  LabelLedger l(3);
  EXPECT_EQ(indices_of(hover_preview(0, 0.5, s, l, 10)), (std::vector<std::size_t>{1, 0}));
  EXPECT_TRUE(hover_preview(0, 0.05, s, l, 10).items.empty());
  EXPECT_EQ(hover_preview(0, 0.05, s, l, 10).total, 0u);
  EXPECT_TRUE(hover_preview(1, 0.5, s, l, 10).items.empty());
}

TEST(HoverTest, MaximumEqualsFullRangeSelection) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    std::vector<double> v(n);
    std::vector<ClassId> c(n);
    LabelLedger l(n);
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = static_cast<double>(rng() % 100) / 100.0;
      c[i] = static_cast<ClassId>(rng() % 3);
      if (rng() % 5 == 0) l.label_instance(i, c[i]);
    }
    auto s = scores_of(v, c, 3);
    for (ClassId k = 0; k < 3; ++k) {
      auto part = unlabeled_partition(k, s, l);
      if (part.empty()) continue;
      double lo = part.front().value, hi = part.front().value;
      for (const auto& e : part) {
        lo = std::min(lo, e.value);
        hi = std::max(hi, e.value);
      }
      const std::size_t limit = 1 + rng() % 50;
      auto h = hover_preview(k, hi, s, l, limit);
      auto r = resolve_selection({k, lo, hi}, s, l, limit);
      EXPECT_EQ(h.items, r.items);
      EXPECT_EQ(h.total, r.total);
      EXPECT_EQ(r.total, part.size());
      for (std::size_t t = 1; t < r.items.size(); ++t) {
        const auto& a = r.items[t - 1];
        const auto& b = r.items[t];
        EXPECT_TRUE(a.value > b.value || (a.value == b.value && a.index < b.index));
      }
      for (const auto& it : r.items) {
        EXPECT_TRUE(l.is_unlabeled(it.index));
        EXPECT_EQ(c[it.index], k);
      }
    }
  }
}

TEST(ClassStatsTest, Examples) {
  LabelLedger none(4);
  auto cold = class_stats(none, 2, nullptr);
  EXPECT_EQ(cold.unpredicted, 4u);
  EXPECT_EQ(cold.total(), 4u);
  auto s = scores_of({0.1, 0.2, 0.3, 0.4}, {0, 1, 1, 1}, 2);
  auto warm = class_stats(none, 2, &s);
  EXPECT_EQ(warm.per_class[0], (ClassCounts{0, 0, 1}));
  EXPECT_EQ(warm.per_class[1], (ClassCounts{0, 0, 3}));

  LabelLedger all_batch(4);
  for (std::size_t i = 0; i < 4; ++i) all_batch.label_batch(i, 0);
  EXPECT_EQ(class_stats(all_batch, 2, &s).per_class[0].batch, 4u);

  // a: instance c1, b: batch c0, c: batch c1, d: unlabeled predicted c1, e: unlabeled predicted c0
  LabelLedger mixed(5);
  mixed.label_instance(0, 1);
  mixed.label_batch(1, 0);
  mixed.label_batch(2, 1);
  auto s5 = scores_of({0, 0, 0, 0.5, 0.5}, {0, 0, 0, 1, 0}, 2);
  auto st = class_stats(mixed, 2, &s5);
  EXPECT_EQ(st.per_class[0], (ClassCounts{0, 1, 1}));
  EXPECT_EQ(st.per_class[1], (ClassCounts{1, 1, 1}));
  EXPECT_EQ(st.unpredicted, 0u);
  EXPECT_EQ(st.total(), 5u);
}

TEST(ClassStatsTest, TotalsStayAtNUnderRandomActions) {
  std::mt19937_64 rng(6);
  const std::size_t n = 120;
  std::vector<double> v(n, 0.5);
  std::vector<ClassId> c(n);
  for (auto& x : c) x = static_cast<ClassId>(rng() % 4);
  auto s = scores_of(v, c, 4);
  LabelLedger l(n);
  for (int step = 0; step < 500; ++step) {
    const std::size_t i = rng() % n;
    const ClassId k = static_cast<ClassId>(rng() % 4);
    if (rng() % 2 || l.state(i) == LabelState::instance)
      l.label_instance(i, k);
    else
      l.label_batch(i, k);
    ASSERT_EQ(class_stats(l, 4, &s).total(), n);
    ASSERT_EQ(class_stats(l, 4, nullptr).total(), n);
  }
}

TEST(KdeOracleTest, RandomPartitionsIntegrateToOne) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(2 + rng() % 500);
    const int shape = static_cast<int>(rng() % 3);
    for (auto& x : v) x = shape == 0 ? u(rng) : shape == 1 ? u(rng) * u(rng) : std::round(u(rng) * 4) / 4;
    auto c = kde_curve(v);
    ASSERT_NEAR(oracle::trapezoid(c.x, c.y), 1.0, 0.02) << "trial " << trial;
  }
}
