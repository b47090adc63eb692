#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "rflow/rng.hpp"
#include "rflow/tensor.hpp"

using namespace rflow;

TEST(Tensor, ConstructionValidatesShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  const Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_DOUBLE_EQ(t.at(1, 2), 1.5);
}

TEST(Tensor, ElementwiseArithmetic) {
  const Tensor a = Tensor::vector({1.0, 2.0, 3.0});
  const Tensor b = Tensor::vector({0.5, -1.0, 4.0});
  EXPECT_EQ(a + b, Tensor::vector({1.5, 1.0, 7.0}));
  EXPECT_EQ(a - b, Tensor::vector({0.5, 3.0, -1.0}));
  EXPECT_EQ(2.0 * a, Tensor::vector({2.0, 4.0, 6.0}));
  EXPECT_EQ(axpy(a, 2.0, b), Tensor::vector({2.0, 0.0, 11.0}));
  EXPECT_EQ(lincomb(0.5, a, 0.5, b), Tensor::vector({0.75, 0.5, 3.5}));
  EXPECT_DOUBLE_EQ(squared_norm(a.data()), 14.0);
  EXPECT_DOUBLE_EQ(dot(a.data(), b.data()), 10.5);
  EXPECT_DOUBLE_EQ(max_abs_diff(a, b), 3.0);
  EXPECT_DOUBLE_EQ(mean_squared_error(a, b), (0.25 + 9.0 + 1.0) / 3.0);
  EXPECT_THROW(a + Tensor::vector({1.0}), ShapeError);
}

TEST(Tensor, RowHelpers) {
  const Tensor m({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const std::vector<std::size_t> idx{2, 0};
  EXPECT_EQ(gather_rows(m, idx), Tensor({2, 2}, std::vector<double>{5, 6, 1, 2}));
  EXPECT_EQ(slice_rows(m, 1, 3), Tensor({2, 2}, std::vector<double>{3, 4, 5, 6}));
  EXPECT_EQ(as_batch(Tensor::vector({1.0, 2.0})).shape(), (Shape{1, 2}));
  EXPECT_FALSE(Tensor::vector({1.0, NAN}).all_finite());
}

TEST(Rng, StreamsAreReproducibleAndDistinct) {
  CounterRng a(42, 7), b(42, 7), c(42, 8), d(43, 7);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u64();
    EXPECT_EQ(va, b.next_u64());
    EXPECT_NE(va, c.next_u64());
    EXPECT_NE(va, d.next_u64());
    seen.insert(va);
  }
  EXPECT_EQ(seen.size(), 100u);
}

TEST(Rng, UniformAndNormalMoments) {
  CounterRng rng(1, 0);
  const int n = 200000;
  double su = 0, su2 = 0, sn = 0, sn2 = 0, sn4 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    su2 += u * u;
    const double g = rng.normal();
    sn += g;
    sn2 += g * g;
    sn4 += g * g * g * g;
  }
  EXPECT_NEAR(su / n, 0.5, 4 * std::sqrt(1.0 / 12 / n));
  EXPECT_NEAR(su2 / n, 1.0 / 3.0, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 4 / std::sqrt(double(n)));
  EXPECT_NEAR(sn2 / n, 1.0, 4 * std::sqrt(2.0 / n));
  EXPECT_NEAR(sn4 / n, 3.0, 0.06);
}

TEST(Rng, BelowIsInRangeAndCoversAll) {
  CounterRng rng(9, 1);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const auto k = rng.below(7);
    ASSERT_LT(k, 7u);
    counts[k]++;
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
}

TEST(Rng, RowStreamsDependOnlyOnIndex) {
  const Tensor all = standard_normal_rows(10, 3, 77, 0);
  const Tensor tail = standard_normal_rows(4, 3, 77, 6);
  EXPECT_EQ(slice_rows(all, 6, 10), tail);
  EXPECT_NE(all, standard_normal_rows(10, 3, 78, 0));
}

TEST(Rng, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(1, 1), derive_seed(1, 2));
  EXPECT_NE(derive_seed(1, 1), derive_seed(2, 1));
  EXPECT_EQ(derive_seed(5, 3), derive_seed(5, 3));
}
