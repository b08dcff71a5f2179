/* Copyright 2026 The Canvasflow Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#include <gtest/gtest.h>

#include "canvasflow/ops.hpp"
#include "test_util.hpp"

namespace cf = canvasflow;
using cf::Tensor;
using cf::Var;
using cf::testing::grad_check;
using cf::testing::random_tensor;
using cf::testing::readout;

namespace {

Var<double> leaf(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  return Var<double>::leaf(random_tensor<double>(r, c, rng, sd), true);
}

}  // namespace

TEST(Matmul, MatchesNaiveTripleLoop) {
  std::mt19937_64 rng(1);
  for (auto [n, k, m] : {std::array<std::size_t, 3>{1, 1, 1}, {7, 13, 5}, {33, 70, 19}, {64, 64, 64}}) {
    auto a = random_tensor<double>(n, k, rng), b = random_tensor<double>(k, m, rng);
    auto c = cf::matmul(a, b);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        long double ref = 0;
        for (std::size_t t = 0; t < k; ++t) ref += static_cast<long double>(a(i, t)) * b(t, j);
        EXPECT_NEAR(c(i, j), static_cast<double>(ref), 1e-12 * static_cast<double>(k));
      }
  }
}

// Each output row is computed from its own input row only, in a fixed order,
// so a row's bits do not depend on what else is in the batch.
TEST(Matmul, RowResultsIndependentOfBatchComposition) {
  std::mt19937_64 rng(2);
  auto a = random_tensor<float>(37, 50, rng), b = random_tensor<float>(50, 29, rng);
  auto full = cf::matmul(a, b);
  for (std::size_t r : {0u, 5u, 36u}) {
    Tensor<float> one(1, 50);
    std::copy_n(a.data() + r * 50, 50, one.data());
    auto single = cf::matmul(one, b);
    for (std::size_t j = 0; j < 29; ++j) EXPECT_EQ(single(0, j), full(r, j));
  }
}

TEST(Autograd, ElementwiseAndReductionGradients) {
  std::mt19937_64 rng(3);
  auto a = leaf(4, 5, rng), b = leaf(4, 5, rng), row = leaf(1, 5, rng), col = leaf(4, 1, rng);
  auto pos = Var<double>::leaf([&] {
    auto t = random_tensor<double>(4, 5, rng);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 1.5 + std::abs(t[i]);
    return t;
  }(), true);
  auto r = grad_check({a, b, row, col, pos}, [&] {
    auto y = cf::ops::add(cf::ops::mul(a, b), row);
    y = cf::ops::sub(y, col);
    y = cf::ops::div(y, pos);
    y = cf::ops::add_scalar(cf::ops::scale(y, 0.7), 0.1);
    return cf::ops::add(readout(y), cf::ops::sum_squares(cf::ops::sum_rows(y)));
  });
  EXPECT_LT(r.max_rel, 1e-7);
}

TEST(Autograd, NonlinearityAndNormGradients) {
  std::mt19937_64 rng(4);
  auto x = leaf(5, 8, rng);
  for (int which = 0; which < 4; ++which) {
    auto r = grad_check({x}, [&] {
      switch (which) {
        case 0: return readout(cf::ops::gelu(x));
        case 1: return readout(cf::ops::silu(x));
        case 2: return readout(cf::ops::layer_norm(x));
        default: return readout(cf::ops::transpose(x));
      }
    });
    EXPECT_LT(r.max_rel, 1e-7) << "case " << which;
  }
}

TEST(Autograd, LinearAndStructuralOpGradients) {
  std::mt19937_64 rng(5);
  auto x = leaf(6, 4, rng), w = leaf(4, 3, rng), bias = leaf(1, 3, rng), y = leaf(2, 4, rng);
  auto r = grad_check({x, w, bias, y}, [&] {
    auto h = cf::ops::linear(x, w, bias);
    auto cat = cf::ops::concat_rows<double>({x, y});
    auto sl = cf::ops::slice_cols(cf::ops::slice_rows(cat, 1, 7), 1, 3);
    auto g = cf::ops::gather_rows(cat, {7, 0, 0, 3});
    auto p = cf::ops::permute(h, {17, 3, 0, 5, 9, 12}, 2, 3);
    auto cc = cf::ops::concat_cols<double>({sl, cf::ops::matmul(x, w)});
    auto mk = cf::ops::add_masked_rows(x, cf::ops::scale(x, 2.0), {1, 0, 1, 0, 0, 1});
    return cf::ops::add(cf::ops::add(readout(cc, 1), readout(g, 2)),
                        cf::ops::add(readout(p, 3), readout(mk, 4)));
  });
  EXPECT_LT(r.max_rel, 1e-7);
}

TEST(Autograd, AttentionRotaryAndConvGradients) {
  std::mt19937_64 rng(6);
  const std::size_t n = 5, heads = 2, dm = 12;
  auto q = leaf(n, dm, rng), k = leaf(n, dm, rng), v = leaf(n, dm, rng);
  std::vector<cf::Position3> pos;
  for (std::size_t i = 0; i < n; ++i) pos.push_back({std::int64_t(i), std::int64_t(i % 2), std::int64_t(i / 2)});
  const auto sec = cf::RotarySections::split(dm / heads / 2);
  for (bool causal : {false, true}) {
    auto r = grad_check({q, k, v}, [&] {
      auto rq = cf::ops::rotary(q, pos, heads, sec);
      auto rk = cf::ops::rotary(k, pos, heads, sec);
      return readout(cf::ops::attention(rq, rk, v, heads, causal));
    });
    EXPECT_LT(r.max_rel, 1e-7) << "causal " << causal;
  }
  auto x = leaf(2 * 3 * 4, 3, rng), w = leaf(9, 3, rng), b = leaf(1, 3, rng);
  auto r = grad_check({x, w, b}, [&] { return readout(cf::ops::depthwise_conv3x3(x, w, b, 2, 3, 4)); });
  EXPECT_LT(r.max_rel, 1e-7);
}

TEST(Attention, CausalRowsIgnoreLaterKeys) {
  std::mt19937_64 rng(7);
  auto q = random_tensor<double>(6, 8, rng), k = random_tensor<double>(6, 8, rng),
       v = random_tensor<double>(6, 8, rng);
  auto base = cf::ops::attention(Var<double>::constant(q), Var<double>::constant(k),
                                 Var<double>::constant(v), 2, true);
  for (std::size_t c = 0; c < 8; ++c) k(4, c) += 3.0, v(4, c) -= 2.0;
  auto pert = cf::ops::attention(Var<double>::constant(q), Var<double>::constant(k),
                                 Var<double>::constant(v), 2, true);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(base.value()(i, c), pert.value()(i, c));
  EXPECT_NE(base.value()(5, 0), pert.value()(5, 0));
}

TEST(Attention, RowsAreConvexCombinationsOfValues) {
  // With a single key every query returns that key's value exactly.
  std::mt19937_64 rng(8);
  auto q = Var<double>::constant(random_tensor<double>(3, 4, rng));
  auto k = Var<double>::constant(random_tensor<double>(1, 4, rng));
  auto v = Var<double>::constant(random_tensor<double>(1, 4, rng));
  auto out = cf::ops::attention(q, k, v, 2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.value()(i, c), v.value()(0, c), 1e-15);
}

TEST(Rotary, DotProductsDependOnlyOnPositionOffset) {
  std::mt19937_64 rng(9);
  const std::size_t heads = 2, dm = 24;
  const auto sec = cf::RotarySections::split(dm / heads / 2);
  auto q = random_tensor<double>(1, dm, rng), k = random_tensor<double>(1, dm, rng);
  auto logits = [&](cf::Position3 pq, cf::Position3 pk) {
    auto rq = cf::ops::rotary(Var<double>::constant(q), {pq}, heads, sec).value();
    auto rk = cf::ops::rotary(Var<double>::constant(k), {pk}, heads, sec).value();
    std::vector<double> per_head(heads, 0.0);
    for (std::size_t c = 0; c < dm; ++c) per_head[c / (dm / heads)] += rq[c] * rk[c];
    return per_head;
  };
  const auto ref = logits({3, 1, 2}, {1, 4, 0});
  for (std::int64_t off : {1, 7, 40}) {
    const auto shifted = logits({3 + off, 1 + off, 2 + off}, {1 + off, 4 + off, off});
    for (std::size_t h = 0; h < heads; ++h) EXPECT_NEAR(shifted[h], ref[h], 1e-9);
  }
  // A different offset along one axis does change the logits.
  const auto moved = logits({3, 1, 2}, {1, 5, 0});
  EXPECT_GT(std::abs(moved[0] - ref[0]) + std::abs(moved[1] - ref[1]), 1e-6);
}

TEST(Rotary, PreservesPairNormsAndSectionsCoverHead) {
  const auto s = cf::RotarySections::split(10);
  EXPECT_EQ(s.total(), 10u);
  EXPECT_EQ(s.t, 4u);
  EXPECT_EQ(s.h, 3u);
  EXPECT_EQ(s.w, 3u);
  std::mt19937_64 rng(10);
  auto x = random_tensor<double>(3, 20, rng);
  auto y = cf::ops::rotary(Var<double>::constant(x), {{0, 0, 0}, {5, 2, 9}, {11, 3, 1}}, 1, s).value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t p = 0; p < 10; ++p) {
      const double a = x(r, 2 * p) * x(r, 2 * p) + x(r, 2 * p + 1) * x(r, 2 * p + 1);
      const double b = y(r, 2 * p) * y(r, 2 * p) + y(r, 2 * p + 1) * y(r, 2 * p + 1);
      EXPECT_NEAR(a, b, 1e-12);
    }
  for (std::size_t c = 0; c < 20; ++c) EXPECT_EQ(y(0, c), x(0, c));  // position 0 is the identity
}

TEST(LayerNorm, NormalizesEachRow) {
  std::mt19937_64 rng(11);
  auto y = cf::ops::layer_norm(Var<double>::constant(random_tensor<double>(4, 32, rng, 3.0)), 0.0).value();
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 32; ++c) mean += y(r, c) / 32;
    for (std::size_t c = 0; c < 32; ++c) var += (y(r, c) - mean) * (y(r, c) - mean) / 32;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-10);
  }
}

TEST(DepthwiseConv, MatchesZeroPaddedStencilOracle) {
  std::mt19937_64 rng(12);
  const std::size_t F = 2, H = 3, W = 5, C = 2;
  auto x = random_tensor<double>(F * H * W, C, rng), w = random_tensor<double>(9, C, rng),
       b = random_tensor<double>(1, C, rng);
  auto y = cf::ops::depthwise_conv3x3(Var<double>::constant(x), Var<double>::constant(w),
                                      Var<double>::constant(b), F, H, W).value();
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        for (std::size_t c = 0; c < C; ++c) {
          double ref = b(0, c);
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int yy = int(i) + ky - 1, xx = int(j) + kx - 1;
              if (yy < 0 || xx < 0 || yy >= int(H) || xx >= int(W)) continue;
              ref += w(ky * 3 + kx, c) * x((f * H + yy) * W + xx, c);
            }
          EXPECT_NEAR(y((f * H + i) * W + j, c), ref, 1e-12);
        }
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  std::mt19937_64 rng(13);
  auto a = leaf(2, 2, rng);
  Var<double> y;
  {
    cf::NoGradGuard g;
    y = cf::ops::mul(a, a);
  }
  EXPECT_FALSE(y.requires_grad());
  auto z = cf::ops::mul(a, a);
  EXPECT_TRUE(z.requires_grad());
}

TEST(Dropout, KeepsExpectationAndIsSeeded) {
  std::mt19937_64 r1(14), r2(14);
  auto x = Var<double>::constant(Tensor<double>(200, 50, 1.0));
  auto a = cf::ops::dropout(x, 0.1, r1).value(), b = cf::ops::dropout(x, 0.1, r2).value();
  EXPECT_EQ(a, b);
  double mean = 0, zeros = 0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] / double(a.size()), zeros += a[i] == 0;
  // 10000 Bernoulli(0.9) draws: sd of the kept fraction is 0.003.
  EXPECT_NEAR(zeros / double(a.size()), 0.1, 0.012);
  EXPECT_NEAR(mean, 1.0, 0.015);
}
