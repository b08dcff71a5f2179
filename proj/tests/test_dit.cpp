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

#include <cmath>

#include "canvasflow/dit.hpp"
#include "canvasflow/model.hpp"
#include "test_util.hpp"
#include "tiny_model.hpp"

namespace cf = canvasflow;
using cf::ConditioningVariant;
using cf::FrameGrid;
using cf::Tensor;
using cf::Var;
using cf::testing::random_tensor;

namespace {

constexpr std::size_t kCh = 3;

cf::DiTConfig small_dit(ConditioningVariant v = ConditioningVariant::kCanvasPlusText) {
  cf::DiTConfig c;
  c.depth = 2;
  c.width = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.timestep_freq_dim = 8;
  c.variant = v;
  return c;
}

struct Net {
  cf::ParamStore<double> store;
  std::mt19937_64 rng{11};
  cf::DiT<double> dit;
  explicit Net(cf::DiTConfig c = small_dit()) : dit(c, kCh, store, rng) {}
};

cf::DiTInput<double> input(const FrameGrid& g, const Tensor<double>& z, double t) {
  return {g, Var<double>::constant(z), {}, {}, std::vector<double>(g.frames, t)};
}

}  // namespace

TEST(Patchify, GridAndIndexLayout) {
  const FrameGrid g{2, 4, 6};
  const auto pg = cf::patch_grid(g);
  EXPECT_EQ(pg.frames, 2u);
  EXPECT_EQ(pg.height, 2u);
  EXPECT_EQ(pg.width, 3u);
  EXPECT_THROW(cf::patch_grid({1, 3, 4}), cf::Error);
  // Every element of patch token (f, i, j) comes from the 2x2 block at (2i, 2j).
  const auto idx = cf::patchify_index(g, kCh);
  ASSERT_EQ(idx.size(), g.size() * kCh);
  for (std::size_t p = 0; p < pg.size(); ++p) {
    const std::size_t f = p / pg.tokens_per_frame(), i = p % pg.tokens_per_frame() / pg.width,
                      j = p % pg.width;
    for (std::size_t k = 0; k < 4 * kCh; ++k) {
      const std::size_t cell = idx[p * 4 * kCh + k] / kCh;
      EXPECT_EQ(cell / g.tokens_per_frame(), f);
      EXPECT_EQ(cell % g.tokens_per_frame() / g.width / 2, i);
      EXPECT_EQ(cell % g.width / 2, j);
      EXPECT_EQ(idx[p * 4 * kCh + k] % kCh, k % kCh);
    }
  }
  const auto inv = cf::unpatchify_index(g, kCh);
  for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(inv[idx[i]], i);
}

TEST(DiT, ConstantInputGivesPatchPeriodicOutput) {
  Net n;
  const FrameGrid g{1, 4, 4};
  auto ctx = Var<double>::constant(random_tensor<double>(3, 8, n.rng));
  const auto u = n.dit.forward(input(g, Tensor<double>(16, kCh), 0.5), ctx).value();
  // Identical patch tokens attend identically regardless of rotary phase, so
  // each output cell depends only on its offset inside the 2x2 patch.
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t c = 0; c < kCh; ++c) EXPECT_NEAR(u(y * 4 + x, c), u((y % 2) * 4 + x % 2, c), 1e-12);
}

TEST(DiT, OutputDependsOnContextAndPerFrameTimesteps) {
  Net n;
  const FrameGrid g{2, 2, 4};
  const auto z = random_tensor<double>(g.size(), kCh, n.rng);
  auto c1 = Var<double>::constant(random_tensor<double>(3, 8, n.rng));
  auto c2 = Var<double>::constant(random_tensor<double>(3, 8, n.rng));
  const auto base = n.dit.forward(input(g, z, 0.5), c1).value();
  EXPECT_GT(cf::testing::max_abs_diff(base, n.dit.forward(input(g, z, 0.5), c2).value()), 1e-8);
  auto in = input(g, z, 0.5);
  in.timesteps[1] = 0.9;
  EXPECT_GT(cf::testing::max_abs_diff(base, n.dit.forward(in, c1).value()), 1e-8);
  EXPECT_EQ(base, n.dit.forward(input(g, z, 0.5), c1).value());
}

TEST(DiT, ConditioningVariantsShareParameterCountAndContextRules) {
  std::size_t counts[4];
  int i = 0;
  for (auto v : {ConditioningVariant::kTextOnly, ConditioningVariant::kQuery1d,
                 ConditioningVariant::kCanvas, ConditioningVariant::kCanvasPlusText}) {
    Net n(small_dit(v));
    counts[i++] = n.store.total();
    const FrameGrid g{1, 2, 2};
    auto empty = Var<double>::constant(Tensor<double>(0, 8));
    auto in = input(g, Tensor<double>(4, kCh), 0.3);
    if (cf::variant_uses_text(v))
      EXPECT_THROW(n.dit.forward(in, empty), cf::Error);
    else
      EXPECT_NO_THROW(n.dit.forward(in, empty));
  }
  for (int k = 1; k < 4; ++k) EXPECT_EQ(counts[k], counts[0]);
}

TEST(DiT, RejectsMismatchedInputs) {
  Net n;
  auto ctx = Var<double>::constant(Tensor<double>(1, 8));
  auto in = input({1, 2, 2}, Tensor<double>(4, kCh), 0.3);
  in.timesteps.push_back(0.1);
  EXPECT_THROW(n.dit.forward(in, ctx), cf::Error);
  in = input({1, 2, 2}, Tensor<double>(4, kCh), 0.3);
  in.condition = Tensor<double>(4, kCh + 1);
  EXPECT_THROW(n.dit.forward(in, ctx), cf::Error);
}

TEST(DiT, GradientCheck) {
  cf::DiTConfig c = small_dit();
  c.depth = 1;
  c.mlp_ratio = 1;
  Net n(c);
  const FrameGrid g{1, 2, 4};
  auto z = Var<double>::leaf(random_tensor<double>(g.size(), kCh, n.rng), true);
  auto ctx = Var<double>::leaf(random_tensor<double>(2, 8, n.rng), true);
  const auto cond = random_tensor<double>(g.size(), kCh, n.rng);
  std::vector<Var<double>> params{z, ctx};
  std::size_t total = z.value().size() + ctx.value().size();
  for (auto& e : n.store.entries())
    if (total + e.var.value().size() <= 1000) {
      params.push_back(e.var);
      total += e.var.value().size();
    }
  auto loss = [&] {
    cf::DiTInput<double> in{g, z, cond, {}, {0.4}};
    return cf::testing::readout(n.dit.forward(in, ctx));
  };
  const auto r = cf::testing::grad_check(params, loss);
  EXPECT_LE(r.max_rel, 1e-4);
  EXPECT_GT(r.checked, 600u);
}

TEST(Sampler, EulerMatchesClosedFormForLinearField) {
  // u = z integrates to z_k = z_0 (1 - 1/N)^N.
  cf::VelocityFn<double> fn = [](const Tensor<double>& z, const std::vector<double>&) { return z; };
  Tensor<double> z0(4, 2, std::vector<double>{1, -2, 3, 0.5, 0.25, 7, -1, 2});
  for (std::size_t N : {1, 4, 10}) {
    const auto out = cf::euler_sample(fn, z0, 2, {N, {}});
    const double f = std::pow(1.0 - 1.0 / double(N), double(N));
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], z0[i] * f, 1e-12);
  }
  EXPECT_THROW(cf::euler_sample(fn, z0, 2, {0, {}}), cf::Error);
}

TEST(Sampler, SingleStepIsOneModelCall) {
  int calls = 0;
  std::vector<double> seen;
  cf::VelocityFn<double> fn = [&](const Tensor<double>& z, const std::vector<double>& ts) {
    ++calls;
    seen = ts;
    Tensor<double> u(z.rows(), z.cols(), 0.5);
    return u;
  };
  Tensor<double> z(2, 1, std::vector<double>{1.0, 2.0});
  const auto out = cf::euler_sample(fn, z, 1, {1, {}});
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(seen, std::vector<double>{1.0});
  EXPECT_EQ(out(0, 0), 0.5);
  EXPECT_EQ(out(1, 0), 1.5);
}

TEST(Sampler, PinnedFramesStayCleanAndSeeTimeZero) {
  Tensor<double> clean(6, 2, 9.0);
  std::vector<std::vector<double>> ts_log;
  cf::VelocityFn<double> fn = [&](const Tensor<double>& z, const std::vector<double>& ts) {
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(z[k], 9.0);  // frame 0 (2 rows x 2 cols)
    ts_log.push_back(ts);
    return Tensor<double>(z.rows(), z.cols(), 1.0);
  };
  const auto out = cf::euler_sample(fn, Tensor<double>(6, 2, 0.0), 3, {4, {1, 0, 0}}, &clean);
  ASSERT_EQ(ts_log.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(ts_log[i][0], 0.0);
    EXPECT_DOUBLE_EQ(ts_log[i][1], 1.0 - 0.25 * double(i));
  }
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(out[k], 9.0);
  for (std::size_t k = 4; k < 12; ++k) EXPECT_DOUBLE_EQ(out[k], -1.0);
}

TEST(Model, CanvasBranchIsInvisibleAtInitialization) {
  auto with = cf::testing::tiny_model_config();
  auto without = with;
  without.dit.variant = ConditioningVariant::kTextOnly;
  cf::CanvasModel<double> a(with, 3), b(without, 3);
  EXPECT_TRUE(a.uses_canvas());
  EXPECT_FALSE(b.uses_canvas());
  EXPECT_GT(a.params().total(), b.params().total());
  for (auto task : {cf::Task::kT2I, cf::Task::kEdit}) {
    const auto s = cf::generate_one(17, task, with.scene_options());
    const auto ex = cf::make_example<double>(s, with);
    std::mt19937_64 r1(5), r2(5);
    const auto zt = Var<double>::constant(a.noise(ex, r1));
    const std::vector<double> ts(ex.grid.frames, 0.6);
    const auto ua = a.velocity(ex, a.encode_condition(ex), zt, ts).value();
    const auto ub = b.velocity(ex, b.encode_condition(ex), zt, ts).value();
    EXPECT_EQ(ua, ub) << cf::task_name(task);
  }
}

TEST(Model, VideoExamplesMarkReferenceAndPinnedFrames) {
  const auto cfg = cf::testing::tiny_model_config(cf::MediaMode::kVideo);
  const auto opt = cfg.scene_options();
  const auto i2v = cf::make_example<double>(cf::generate_one(1, cf::Task::kI2V, opt), cfg);
  EXPECT_EQ(i2v.grid.frames, 3u);
  EXPECT_EQ(i2v.pinned, (std::vector<std::uint8_t>{1, 0, 0}));
  EXPECT_EQ(i2v.reference, (std::vector<std::uint8_t>{0, 0, 0}));
  EXPECT_EQ(i2v.loss_mask, (std::vector<std::uint8_t>{0, 1, 1}));
  const auto v2v = cf::make_example<double>(cf::generate_one(2, cf::Task::kV2V, opt), cfg);
  EXPECT_EQ(v2v.grid.frames, 6u);
  EXPECT_EQ(v2v.reference, (std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0}));
  EXPECT_EQ(v2v.loss_mask, (std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1}));
  const auto ref = cf::make_example<double>(cf::generate_one(3, cf::Task::kRef2V, opt), cfg);
  EXPECT_EQ(ref.grid.frames, 4u);
  EXPECT_EQ(ref.reference, (std::vector<std::uint8_t>{1, 0, 0, 0}));
  EXPECT_THROW(cf::make_example<double>(cf::generate_one(4, cf::Task::kT2I, opt), cfg), cf::Error);
}

TEST(Model, SamplesAreSeedDeterministicAndKeepPinnedFrames) {
  const auto cfg = cf::testing::tiny_model_config(cf::MediaMode::kVideo);
  cf::CanvasModel<float> m(cfg, 9);
  const auto ex = cf::make_example<float>(cf::generate_one(5, cf::Task::kI2V, cfg.scene_options()), cfg);
  const auto a = m.sample(ex, 42, 3);
  EXPECT_EQ(a, m.sample(ex, 42, 3));
  EXPECT_NE(a, m.sample(ex, 43, 3));
  const std::size_t per = ex.grid.tokens_per_frame() * ex.target.cols();
  for (std::size_t k = 0; k < per; ++k) ASSERT_EQ(a[k], ex.target[k]);
}
