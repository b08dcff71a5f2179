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

#include "canvasflow/config.hpp"
#include "canvasflow/eval.hpp"
#include "tiny_model.hpp"

namespace cf = canvasflow;
using cf::PixelMedia;
using cf::PromptKind;
using cf::SceneSpec;
using cf::Task;
using cf::Tensor;

namespace {

SceneSpec binding_scene() {
  SceneSpec s;
  s.kind = PromptKind::kColorBinding;
  s.entities = {{cf::Shape::kCircle, cf::Color::kRed, {0, 0}},
                {cf::Shape::kSquare, cf::Color::kBlue, {2, 3}}};
  return s;
}

}  // namespace

TEST(Checker, RendersPassEveryCriterion) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 300; ++i) {
    const auto spec = cf::random_image_scene(rng, static_cast<PromptKind>(i % 4), {});
    const auto r = cf::check(spec, cf::render(spec));
    ASSERT_TRUE(r.all()) << cf::caption_text(spec);
    EXPECT_EQ(r.off_palette, 0.0);
  }
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = cf::generate_one(seed, Task::kT2V);
    ASSERT_TRUE(cf::check(s.spec, s.media).all()) << cf::caption_text(s.spec);
  }
}

TEST(Checker, RecolorFlipsOnlyBinding) {
  const auto spec = binding_scene();
  auto wrong = spec;
  wrong.entities[0].color = cf::Color::kGreen;
  const auto r = cf::check(spec, cf::render(wrong));
  EXPECT_TRUE(r.valid);
  EXPECT_FALSE(r.color_binding);
  EXPECT_TRUE(r.single_object);
  EXPECT_TRUE(r.count);
  EXPECT_TRUE(r.position);
  EXPECT_FALSE(cf::prompt_passes(PromptKind::kColorBinding, r));
}

TEST(Checker, MisplacementFlipsOnlyPosition) {
  auto spec = binding_scene();
  spec.kind = PromptKind::kPosition;
  spec.relations = {{0, 1, cf::Relation::kLeftOf}};
  auto moved = spec;
  moved.relations.clear();
  moved.entities[0].cell = {0, 3};  // same column as the square: not left of it
  const auto r = cf::check(spec, cf::render(moved));
  EXPECT_FALSE(r.position);
  EXPECT_TRUE(r.color_binding);
  EXPECT_TRUE(r.count);
  EXPECT_FALSE(cf::prompt_passes(PromptKind::kPosition, r));
  EXPECT_TRUE(cf::prompt_passes(PromptKind::kColorBinding, r));
}

TEST(Checker, BlankAndNoiseImagesFail) {
  const auto spec = binding_scene();
  const auto blank = cf::check(spec, PixelMedia<float>(1, 64, 64));
  EXPECT_TRUE(blank.valid);
  EXPECT_FALSE(blank.single_object);
  EXPECT_FALSE(blank.count);
  EXPECT_FALSE(blank.all());
  PixelMedia<float> noise(1, 64, 64);
  std::mt19937_64 rng(3);
  for (auto& v : noise.data) v = std::uniform_real_distribution<float>(0.f, 1.f)(rng);
  const auto r = cf::check(spec, noise);
  EXPECT_FALSE(r.valid);
  EXPECT_GT(r.off_palette, 0.05);
  EXPECT_FALSE(cf::prompt_passes(PromptKind::kSingleObject, r));
  EXPECT_THROW(cf::check(spec, PixelMedia<float>(1, 32, 32)), cf::Error);
}

TEST(Checker, SmallPerturbationsSnapBack) {
  const auto spec = binding_scene();
  auto img = cf::render(spec);
  std::mt19937_64 rng(4);
  for (auto& v : img.data) v += std::uniform_real_distribution<float>(-0.25f, 0.25f)(rng);
  EXPECT_TRUE(cf::check(spec, img).all());
}

TEST(Checker, StaticClipFailsMotion) {
  SceneSpec spec;
  spec.frames = 9;
  spec.kind = PromptKind::kMotion;
  spec.entities = {{cf::Shape::kTriangle, cf::Color::kCyan, {1, 0}, 0, 1}};
  EXPECT_TRUE(cf::check(spec, cf::render(spec)).motion);
  auto still = spec;
  still.entities[0].vcol = 0;
  const auto r = cf::check(spec, cf::render(still));
  EXPECT_FALSE(r.motion);
  EXPECT_TRUE(r.color_binding);
  EXPECT_FALSE(cf::prompt_passes(PromptKind::kMotion, r));
}

TEST(Checker, MotionIsFoundDespiteAStaticTwin) {
  SceneSpec spec;
  spec.frames = 9;
  spec.kind = PromptKind::kMotion;
  spec.entities = {{cf::Shape::kCircle, cf::Color::kGreen, {3, 2}, 0, -1},
                   {cf::Shape::kCircle, cf::Color::kGreen, {2, 3}}};
  spec.validate();
  EXPECT_TRUE(cf::check(spec, cf::render(spec)).all());
  auto still = spec;
  still.entities[0].vcol = 0;
  EXPECT_FALSE(cf::check(spec, cf::render(still)).motion);
}

TEST(EditMetrics, PsnrOfUniformShift) {
  const auto src = cf::render(binding_scene());
  std::vector<std::uint8_t> mask(64 * 64, 0);
  for (std::size_t i = 0; i < 64; ++i) mask[i] = 1;  // first row is "edited"
  auto shifted = src;
  for (auto& v : shifted.data) v += 1.0f / 255.0f;
  const auto m = cf::edit_metrics(src, shifted, mask);
  ASSERT_TRUE(m.psnr);
  EXPECT_NEAR(*m.psnr, 20 * std::log10(255.0), 1e-3);  // 48.13 dB
  EXPECT_EQ(m.changed_fraction, 1.0);
  EXPECT_TRUE(std::isinf(*cf::edit_metrics(src, src, mask).psnr));
  EXPECT_FALSE(cf::edit_metrics(src, src, std::vector<std::uint8_t>(64 * 64, 1)).psnr);
  EXPECT_THROW(cf::edit_metrics(src, src, std::vector<std::uint8_t>(10, 0)), cf::Error);
}

TEST(EditMetrics, ChangedFractionCountsVisibleChangesOnly) {
  PixelMedia<float> src(1, 8, 8), dst(1, 8, 8);
  std::vector<std::uint8_t> mask(64, 0);
  std::size_t inside = 0, changed = 0;
  std::mt19937_64 rng(5);
  for (std::size_t p = 0; p < 64; p += 2) {
    mask[p] = 1;
    ++inside;
    const int c = std::uniform_int_distribution<int>(-1, cf::kNumColors - 1)(rng);
    if (c >= 0) {
      for (std::size_t k = 0; k < 3; ++k) dst.at(0, k, p / 8, p % 8) = cf::palette()[c][k];
      ++changed;
    } else {
      dst.at(0, 0, p / 8, p % 8) = 0.4f / 255.0f;  // below the half-level threshold
    }
  }
  const auto m = cf::edit_metrics(src, dst, mask);
  EXPECT_DOUBLE_EQ(m.changed_fraction, double(changed) / double(inside));
  EXPECT_TRUE(std::isinf(*m.psnr));
}

TEST(Pca, ConstantFeaturesAreDegenerate) {
  Tensor<double> f(16, 5, 2.5);
  const auto p = cf::pca_maps(f, 4, 4);
  EXPECT_EQ(p.components, 0u);
  EXPECT_TRUE(p.degenerate);
  EXPECT_THROW(cf::pca_maps(f, 3, 4), cf::Error);
}

TEST(Pca, RecoversThreeOrthogonalPatterns) {
  // Zero-mean, mutually orthogonal spatial patterns along axes 3, 0, 1 with
  // variances in strictly decreasing order.
  const std::size_t n = 16;
  Tensor<double> f(n, 5);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = (i % 2 ? 1.0 : -1.0), b = ((i / 2) % 2 ? 1.0 : -1.0), c = ((i / 4) % 2 ? 1.0 : -1.0);
    f(i, 3) = 3 * a;
    f(i, 0) = 2 * b;
    f(i, 1) = 1 * c;
    f(i, 4) = 7.0;  // constant offset, removed by centering
  }
  const auto p = cf::pca_maps(f, 4, 4);
  ASSERT_EQ(p.components, 3u);
  EXPECT_FALSE(p.degenerate);
  EXPECT_NEAR(p.eigenvalues[0], 9.0, 1e-9);
  EXPECT_NEAR(p.eigenvalues[1], 4.0, 1e-9);
  EXPECT_NEAR(p.eigenvalues[2], 1.0, 1e-9);
  const std::size_t axis[3] = {3, 0, 1};
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(std::abs(p.basis[k][axis[k]]), 1.0, 1e-9);
    for (std::size_t l = 0; l < 3; ++l) {
      double dot = 0;
      for (std::size_t d = 0; d < 5; ++d) dot += p.basis[k][d] * p.basis[l][d];
      EXPECT_NEAR(dot, k == l ? 1.0 : 0.0, 1e-6);
    }
    for (double v : p.maps[k]) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  const auto img = cf::pca_image(p);
  EXPECT_EQ(img.height, 4u);
}

TEST(Pca, CanvasMapsOfATinyModel) {
  const auto cfg = cf::testing::tiny_model_config(cf::MediaMode::kVideo);
  auto c3 = cfg;
  c3.connector.keyframes = 3;
  cf::CanvasModel<double> m(c3, 2);
  const auto ex = cf::make_example<double>(cf::generate_one(1, Task::kT2V, c3.scene_options()), c3);
  const auto map = cf::canvas_pca(m, ex, 0.5, 7, 4);
  ASSERT_EQ(map.keyframes.size(), 3u);
  EXPECT_EQ(map.keyframes[0].frame, 0u);
  EXPECT_EQ(map.keyframes[1].frame, 1u);
  EXPECT_EQ(map.keyframes[2].frame, 2u);
  for (const auto& k : map.keyframes) EXPECT_EQ(k.pca.height * k.pca.width, 4u);
  auto off = cfg;
  off.connector.enabled = false;
  cf::CanvasModel<double> base(off, 2);
  EXPECT_THROW(cf::canvas_pca(base, ex, 0.5, 7, 4), cf::Error);
}

TEST(MiniGenEval, ReportAveragesCategories) {
  const auto suite = cf::prompt_suite(1, 20, cf::MediaMode::kImage, {});
  ASSERT_EQ(suite.size(), 20u);
  const auto perfect = cf::mini_geneval([](const cf::Sample& s, std::size_t) { return s.media; }, suite);
  EXPECT_EQ(perfect.categories.size(), 4u);
  for (const auto& [k, v] : perfect.categories) EXPECT_EQ(v.total, 5u) << k;
  EXPECT_EQ(perfect.overall, 1.0);
  // Blank outputs for every other prompt: per-category accuracy 0.4 or 0.6.
  const auto half = cf::mini_geneval(
      [](const cf::Sample& s, std::size_t i) { return i % 2 ? PixelMedia<float>(1, 64, 64) : s.media; }, suite);
  double mean = 0;
  for (const auto& [k, v] : half.categories) mean += v.accuracy();
  EXPECT_DOUBLE_EQ(half.overall, mean / 4);
  EXPECT_LT(half.overall, 1.0);
  const auto j = half.to_json();
  EXPECT_TRUE(j.contains("overall"));
  EXPECT_TRUE(j["categories"].contains("position"));
  const auto video = cf::prompt_suite(1, 4, cf::MediaMode::kVideo, {});
  for (const auto& s : video) EXPECT_EQ(s.spec.kind, PromptKind::kMotion);
}

TEST(Ablations, Table3ArmsAreCumulative) {
  const auto arms = cf::ablation_arms(cf::ExperimentConfig{}, "table3");
  ASSERT_EQ(arms.size(), 6u);
  const char* names[] = {"full", "no_timestep_cond", "no_dit_block", "no_align_block", "before_patchify",
                         "baseline"};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(arms[i].name, names[i]);
  const auto& c = arms[4].config.model.connector;
  EXPECT_FALSE(c.use_timestep_cond);
  EXPECT_FALSE(c.use_dit_block);
  EXPECT_FALSE(c.use_align_block);
  EXPECT_FALSE(c.fuse_after_patchify);
  EXPECT_TRUE(arms[0].config.model.connector.use_dit_block);
  EXPECT_FALSE(arms[5].config.model.connector.enabled);
  EXPECT_THROW(cf::ablation_arms(cf::ExperimentConfig{}, "table9"), cf::Error);
}

TEST(Ablations, KeyframeSweepClampsToLatentFrames) {
  EXPECT_EQ(cf::clamp_keyframes(6, 3), 3u);
  EXPECT_EQ(cf::clamp_keyframes(11, 10), 6u);
  EXPECT_EQ(cf::clamp_keyframes(31, 31), 31u);
  EXPECT_EQ(cf::clamp_keyframes(1, 1), 1u);
  cf::ExperimentConfig v;
  v.model.codec.mode = cf::MediaMode::kVideo;
  v.model.video_frames = 9;
  const auto arms = cf::ablation_arms(v, "keyframes");
  ASSERT_EQ(arms.size(), 6u);
  const std::size_t want[] = {1, 3, 3, 3, 3};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(arms[i].config.model.connector.keyframes, want[i]);
  EXPECT_EQ(arms[4].requested_keyframes, 31u);
  EXPECT_THROW(cf::ablation_arms(cf::ExperimentConfig{}, "keyframes"), cf::Error);
}
