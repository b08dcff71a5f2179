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

#include "canvasflow/eval.hpp"
#include "canvasflow/scenes.hpp"

namespace cf = canvasflow;
using cf::Cell;
using cf::Entity;
using cf::SceneSpec;
using cf::Task;

namespace {

SceneSpec two_entity_scene() {
  SceneSpec s;
  s.entities = {{cf::Shape::kCircle, cf::Color::kRed, {0, 0}},
                {cf::Shape::kSquare, cf::Color::kBlue, {2, 3}}};
  return s;
}

bool is_palette_or_black(const cf::PixelMedia<float>& m, std::size_t f, std::size_t y, std::size_t x) {
  const float r = m.at(f, 0, y, x), g = m.at(f, 1, y, x), b = m.at(f, 2, y, x);
  if (r == 0 && g == 0 && b == 0) return true;
  for (const auto& p : cf::palette())
    if (p[0] == r && p[1] == g && p[2] == b) return true;
  return false;
}

}  // namespace

TEST(Scenes, GenerationIsSeedDeterministic) {
  for (auto task : {Task::kT2I, Task::kT2V, Task::kI2V, Task::kEdit, Task::kRef2V, Task::kV2V}) {
    const auto a = cf::generate_one(123, task), b = cf::generate_one(123, task);
    EXPECT_EQ(a.spec, b.spec) << cf::task_name(task);
    EXPECT_EQ(a.caption, b.caption);
    EXPECT_EQ(a.media, b.media);
    EXPECT_EQ(a.source, b.source);
    EXPECT_EQ(a.reference, b.reference);
    EXPECT_NE(cf::generate_one(124, task).media, a.media);
  }
}

TEST(Scenes, ColorMarginalIsUniform) {
  std::mt19937_64 rng(9);
  std::array<int, cf::kNumColors> hist{};
  const int n = 1000;
  for (int i = 0; i < n; ++i)
    ++hist[static_cast<int>(cf::random_image_scene(rng, cf::PromptKind::kSingleObject, {}).entities[0].color)];
  const double p = 1.0 / cf::kNumColors, sd = std::sqrt(n * p * (1 - p));
  for (int c = 0; c < cf::kNumColors; ++c) EXPECT_LE(std::abs(hist[c] - n * p), 3 * sd) << c;
}

TEST(Scenes, RenderUsesOnlyPaletteColorsAndBlack) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = cf::generate_one(seed, seed % 2 ? Task::kT2V : Task::kT2I);
    for (std::size_t f = 0; f < s.media.frames; ++f)
      for (std::size_t y = 0; y < s.media.height; ++y)
        for (std::size_t x = 0; x < s.media.width; ++x) ASSERT_TRUE(is_palette_or_black(s.media, f, y, x));
  }
}

TEST(Scenes, VideoFramesFollowTheEntityVelocity) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto s = cf::generate_one(seed, Task::kT2V);
    ASSERT_EQ(s.media.frames, 9u);
    const Entity& e = s.spec.entities[0];
    for (std::size_t f = 0; f + 1 < 9; ++f) {
      const Cell a = e.cell_at(f), b = e.cell_at(f + 1);
      const bool at_edge = b == a;
      EXPECT_TRUE(at_edge || (b.row - a.row == e.vrow && b.col - a.col == e.vcol));
    }
    // Each frame is the still render of the scene at that instant.
    for (std::size_t f = 0; f < 9; f += 4) {
      SceneSpec still = s.spec;
      still.frames = 1;
      for (auto& x : still.entities) {
        x.cell = x.cell_at(f);
        x.vrow = x.vcol = 0;
      }
      EXPECT_EQ(cf::render(still), s.media.frame(f));
    }
  }
}

TEST(Scenes, CaptionGrammar) {
  SceneSpec s = two_entity_scene();
  s.kind = cf::PromptKind::kPosition;
  s.relations = {{0, 1, cf::Relation::kLeftOf}};
  const auto cap = cf::caption(s);
  ASSERT_EQ(cap.size(), 8u);  // seven words and <EoS>
  EXPECT_EQ(cf::Vocabulary::standard().decode(cap), "a red circle left_of a blue square <EoS>");
  s.kind = cf::PromptKind::kCount;
  s.entities[1] = s.entities[0];
  s.entities[1].cell = {3, 3};
  s.relations.clear();
  EXPECT_EQ(cf::caption_text(s), "two red circles <EoS>");
  for (std::uint64_t seed = 0; seed < 50; ++seed)
    for (auto task : {Task::kT2I, Task::kT2V, Task::kEdit})
      EXPECT_EQ(cf::generate_one(seed, task).caption.back(), cf::Vocabulary::kEos);
}

TEST(Scenes, ValidateRejectsInconsistentSpecs) {
  SceneSpec s = two_entity_scene();
  EXPECT_NO_THROW(s.validate());
  auto overlap = s;
  overlap.entities[1].cell = {0, 0};
  EXPECT_THROW(overlap.validate(), cf::Error);
  auto rel = s;
  rel.relations = {{0, 1, cf::Relation::kRightOf}};
  EXPECT_THROW(rel.validate(), cf::Error);
  auto out = s;
  out.entities[0].cell = {4, 0};
  EXPECT_THROW(out.validate(), cf::Error);
  // Paths that collide mid-clip are rejected too.
  auto moving = s;
  moving.frames = 5;
  moving.entities[0].cell = {2, 0};
  moving.entities[0].vcol = 1;
  EXPECT_THROW(moving.validate(), cf::Error);
}

TEST(Edits, RecolorChangesOnlyTheTargetShape) {
  const SceneSpec s = two_entity_scene();
  cf::EditOp op;
  op.kind = cf::EditKind::kRecolor;
  op.target = 1;
  op.color = cf::Color::kYellow;
  const auto p = cf::edit_pair(s, op);
  const std::size_t ch = 16;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const bool in_cell = y / ch == 2 && x / ch == 3;
      const bool covered = in_cell && cf::shape_covers(cf::Shape::kSquare, ch, ch, y % ch, x % ch);
      EXPECT_EQ(p.mask[y * 64 + x], covered ? 1 : 0);
    }
  EXPECT_EQ(cf::Vocabulary::standard().decode(p.instruction), "recolor the blue square to yellow <EoS>");
}

TEST(Edits, MaskIsExactlyThePixelDifference) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto s = cf::generate_one(seed, seed % 2 ? Task::kEdit : Task::kV2V);
    ASSERT_TRUE(s.source);
    const auto& a = *s.source;
    const auto& b = s.media;
    for (std::size_t f = 0; f < a.frames; ++f)
      for (std::size_t y = 0; y < a.height; ++y)
        for (std::size_t x = 0; x < a.width; ++x) {
          bool diff = false;
          for (std::size_t c = 0; c < 3; ++c) diff = diff || a.at(f, c, y, x) != b.at(f, c, y, x);
          ASSERT_EQ(s.edit_mask[(f * a.height + y) * a.width + x], diff ? 1 : 0);
        }
  }
}

TEST(Edits, RemoveDropsTheCountByOne) {
  const SceneSpec s = two_entity_scene();
  cf::EditOp op;
  op.kind = cf::EditKind::kRemove;
  op.target = 0;
  const auto p = cf::edit_pair(s, op);
  EXPECT_EQ(p.target_spec.entities.size(), 1u);
  EXPECT_TRUE(cf::check(p.target_spec, p.target).all());
  // Judged against the unedited spec, the result is missing one object.
  EXPECT_FALSE(cf::check(s, p.target).count);
  EXPECT_TRUE(cf::check(s, p.source).count);
}

TEST(Edits, MoveAndAddLandInTheNamedDirection) {
  const SceneSpec s = two_entity_scene();
  cf::EditOp move;
  move.kind = cf::EditKind::kMove;
  move.target = 1;
  move.direction = cf::Relation::kAbove;
  EXPECT_EQ(cf::edit_pair(s, move).target_spec.entities[1].cell, (Cell{1, 3}));
  cf::EditOp add;
  add.kind = cf::EditKind::kAdd;
  add.target = 0;
  add.direction = cf::Relation::kRightOf;
  add.color = cf::Color::kGreen;
  add.shape = cf::Shape::kTriangle;
  const auto p = cf::edit_pair(s, add);
  ASSERT_EQ(p.target_spec.entities.size(), 3u);
  EXPECT_EQ(p.target_spec.entities[2].cell, (Cell{0, 1}));
  EXPECT_EQ(cf::Vocabulary::standard().decode(p.instruction),
            "add a green triangle right_of the red circle <EoS>");
  move.direction = cf::Relation::kLeftOf;
  move.target = 0;
  EXPECT_THROW(cf::edit_pair(s, move), cf::Error);  // would leave the grid
}
