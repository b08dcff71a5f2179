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
#pragma once

#include <algorithm>
#include <cmath>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "canvasflow/latent_codec.hpp"
#include "canvasflow/vocabulary.hpp"

namespace canvasflow {

inline constexpr int kPlacementGrid = 4;

enum class Shape : std::uint8_t { kCircle, kSquare, kTriangle };
enum class Color : std::uint8_t { kRed, kGreen, kBlue, kYellow, kCyan, kMagenta, kWhite, kOrange };
enum class Relation : std::uint8_t { kLeftOf, kRightOf, kAbove, kBelow };
enum class Task : std::uint8_t { kT2I, kT2V, kI2V, kEdit, kRef2V, kV2V };
enum class PromptKind : std::uint8_t { kSingleObject, kColorBinding, kCount, kPosition, kMotion };
enum class EditKind : std::uint8_t { kRecolor, kRemove, kAdd, kMove };

inline constexpr int kNumColors = 8;
inline constexpr int kNumShapes = 3;

inline const std::array<std::array<float, 3>, kNumColors>& palette() {
  static const std::array<std::array<float, 3>, kNumColors> p{{
      {1.f, 0.f, 0.f},
      {0.f, 1.f, 0.f},
      {0.f, 0.f, 1.f},
      {1.f, 1.f, 0.f},
      {0.f, 1.f, 1.f},
      {1.f, 0.f, 1.f},
      {1.f, 1.f, 1.f},
      {1.f, 128.f / 255.f, 0.f},
  }};
  return p;
}

inline const char* color_word(Color c) {
  static const char* w[] = {"red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange"};
  return w[static_cast<int>(c)];
}
inline const char* shape_word(Shape s, bool plural = false) {
  static const char* w[] = {"circle", "square", "triangle"};
  static const char* p[] = {"circles", "squares", "triangles"};
  return plural ? p[static_cast<int>(s)] : w[static_cast<int>(s)];
}
inline const char* relation_word(Relation r) {
  static const char* w[] = {"left_of", "right_of", "above", "below"};
  return w[static_cast<int>(r)];
}
inline const char* task_name(Task t) {
  static const char* w[] = {"t2i", "t2v", "i2v", "edit", "ref2v", "v2v"};
  return w[static_cast<int>(t)];
}
inline std::optional<Task> task_from_name(const std::string& s) {
  for (int i = 0; i < 6; ++i)
    if (s == task_name(static_cast<Task>(i))) return static_cast<Task>(i);
  return std::nullopt;
}
inline bool task_is_video(Task t) { return t == Task::kT2V || t == Task::kI2V || t == Task::kRef2V || t == Task::kV2V; }
inline const char* prompt_kind_name(PromptKind k) {
  static const char* w[] = {"single_object", "color_binding", "count", "position", "motion"};
  return w[static_cast<int>(k)];
}

struct Cell {
  int row = 0, col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct Entity {
  Shape shape = Shape::kCircle;
  Color color = Color::kRed;
  Cell cell;
  int vrow = 0, vcol = 0;  // cells per frame

  // Moves until it would leave the grid, then stays at the boundary.
  Cell cell_at(std::size_t frame) const {
    auto clamp = [](int v) { return std::clamp(v, 0, kPlacementGrid - 1); };
    const int f = static_cast<int>(frame);
    return {clamp(cell.row + vrow * f), clamp(cell.col + vcol * f)};
  }
  friend bool operator==(const Entity&, const Entity&) = default;
};

struct RelationSpec {
  std::size_t subject = 0, object = 0;
  Relation relation = Relation::kLeftOf;
  friend bool operator==(const RelationSpec&, const RelationSpec&) = default;
};

inline bool relation_holds(Relation r, Cell a, Cell b) {
  switch (r) {
    case Relation::kLeftOf: return a.col < b.col;
    case Relation::kRightOf: return a.col > b.col;
    case Relation::kAbove: return a.row < b.row;
    case Relation::kBelow: return a.row > b.row;
  }
  return false;
}

struct SceneSpec {
  std::size_t height = 64, width = 64, frames = 1;
  std::vector<Entity> entities;
  std::vector<RelationSpec> relations;
  Task task = Task::kT2I;
  PromptKind kind = PromptKind::kSingleObject;

  // Rejects overlapping placements, out-of-grid cells and relations that do
  // not hold.
  void validate() const {
    if (height % kPlacementGrid || width % kPlacementGrid)
      throw shape_error("scene: canvas must be divisible by the placement grid");
    // cell_at clamps, so the starting cell needs its own bounds check.
    for (const auto& e : entities)
      if (e.cell.row < 0 || e.cell.col < 0 || e.cell.row >= kPlacementGrid ||
          e.cell.col >= kPlacementGrid)
        throw shape_error("scene: entity outside the placement grid");
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t i = 0; i < entities.size(); ++i) {
        const Cell a = entities[i].cell_at(f);
        for (std::size_t j = i + 1; j < entities.size(); ++j)
          if (a == entities[j].cell_at(f))
            throw shape_error("scene: overlapping placement at frame " + std::to_string(f));
      }
    for (const auto& r : relations) {
      if (r.subject >= entities.size() || r.object >= entities.size())
        throw shape_error("scene: relation refers to missing entity");
      if (!relation_holds(r.relation, entities[r.subject].cell, entities[r.object].cell))
        throw shape_error("scene: relation inconsistent with positions");
    }
  }
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

// Shape mask inside one placement cell of size ch x cw (local coordinates).
inline bool shape_covers(Shape s, std::size_t ch, std::size_t cw, std::size_t y, std::size_t x) {
  const double m = std::max<double>(1.0, std::floor(static_cast<double>(std::min(ch, cw)) / 8.0));
  const double yy = static_cast<double>(y) + 0.5, xx = static_cast<double>(x) + 0.5;
  const double cy = static_cast<double>(ch) / 2.0, cx = static_cast<double>(cw) / 2.0;
  switch (s) {
    case Shape::kSquare:
      return yy > m && yy < static_cast<double>(ch) - m && xx > m && xx < static_cast<double>(cw) - m;
    case Shape::kCircle: {
      const double r = std::min(cy, cx) - m;
      return (yy - cy) * (yy - cy) + (xx - cx) * (xx - cx) <= r * r;
    }
    case Shape::kTriangle: {
      const double top = m, bottom = static_cast<double>(ch) - m;
      if (yy < top || yy > bottom) return false;
      const double frac = (yy - top) / (bottom - top);
      return std::abs(xx - cx) <= 0.5 + frac * (cx - m - 0.5);
    }
  }
  return false;
}

// Exact-palette rasterization on a black background; later entities draw
// over earlier ones.
inline PixelMedia<float> render(const SceneSpec& spec) {
  spec.validate();
  PixelMedia<float> img(spec.frames, spec.height, spec.width);
  const std::size_t ch = spec.height / kPlacementGrid, cw = spec.width / kPlacementGrid;
  for (std::size_t f = 0; f < spec.frames; ++f)
    for (const auto& e : spec.entities) {
      const Cell c = e.cell_at(f);
      const auto& rgb = palette()[static_cast<int>(e.color)];
      for (std::size_t y = 0; y < ch; ++y)
        for (std::size_t x = 0; x < cw; ++x)
          if (shape_covers(e.shape, ch, cw, y, x))
            for (int k = 0; k < 3; ++k)
              img.at(f, k, c.row * ch + y, c.col * cw + x) = rgb[k];
    }
  return img;
}

inline const char* motion_word(const Entity& e) {
  if (e.vcol < 0) return "moving_left";
  if (e.vcol > 0) return "moving_right";
  if (e.vrow < 0) return "moving_up";
  if (e.vrow > 0) return "moving_down";
  return "static";
}

inline const char* count_word(std::size_t n) {
  static const char* w[] = {"one", "two", "three", "four"};
  return w[std::min<std::size_t>(n, 4) - 1];
}

// Caption grammar (all captions end with <EoS>):
//   single:   a <color> <shape>
//   binding:  a <c1> <s1> and a <c2> <s2>
//   count:    <n> <color> <shape(s)>
//   position: a <c1> <s1> <relation> a <c2> <s2>
//   motion:   a <color> <shape> <motion> [and a <c2> <s2>]
inline std::string caption_text(const SceneSpec& spec) {
  const auto& es = spec.entities;
  auto np = [](const Entity& e) {
    return std::string("a ") + color_word(e.color) + " " + shape_word(e.shape);
  };
  std::string s;
  switch (spec.kind) {
    case PromptKind::kSingleObject: s = np(es.at(0)); break;
    case PromptKind::kColorBinding: s = np(es.at(0)) + " and " + np(es.at(1)); break;
    case PromptKind::kCount:
      s = std::string(count_word(es.size())) + " " + color_word(es.at(0).color) + " " +
          shape_word(es.at(0).shape, es.size() > 1);
      break;
    case PromptKind::kPosition: {
      const auto& r = spec.relations.at(0);
      s = np(es.at(r.subject)) + " " + relation_word(r.relation) + " " + np(es.at(r.object));
      break;
    }
    case PromptKind::kMotion:
      s = np(es.at(0)) + " " + motion_word(es.at(0));
      if (es.size() > 1) s += " and " + np(es[1]);
      break;
  }
  return s + " <EoS>";
}

inline std::vector<int> caption(const SceneSpec& spec,
                                const Vocabulary& vocab = Vocabulary::standard()) {
  return vocab.encode(caption_text(spec));
}

struct EditOp {
  EditKind kind = EditKind::kRecolor;
  std::size_t target = 0;   // entity index (recolor/remove/move; anchor for add)
  Color color = Color::kRed;  // recolor / add
  Shape shape = Shape::kCircle;  // add
  Relation direction = Relation::kRightOf;  // move / add placement
};

struct EditPair {
  SceneSpec source_spec, target_spec;
  PixelMedia<float> source, target;
  std::vector<int> instruction;
  std::vector<std::uint8_t> mask;  // per pixel (frame, row, col): 1 where changed
};

inline Cell step(Cell c, Relation dir) {
  switch (dir) {
    case Relation::kLeftOf: return {c.row, c.col - 1};
    case Relation::kRightOf: return {c.row, c.col + 1};
    case Relation::kAbove: return {c.row - 1, c.col};
    case Relation::kBelow: return {c.row + 1, c.col};
  }
  return c;
}

inline const char* direction_word(Relation r) {
  static const char* w[] = {"left", "right", "up", "down"};
  return w[static_cast<int>(r)];
}

inline std::vector<std::uint8_t> difference_mask(const PixelMedia<float>& a,
                                                 const PixelMedia<float>& b) {
  std::vector<std::uint8_t> m(a.frames * a.height * a.width, 0);
  for (std::size_t f = 0; f < a.frames; ++f)
    for (std::size_t y = 0; y < a.height; ++y)
      for (std::size_t x = 0; x < a.width; ++x)
        for (int c = 0; c < 3; ++c)
          if (a.at(f, c, y, x) != b.at(f, c, y, x)) m[(f * a.height + y) * a.width + x] = 1;
  return m;
}

// Applies an edit. Instruction grammar:
//   recolor the <c> <s> to <c2> | remove the <c> <s> |
//   add a <c2> <s2> <relation> the <c> <s> | move the <c> <s> <direction>
inline EditPair edit_pair(const SceneSpec& spec, const EditOp& op,
                          const Vocabulary& vocab = Vocabulary::standard()) {
  spec.validate();
  if (op.target >= spec.entities.size()) throw shape_error("edit: target entity missing");
  EditPair p;
  p.source_spec = spec;
  p.target_spec = spec;
  auto& tgt = p.target_spec;
  const Entity& e = spec.entities[op.target];
  const std::string the = std::string("the ") + color_word(e.color) + " " + shape_word(e.shape);
  std::string text;
  switch (op.kind) {
    case EditKind::kRecolor:
      tgt.entities[op.target].color = op.color;
      text = std::string("recolor ") + the + " to " + color_word(op.color);
      break;
    case EditKind::kRemove:
      tgt.entities.erase(tgt.entities.begin() + static_cast<long>(op.target));
      tgt.relations.clear();
      text = "remove " + the;
      break;
    case EditKind::kAdd: {
      Entity n;
      n.shape = op.shape;
      n.color = op.color;
      // placed adjacent to the anchor; "add X left_of Y" puts X one cell left
      n.cell = step(e.cell, op.direction);
      tgt.entities.push_back(n);
      text = std::string("add a ") + color_word(op.color) + " " + shape_word(op.shape) + " " +
             relation_word(op.direction) + " " + the;
      break;
    }
    case EditKind::kMove:
      tgt.entities[op.target].cell = step(e.cell, op.direction);
      tgt.relations.clear();
      text = "move " + the + " " + direction_word(op.direction);
      break;
  }
  tgt.validate();
  p.source = render(spec);
  p.target = render(tgt);
  p.instruction = vocab.encode(text + " <EoS>");
  p.mask = difference_mask(p.source, p.target);
  return p;
}

struct SceneOptions {
  std::size_t height = 64, width = 64;
  std::size_t video_frames = 9;
};

struct Sample {
  std::uint64_t id = 0;
  Task task = Task::kT2I;
  SceneSpec spec;                 // scene the output should depict
  std::vector<int> caption;       // prompt or instruction, ends with <EoS>
  PixelMedia<float> media;        // generation target
  std::optional<PixelMedia<float>> source;     // edit / v2v input
  std::optional<PixelMedia<float>> reference;  // ref2v reference image
  std::optional<SceneSpec> source_spec;
  std::vector<std::uint8_t> edit_mask;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL));
}

namespace detail {

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline Cell random_free_cell(std::mt19937_64& rng, const std::vector<Cell>& used) {
  std::vector<Cell> free;
  for (int r = 0; r < kPlacementGrid; ++r)
    for (int c = 0; c < kPlacementGrid; ++c) {
      Cell x{r, c};
      if (std::find(used.begin(), used.end(), x) == used.end()) free.push_back(x);
    }
  return free[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(free.size()) - 1))];
}

inline Entity random_entity(std::mt19937_64& rng, const std::vector<Cell>& used) {
  Entity e;
  e.shape = static_cast<Shape>(uniform_int(rng, 0, kNumShapes - 1));
  e.color = static_cast<Color>(uniform_int(rng, 0, kNumColors - 1));
  e.cell = random_free_cell(rng, used);
  return e;
}

}  // namespace detail

// Still-image scene of one prompt category.
inline SceneSpec random_image_scene(std::mt19937_64& rng, PromptKind kind,
                                    const SceneOptions& opt) {
  using detail::uniform_int;
  SceneSpec s;
  s.height = opt.height;
  s.width = opt.width;
  s.kind = kind;
  std::vector<Cell> used;
  auto add = [&](Entity e) {
    used.push_back(e.cell);
    s.entities.push_back(e);
  };
  switch (kind) {
    case PromptKind::kSingleObject:
    case PromptKind::kMotion:
      add(detail::random_entity(rng, used));
      break;
    case PromptKind::kColorBinding: {
      Entity a = detail::random_entity(rng, used);
      add(a);
      Entity b = detail::random_entity(rng, used);
      while (b.color == a.color)
        b.color = static_cast<Color>(uniform_int(rng, 0, kNumColors - 1));
      while (b.shape == a.shape)
        b.shape = static_cast<Shape>(uniform_int(rng, 0, kNumShapes - 1));
      add(b);
      break;
    }
    case PromptKind::kCount: {
      const int n = uniform_int(rng, 1, 4);
      Entity a = detail::random_entity(rng, used);
      add(a);
      for (int i = 1; i < n; ++i) {
        Entity b = a;
        b.cell = detail::random_free_cell(rng, used);
        add(b);
      }
      break;
    }
    case PromptKind::kPosition: {
      for (;;) {
        used.clear();
        s.entities.clear();
        Entity a = detail::random_entity(rng, used);
        add(a);
        Entity b = detail::random_entity(rng, used);
        while (b.color == a.color && b.shape == a.shape)
          b.color = static_cast<Color>(uniform_int(rng, 0, kNumColors - 1));
        add(b);
        const auto rel = static_cast<Relation>(uniform_int(rng, 0, 3));
        if (relation_holds(rel, a.cell, b.cell)) {
          s.relations = {{0, 1, rel}};
          break;
        }
      }
      break;
    }
  }
  s.validate();
  return s;
}

// One moving entity, optionally with a static companion off its path.
inline SceneSpec random_video_scene(std::mt19937_64& rng, const SceneOptions& opt) {
  using detail::uniform_int;
  for (;;) {
    SceneSpec s;
    s.height = opt.height;
    s.width = opt.width;
    s.frames = opt.video_frames;
    s.kind = PromptKind::kMotion;
    Entity a = detail::random_entity(rng, {});
    switch (uniform_int(rng, 0, 4)) {
      case 0: a.vcol = -1; break;
      case 1: a.vcol = 1; break;
      case 2: a.vrow = -1; break;
      case 3: a.vrow = 1; break;
      default: break;
    }
    s.entities.push_back(a);
    if (uniform_int(rng, 0, 1)) {
      std::vector<Cell> path;
      for (std::size_t f = 0; f < s.frames; ++f) path.push_back(a.cell_at(f));
      Entity b = detail::random_entity(rng, path);
      s.entities.push_back(b);
    }
    try {
      s.validate();
      return s;
    } catch (const Error&) {
    }
  }
}

inline EditOp random_edit(std::mt19937_64& rng, const SceneSpec& spec) {
  using detail::uniform_int;
  for (;;) {
    EditOp op;
    op.kind = static_cast<EditKind>(uniform_int(rng, 0, 3));
    op.target = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(spec.entities.size()) - 1));
    op.color = static_cast<Color>(uniform_int(rng, 0, kNumColors - 1));
    op.shape = static_cast<Shape>(uniform_int(rng, 0, kNumShapes - 1));
    op.direction = static_cast<Relation>(uniform_int(rng, 0, 3));
    if (op.kind == EditKind::kRecolor && op.color == spec.entities[op.target].color) continue;
    if (op.kind == EditKind::kRemove && spec.entities.size() < 2) continue;
    SceneSpec probe = spec;
    if (op.kind == EditKind::kAdd || op.kind == EditKind::kMove) {
      Cell c = step(spec.entities[op.target].cell, op.direction);
      if (c.row < 0 || c.col < 0 || c.row >= kPlacementGrid || c.col >= kPlacementGrid) continue;
      bool clash = false;
      for (std::size_t f = 0; f < spec.frames; ++f)
        for (std::size_t i = 0; i < spec.entities.size(); ++i)
          if (spec.entities[i].cell_at(f) == c) clash = true;
      if (clash) continue;
      if (op.kind == EditKind::kMove && (spec.entities[op.target].vrow || spec.entities[op.target].vcol))
        continue;
    }
    try {
      edit_pair(spec, op);
      return op;
    } catch (const Error&) {
    }
  }
}

// Deterministic sample for (seed, task).
inline Sample generate_one(std::uint64_t seed, Task task, const SceneOptions& opt = {},
                           const Vocabulary& vocab = Vocabulary::standard()) {
  std::mt19937_64 rng(seed);
  Sample s;
  s.id = seed;
  s.task = task;
  switch (task) {
    case Task::kT2I: {
      const auto kind = static_cast<PromptKind>(detail::uniform_int(rng, 0, 3));
      s.spec = random_image_scene(rng, kind, opt);
      s.spec.task = task;
      s.caption = caption(s.spec, vocab);
      s.media = render(s.spec);
      break;
    }
    case Task::kT2V:
    case Task::kI2V:
    case Task::kRef2V: {
      s.spec = random_video_scene(rng, opt);
      s.spec.task = task;
      s.caption = caption(s.spec, vocab);
      s.media = render(s.spec);
      if (task == Task::kRef2V) {
        SceneSpec ref = s.spec;
        ref.frames = 1;
        ref.entities.resize(1);
        ref.entities[0].vrow = ref.entities[0].vcol = 0;
        s.reference = render(ref);
      }
      break;
    }
    case Task::kEdit:
    case Task::kV2V: {
      SceneSpec src = task == Task::kEdit
                          ? random_image_scene(rng, static_cast<PromptKind>(detail::uniform_int(rng, 0, 3)), opt)
                          : random_video_scene(rng, opt);
      src.task = task;
      auto op = random_edit(rng, src);
      auto pair = edit_pair(src, op, vocab);
      s.spec = pair.target_spec;
      s.source_spec = pair.source_spec;
      s.caption = pair.instruction;
      s.media = pair.target;
      s.source = pair.source;
      s.edit_mask = pair.mask;
      break;
    }
  }
  return s;
}

inline std::vector<Sample> generate(std::uint64_t seed, Task task, std::size_t count,
                                    const SceneOptions& opt = {}) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_one(mix_seed(seed, i), task, opt));
  return out;
}

}  // namespace canvasflow
