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
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "canvasflow/config.hpp"
#include "canvasflow/model.hpp"
#include "canvasflow/scenes.hpp"
#include "canvasflow/trainer.hpp"

namespace canvasflow {

// ---------------------------------------------------------------------------
// Oracle checker

struct CheckOptions {
  double palette_tolerance = 0.3;     // L-inf distance to snap a pixel
  double max_off_palette = 0.05;      // larger fraction => invalid sample
  double min_area_fraction = 1.0 / 16;  // of one placement cell
};

struct CheckResult {
  bool valid = true;
  bool single_object = false;
  bool color_binding = false;
  bool count = false;
  bool position = false;
  bool motion = true;
  double off_palette = 0;

  bool all() const { return valid && single_object && color_binding && count && position && motion; }
};

struct Component {
  int color = 0;
  Shape shape = Shape::kCircle;
  std::size_t area = 0;
  double cy = 0, cx = 0;
  Cell cell;
};

// Palette index (0..7), -1 for background, -2 for off-palette.
inline int snap_pixel(float r, float g, float b, double tol) {
  auto dist = [&](float pr, float pg, float pb) {
    return std::max({std::abs(r - pr), std::abs(g - pg), std::abs(b - pb)});
  };
  int best = -1;
  double bd = dist(0, 0, 0);
  for (int k = 0; k < kNumColors; ++k) {
    const auto& p = palette()[k];
    const double d = dist(p[0], p[1], p[2]);
    if (d < bd) {
      bd = d;
      best = k;
    }
  }
  return bd <= tol ? best : -2;
}

// Square fills its bounding box; a triangle's centroid sits below the box
// center (by 1/6 of the height in the continuum), a circle's on it.
inline Shape classify_shape(double fill, double centroid_offset) {
  if (fill > 0.95) return Shape::kSquare;
  if (centroid_offset > 0.05) return Shape::kTriangle;
  return Shape::kCircle;
}

// 4-connected components of each palette color in one frame.
inline std::vector<Component> find_components(const PixelMedia<float>& img, std::size_t frame,
                                              const CheckOptions& opt, double* off_palette) {
  const std::size_t H = img.height, W = img.width;
  std::vector<int> label(H * W);
  std::size_t off = 0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const int l = snap_pixel(img.at(frame, 0, y, x), img.at(frame, 1, y, x),
                               img.at(frame, 2, y, x), opt.palette_tolerance);
      label[y * W + x] = l;
      off += l == -2;
    }
  if (off_palette) *off_palette = static_cast<double>(off) / static_cast<double>(H * W);
  const double cell_area = static_cast<double>(H / kPlacementGrid) * static_cast<double>(W / kPlacementGrid);
  const std::size_t min_area = static_cast<std::size_t>(std::max(1.0, opt.min_area_fraction * cell_area));
  std::vector<std::uint8_t> seen(H * W, 0);
  std::vector<Component> out;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < H * W; ++s) {
    if (seen[s] || label[s] < 0) continue;
    const int color = label[s];
    std::size_t area = 0, y0 = H, y1 = 0, x0 = W, x1 = 0;
    double sy = 0, sx = 0;
    stack.assign(1, s);
    seen[s] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t y = p / W, x = p % W;
      ++area;
      sy += static_cast<double>(y) + 0.5;
      sx += static_cast<double>(x) + 0.5;
      y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
      auto push = [&](std::size_t q) {
        if (!seen[q] && label[q] == color) {
          seen[q] = 1;
          stack.push_back(q);
        }
      };
      if (y > 0) push(p - W);
      if (y + 1 < H) push(p + W);
      if (x > 0) push(p - 1);
      if (x + 1 < W) push(p + 1);
    }
    if (area < min_area) continue;
    Component c;
    c.color = color;
    c.area = area;
    c.cy = sy / static_cast<double>(area);
    c.cx = sx / static_cast<double>(area);
    const double box = static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
    const double box_h = static_cast<double>(y1 - y0 + 1);
    const double offset = (c.cy - (static_cast<double>(y0) + box_h / 2)) / box_h;
    c.shape = classify_shape(static_cast<double>(area) / box, offset);
    const double ch = static_cast<double>(H) / kPlacementGrid, cw = static_cast<double>(W) / kPlacementGrid;
    c.cell = {std::clamp(static_cast<int>(c.cy / ch), 0, kPlacementGrid - 1),
              std::clamp(static_cast<int>(c.cx / cw), 0, kPlacementGrid - 1)};
    out.push_back(c);
  }
  return out;
}

namespace detail {

inline bool same_kind(const Component& c, const Entity& e) {
  return c.shape == e.shape && c.color == static_cast<int>(e.color);
}

}  // namespace detail

// Criteria (per frame, all frames must agree):
//   single_object  some component matches an entity's shape and color
//   count          #components == #entities
//   color_binding  every component matches some entity's shape and color
//   position       relations hold between matching components when the scene
//                  has relations; otherwise every component sits in the
//                  cell of a same-shape entity
//   motion         (video) some same-kind component pair between the first
//                  and last frame shows the first entity's displacement
inline CheckResult check(const SceneSpec& spec, const PixelMedia<float>& image,
                         const CheckOptions& opt = {}) {
  if (image.height != spec.height || image.width != spec.width || image.frames != spec.frames)
    throw shape_error("check: image dimensions differ from the scene");
  CheckResult r;
  r.single_object = r.color_binding = r.count = r.position = true;
  std::vector<std::vector<Component>> per_frame;
  for (std::size_t f = 0; f < image.frames; ++f) {
    double off = 0;
    auto comps = find_components(image, f, opt, &off);
    r.off_palette = std::max(r.off_palette, off);
    std::vector<Entity> ents;
    for (const auto& e : spec.entities) {
      Entity at = e;
      at.cell = e.cell_at(f);
      ents.push_back(at);
    }
    bool any = false, bound = true;
    for (const auto& c : comps) {
      bool match = false;
      for (const auto& e : ents) match = match || detail::same_kind(c, e);
      any = any || match;
      bound = bound && match;
    }
    r.single_object = r.single_object && any;
    r.color_binding = r.color_binding && bound;
    r.count = r.count && comps.size() == ents.size();
    bool pos = true;
    if (!spec.relations.empty()) {
      for (const auto& rel : spec.relations) {
        bool ok = false;
        for (const auto& a : comps)
          for (const auto& b : comps)
            if (&a != &b && detail::same_kind(a, ents[rel.subject]) &&
                detail::same_kind(b, ents[rel.object]) && relation_holds(rel.relation, a.cell, b.cell))
              ok = true;
        pos = pos && ok;
      }
    } else {
      for (const auto& c : comps) {
        bool ok = false;
        for (const auto& e : ents) ok = ok || (c.shape == e.shape && c.cell == e.cell);
        pos = pos && ok;
      }
    }
    r.position = r.position && pos;
    per_frame.push_back(std::move(comps));
  }
  if (image.frames > 1 && !spec.entities.empty()) {
    // Same-kind twins are allowed, so any same-kind pair with the expected
    // displacement counts.
    const Entity& e = spec.entities[0];
    const Cell ea = e.cell_at(0), eb = e.cell_at(image.frames - 1);
    bool moved = false;
    for (const auto& a : per_frame.front())
      for (const auto& b : per_frame.back())
        moved = moved || (detail::same_kind(a, e) && detail::same_kind(b, e) &&
                          b.cell.row - a.cell.row == eb.row - ea.row &&
                          b.cell.col - a.cell.col == eb.col - ea.col);
    r.motion = moved;
  }
  if (r.off_palette > opt.max_off_palette) {
    r.valid = false;
    r.single_object = r.color_binding = r.count = r.position = r.motion = false;
  }
  return r;
}

// ---------------------------------------------------------------------------
// mini-GenEval

struct CategoryScore {
  std::size_t passed = 0, total = 0;
  double accuracy() const { return total ? static_cast<double>(passed) / static_cast<double>(total) : 0.0; }
};

struct MiniGenEvalReport {
  std::map<std::string, CategoryScore> categories;
  double overall = 0;

  json to_json() const {
    json j;
    for (const auto& [k, v] : categories)
      j["categories"][k] = {{"passed", v.passed}, {"total", v.total}, {"accuracy", v.accuracy()}};
    j["overall"] = overall;
    return j;
  }
};

// Criteria a prompt category must satisfy.
inline bool prompt_passes(PromptKind kind, const CheckResult& c) {
  if (!c.valid) return false;
  switch (kind) {
    case PromptKind::kSingleObject: return c.single_object;
    case PromptKind::kColorBinding: return c.color_binding && c.count;
    case PromptKind::kCount: return c.count && c.color_binding;
    case PromptKind::kPosition: return c.position && c.color_binding && c.count;
    case PromptKind::kMotion: return c.motion && c.color_binding && c.count;
  }
  return false;
}

// Held-out prompts, categories cycled evenly. Video suites use t2v motion
// prompts.
inline std::vector<Sample> prompt_suite(std::uint64_t seed, std::size_t n, MediaMode mode,
                                        const SceneOptions& opt) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = mix_seed(seed ^ 0x5eed5eedULL, i);
    if (mode == MediaMode::kVideo) {
      out.push_back(generate_one(s, Task::kT2V, opt));
      continue;
    }
    std::mt19937_64 rng(s);
    Sample smp;
    smp.id = s;
    smp.task = Task::kT2I;
    smp.spec = random_image_scene(rng, static_cast<PromptKind>(i % 4), opt);
    smp.caption = caption(smp.spec);
    smp.media = render(smp.spec);
    out.push_back(std::move(smp));
  }
  return out;
}

using Generator = std::function<PixelMedia<float>(const Sample&, std::size_t index)>;

inline MiniGenEvalReport mini_geneval(const Generator& gen, const std::vector<Sample>& suite) {
  MiniGenEvalReport rep;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const auto& s = suite[i];
    auto& cat = rep.categories[prompt_kind_name(s.spec.kind)];
    ++cat.total;
    cat.passed += prompt_passes(s.spec.kind, check(s.spec, gen(s, i)));
  }
  double sum = 0;
  for (const auto& [k, v] : rep.categories) sum += v.accuracy();
  rep.overall = rep.categories.empty() ? 0.0 : sum / static_cast<double>(rep.categories.size());
  return rep;
}

template <typename T>
Generator model_generator(const CanvasModel<T>& model, std::uint64_t seed, std::size_t steps) {
  return [&model, seed, steps](const Sample& s, std::size_t i) {
    auto ex = make_example<T>(s, model.config());
    return model.decode_generated(model.sample(ex, mix_seed(seed, i), steps), ex);
  };
}

// ---------------------------------------------------------------------------
// Edit metrics

struct EditMetrics {
  std::optional<double> psnr;  // +inf when the preserved region is identical
  double changed_fraction = 0;
};

inline EditMetrics edit_metrics(const PixelMedia<float>& source, const PixelMedia<float>& edited,
                                const std::vector<std::uint8_t>& mask) {
  if (source.frames != edited.frames || source.height != edited.height || source.width != edited.width)
    throw shape_error("edit_metrics: dimension mismatch");
  const std::size_t n = source.frames * source.height * source.width;
  if (mask.size() != n) throw shape_error("edit_metrics: mask size mismatch");
  double se = 0;
  std::size_t outside = 0, inside = 0, changed = 0;
  for (std::size_t f = 0; f < source.frames; ++f)
    for (std::size_t y = 0; y < source.height; ++y)
      for (std::size_t x = 0; x < source.width; ++x) {
        const std::size_t p = (f * source.height + y) * source.width + x;
        double dmax = 0, sq = 0;
        for (std::size_t c = 0; c < 3; ++c) {
          const double d = static_cast<double>(edited.at(f, c, y, x)) - source.at(f, c, y, x);
          sq += d * d;
          dmax = std::max(dmax, std::abs(d));
        }
        if (mask[p]) {
          ++inside;
          changed += dmax > 0.5 / 255.0;
        } else {
          ++outside;
          se += sq;
        }
      }
  EditMetrics m;
  if (outside) {
    const double mse = se / static_cast<double>(3 * outside);
    m.psnr = mse == 0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
  }
  m.changed_fraction = inside ? static_cast<double>(changed) / static_cast<double>(inside) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// PCA canvas maps

struct PcaMaps {
  std::size_t height = 0, width = 0;
  std::size_t components = 0;
  bool degenerate = false;  // fewer than 3 components with positive variance
  std::vector<double> eigenvalues;
  std::vector<std::vector<double>> basis;  // unit vectors in feature space
  std::vector<std::vector<double>> maps;   // per component, [height*width] in [0,1]
};

// Top-3 principal components of the rows of `features` ([h*w, D]).
inline PcaMaps pca_maps(const Tensor<double>& features, std::size_t h, std::size_t w,
                        double rel_tol = 1e-9) {
  if (features.rows() != h * w) throw shape_error("pca: feature rows != h * w");
  const std::size_t n = features.rows(), D = features.cols();
  Eigen::MatrixXd X(n, D);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < D; ++j) X(i, j) = features(i, j);
  X.rowwise() -= X.colwise().mean();
  const Eigen::MatrixXd C = X.transpose() * X / static_cast<double>(std::max<std::size_t>(n, 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
  PcaMaps out;
  out.height = h;
  out.width = w;
  const double trace = C.trace();
  for (int k = static_cast<int>(D) - 1; k >= 0 && out.components < 3; --k) {
    const double ev = es.eigenvalues()(k);
    if (!(ev > rel_tol * trace) || trace <= 0) break;
    Eigen::VectorXd v = es.eigenvectors().col(k).normalized();
    Eigen::VectorXd proj = X * v;
    const double lo = proj.minCoeff(), hi = proj.maxCoeff();
    std::vector<double> map(n);
    for (std::size_t i = 0; i < n; ++i)
      map[i] = hi > lo ? (proj(static_cast<Eigen::Index>(i)) - lo) / (hi - lo) : 0.0;
    out.eigenvalues.push_back(ev);
    out.basis.emplace_back(v.data(), v.data() + D);
    out.maps.push_back(std::move(map));
    ++out.components;
  }
  out.degenerate = out.components < 3;
  return out;
}

struct CanvasMap {
  struct Keyframe {
    std::size_t keyframe = 0, frame = 0;  // frame: generated-frame index
    PcaMaps pca;
  };
  std::vector<Keyframe> keyframes;
};

// Per-keyframe PCA of the connector's fuse-block features at t_mid.
template <typename T>
CanvasMap canvas_pca(const CanvasModel<T>& model, const Example<T>& ex, double t_mid,
                     std::uint64_t seed, std::size_t steps = 8) {
  if (!model.uses_canvas()) throw config_error("canvas_pca: model has no canvas branch");
  auto r = model.canvas_features(ex, t_mid, seed, steps);
  if (!r.features.defined()) throw shape_error("canvas_pca: no features captured");
  const GridLayout tgt = model.canvas_target(ex);
  const std::size_t per = tgt.height * tgt.width;
  const std::size_t K = model.canvas()->layout.frames;
  CanvasMap map;
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t a = keyframe_anchor(k, K, ex.generated_frames);
    Tensor<double> f(per, r.features.cols());
    for (std::size_t i = 0; i < per; ++i)
      for (std::size_t j = 0; j < f.cols(); ++j) f(i, j) = r.features.value()(a * per + i, j);
    map.keyframes.push_back({k, a, pca_maps(f, tgt.height, tgt.width)});
  }
  return map;
}

// RGB image of the first three component maps (missing components black).
inline PixelMedia<float> pca_image(const PcaMaps& p) {
  PixelMedia<float> img(1, p.height, p.width);
  for (std::size_t c = 0; c < p.maps.size() && c < 3; ++c)
    for (std::size_t y = 0; y < p.height; ++y)
      for (std::size_t x = 0; x < p.width; ++x)
        img.at(0, c, y, x) = static_cast<float>(p.maps[c][y * p.width + x]);
  return img;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationArm {
  std::string name;
  ExperimentConfig config;
  std::size_t requested_keyframes = 0;  // keyframe sweep only
};

inline std::size_t clamp_keyframes(std::size_t requested, std::size_t frames) {
  static constexpr std::size_t kSupported[] = {1, 3, 6, 11, 31};
  std::size_t best = 1;
  for (auto k : kSupported)
    if (k <= std::min(requested, frames)) best = k;
  return best;
}

// Arms of a suite. table3 removes components cumulatively, one row per
// removal, then the canvas-free baseline.
inline std::vector<AblationArm> ablation_arms(const ExperimentConfig& base, const std::string& suite) {
  std::vector<AblationArm> arms;
  auto full = base;
  full.model.connector.enabled = true;
  if (suite == "table3") {
    if (!variant_uses_canvas(full.model.dit.variant))
      full.model.dit.variant = ConditioningVariant::kCanvasPlusText;
    auto c = full;
    arms.push_back({"full", c});
    c.model.connector.use_timestep_cond = false;
    arms.push_back({"no_timestep_cond", c});
    c.model.connector.use_dit_block = false;
    arms.push_back({"no_dit_block", c});
    c.model.connector.use_align_block = false;
    arms.push_back({"no_align_block", c});
    c.model.connector.fuse_after_patchify = false;
    arms.push_back({"before_patchify", c});
    auto b = full;
    b.model.connector.enabled = false;
    arms.push_back({"baseline", b});
  } else if (suite == "keyframes") {
    if (base.model.codec.mode != MediaMode::kVideo)
      throw config_error("ablate: the keyframes suite needs codec.mode = video");
    const std::size_t frames = base.model.generated_frames();
    for (std::size_t k : {1, 3, 6, 11, 31}) {
      auto c = full;
      c.model.connector.keyframes = clamp_keyframes(k, frames);
      arms.push_back({"keyframes_" + std::to_string(k), c, k});
    }
    auto b = full;
    b.model.connector.enabled = false;
    arms.push_back({"no_canvas", b});
  } else if (suite == "mrope") {
    auto c = full;
    c.model.mllm.use_mrope = true;
    arms.push_back({"mrope", c});
    c.model.mllm.use_mrope = false;
    arms.push_back({"rope_1d", c});
  } else if (suite == "conditioning") {
    for (auto v : {ConditioningVariant::kTextOnly, ConditioningVariant::kQuery1d,
                   ConditioningVariant::kCanvas, ConditioningVariant::kCanvasPlusText}) {
      auto c = full;
      c.model.dit.variant = v;
      arms.push_back({variant_name(v), c});
    }
  } else {
    throw config_error("ablate: unknown suite '" + suite + "'");
  }
  return arms;
}

struct AblationRow {
  std::string arm;
  std::uint64_t seed = 0;
  std::size_t keyframes = 0;
  double step0_loss = 0, final_loss = 0;
  MiniGenEvalReport report;
};

struct AblationTable {
  std::string suite;
  std::vector<std::string> arms;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  std::string to_csv() const {
    std::ostringstream o;
    o.precision(9);
    o << "suite,arm,seed,keyframes,step0_loss,final_loss,geneval_overall\n";
    for (const auto& r : rows)
      o << suite << ',' << r.arm << ',' << r.seed << ',' << r.keyframes << ',' << r.step0_loss << ','
        << r.final_loss << ',' << r.report.overall << '\n';
    for (const auto& a : arms) {
      double s0 = 0, fl = 0, ov = 0;
      std::size_t n = 0, k = 0;
      for (const auto& r : rows)
        if (r.arm == a) s0 += r.step0_loss, fl += r.final_loss, ov += r.report.overall, ++n, k = r.keyframes;
      if (n)
        o << suite << ',' << a << ",mean," << k << ',' << s0 / double(n) << ',' << fl / double(n) << ','
          << ov / double(n) << '\n';
    }
    return o.str();
  }

  json to_json() const {
    json j;
    j["suite"] = suite;
    j["rows"] = json::array();
    for (const auto& r : rows)
      j["rows"].push_back({{"arm", r.arm},
                           {"seed", r.seed},
                           {"keyframes", r.keyframes},
                           {"step0_loss", r.step0_loss},
                           {"final_loss", r.final_loss},
                           {"geneval", r.report.to_json()}});
    return j;
  }
};

struct ArmResult {
  double step0_loss = 0, final_loss = 0;
  MiniGenEvalReport report;
};

// Stage-3 training from scratch for `steps`, then mini-GenEval.
template <typename T = float>
ArmResult run_arm(const ExperimentConfig& cfg, std::size_t steps, const std::vector<Sample>& suite) {
  CanvasModel<T> model(cfg.model, cfg.seed);
  auto plan = cfg.trainer.plan(3);
  plan.steps = steps;
  Trainer<T> tr(model, plan, training_source(cfg, plan), cfg.seed);
  ArmResult res;
  std::vector<double> losses;
  for (std::size_t s = 0; s < steps; ++s) losses.push_back(tr.train_step().loss);
  res.step0_loss = losses.empty() ? tr.peek_loss() : losses.front();
  const std::size_t tail = std::min<std::size_t>(20, losses.size());
  for (std::size_t i = losses.size() - tail; i < losses.size(); ++i) res.final_loss += losses[i];
  res.final_loss = tail ? res.final_loss / static_cast<double>(tail) : res.step0_loss;
  res.report = mini_geneval(model_generator(model, mix_seed(cfg.seed, 77), cfg.eval.sample_steps), suite);
  return res;
}

using AblationProgress = std::function<void(const AblationRow&)>;

// One row per arm x seed. Arms whose configs coincide (clamped keyframe
// counts) are trained once per seed.
template <typename T = float>
AblationTable run_ablations(const ExperimentConfig& base, const std::string& suite_name,
                            const AblationProgress& progress = {}) {
  auto arms = ablation_arms(base, suite_name);
  if (base.eval.seeds.empty()) throw config_error("ablate: eval.seeds is empty");
  AblationTable table;
  table.suite = suite_name;
  table.seeds = base.eval.seeds;
  for (const auto& a : arms) table.arms.push_back(a.name);
  const auto prompts = prompt_suite(base.eval.prompt_seed, base.eval.prompts, base.model.codec.mode,
                                    base.model.scene_options());
  for (auto seed : base.eval.seeds) {
    std::map<std::string, ArmResult> cache;
    for (const auto& a : arms) {
      auto cfg = a.config;
      cfg.seed = seed;
      const std::string key = to_json(cfg).dump();
      if (!cache.count(key)) cache[key] = run_arm<T>(cfg, base.eval.ablation_steps, prompts);
      const auto& r = cache[key];
      AblationRow row{a.name, seed, cfg.model.connector.enabled ? cfg.model.connector.keyframes : 0,
                      r.step0_loss, r.final_loss, r.report};
      if (progress) progress(row);
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

}  // namespace canvasflow
