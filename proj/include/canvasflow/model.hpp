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

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "canvasflow/connector.hpp"
#include "canvasflow/dit.hpp"
#include "canvasflow/latent_codec.hpp"
#include "canvasflow/mllm.hpp"
#include "canvasflow/scenes.hpp"

namespace canvasflow {

struct ModelConfig {
  CodecConfig codec;
  std::size_t height = 64, width = 64;
  std::size_t video_frames = 9;
  MllmConfig mllm;
  double context_dropout = 0.1;
  ConnectorConfig connector;
  DiTConfig dit;

  std::size_t latent_height() const { return height / codec.spatial_factor; }
  std::size_t latent_width() const { return width / codec.spatial_factor; }
  // Latent frames of the generated clip (1 in image mode).
  std::size_t generated_frames() const {
    return codec.mode == MediaMode::kImage ? 1 : 1 + (video_frames - 1) / kTemporalGroup;
  }
  SceneOptions scene_options() const { return {height, width, video_frames}; }
};

inline bool task_supported(Task t, MediaMode m) {
  return task_is_video(t) == (m == MediaMode::kVideo);
}

// One training/inference instance in latent cell layout. Reference frames
// (in-context clean latents) precede the generated frames.
template <typename T>
struct Example {
  Task task = Task::kT2I;
  std::vector<int> caption;
  std::optional<PixelMedia<T>> vision;
  FrameGrid grid;                       // all latent frames
  Tensor<T> target;                     // clean cells, [grid.size(), d]
  Tensor<T> condition;                  // channel condition or empty
  std::vector<std::uint8_t> reference;  // per frame: in-context, no canvas
  std::vector<std::uint8_t> pinned;     // per frame: held clean, t = 0
  std::vector<std::uint8_t> loss_mask;  // per frame: counted in the loss
  std::size_t generated_frames = 1;
};

template <typename T>
Example<T> make_example(const Sample& s, const ModelConfig& cfg) {
  if (!task_supported(s.task, cfg.codec.mode))
    throw config_error(std::string("model: task ") + task_name(s.task) +
                       " does not match the codec mode");
  auto cells = [&](const PixelMedia<float>& m) {
    return to_cells(encode(cast_media<T>(m), cfg.codec));
  };
  Example<T> ex;
  ex.task = s.task;
  ex.caption = s.caption;
  Tensor<T> gen = cells(s.media);
  const std::size_t hl = s.media.height / cfg.codec.spatial_factor;
  const std::size_t wl = s.media.width / cfg.codec.spatial_factor;
  const std::size_t per = hl * wl;
  ex.generated_frames = gen.rows() / per;
  Tensor<T> prefix(0, gen.cols());
  switch (s.task) {
    case Task::kT2I:
    case Task::kT2V:
      break;
    case Task::kEdit:
      ex.condition = cells(*s.source);
      ex.vision = cast_media<T>(*s.source);
      break;
    case Task::kI2V:
      ex.vision = cast_media<T>(s.media.frame(0));
      break;
    case Task::kRef2V:
      prefix = cells(*s.reference);
      ex.vision = cast_media<T>(*s.reference);
      break;
    case Task::kV2V:
      prefix = cells(*s.source);
      ex.vision = cast_media<T>(s.source->frame(0));
      break;
  }
  const std::size_t nref = prefix.rows() / per;
  ex.grid = {nref + ex.generated_frames, hl, wl};
  ex.target = Tensor<T>(ex.grid.size(), gen.cols());
  std::copy(prefix.data(), prefix.data() + prefix.size(), ex.target.data());
  std::copy(gen.data(), gen.data() + gen.size(), ex.target.data() + prefix.size());
  ex.reference.assign(ex.grid.frames, 0);
  for (std::size_t f = 0; f < nref; ++f) ex.reference[f] = 1;
  ex.pinned = ex.reference;
  if (s.task == Task::kI2V) ex.pinned[0] = 1;
  ex.loss_mask.resize(ex.grid.frames);
  for (std::size_t f = 0; f < ex.grid.frames; ++f) ex.loss_mask[f] = ex.pinned[f] ? 0 : 1;
  return ex;
}

template <typename T>
struct Condition {
  Var<T> context;  // [n, dit width], possibly 0 rows
  Var<T> canvas;   // interpolated canvas over generated frames, or undefined
};

// MLLM + context connector + canvas grid + canvas connector + DiT. Each
// sub-module draws its initialization from its own seeded stream, so adding
// or removing a branch leaves every other module's weights unchanged.
template <typename T>
class CanvasModel {
 public:
  CanvasModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.codec.validate();
    latent_grid_shape(cfg.codec.mode == MediaMode::kImage ? 1 : cfg.video_frames, cfg.height,
                      cfg.width, cfg.codec);
    if (cfg.latent_height() % 2 || cfg.latent_width() % 2)
      throw config_error("model: latent grid must have even sides for 2x2 patches");
    const auto& cc = cfg.connector;
    if (!cc.fuse_after_patchify && cc.use_dit_block)
      throw config_error("model: connector.fuse_after_patchify=false requires use_dit_block=false");
    auto stream = [seed](std::uint64_t k) { return std::mt19937_64(mix_seed(seed, k)); };
    auto r_mllm = stream(1), r_ctx = stream(2), r_canvas = stream(3), r_query = stream(4),
         r_conn = stream(5), r_dit = stream(6);
    mllm_.emplace(cfg.mllm, store_, r_mllm);
    ctx_mlp_ = ContextMlp<T>(store_, cfg.mllm.width, cfg.dit.width, cfg.context_dropout, r_ctx);
    const std::size_t d_latent = cfg.codec.latent_channels();
    use_canvas_ = cc.enabled && variant_uses_canvas(cfg.dit.variant);
    if (use_canvas_) {
      if (cfg.codec.mode == MediaMode::kImage && cc.keyframes != 1)
        throw config_error("model: image mode needs connector.keyframes = 1");
      if (cc.keyframes > cfg.generated_frames())
        throw config_error("model: connector.keyframes " + std::to_string(cc.keyframes) +
                           " exceeds latent frames " + std::to_string(cfg.generated_frames()));
      GridLayout layout{cc.keyframes, cc.canvas_height ? cc.canvas_height : cfg.latent_height() / 2,
                        cc.canvas_width ? cc.canvas_width : cfg.latent_width() / 2};
      canvas_.emplace(store_, layout, cfg.mllm.width, r_canvas);
    }
    if (cfg.dit.variant == ConditioningVariant::kQuery1d)
      query_tokens_ = store_.add("query.tokens",
                                 normal_tensor<T>(cfg.dit.query_tokens, cfg.mllm.width,
                                                  1.0 / std::sqrt(double(cfg.mllm.width)), r_query),
                                 ParamGroup::kQueryTokens);
    ConnectorConfig conn = cc;
    conn.enabled = use_canvas_;
    connector_.emplace(conn, cfg.mllm.width, cfg.dit.width, d_latent, store_, r_conn);
    dit_.emplace(cfg.dit, d_latent, store_, r_dit);
  }
  CanvasModel(const CanvasModel&) = delete;
  CanvasModel& operator=(const CanvasModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const Mllm<T>& mllm() const { return *mllm_; }
  const CanvasConnector<T>& connector() const { return *connector_; }
  const DiT<T>& dit() const { return *dit_; }
  bool uses_canvas() const { return use_canvas_; }
  const std::optional<CanvasGrid<T>>& canvas() const { return canvas_; }

  MultimodalSequence<T> build_sequence(const Example<T>& ex) const {
    MultimodalSequence<T> seq;
    if (ex.vision) seq.segments.push_back(vision_segment(*ex.vision, cfg_.mllm.vision_patch));
    std::vector<int> toks{Vocabulary::kBos};
    toks.insert(toks.end(), ex.caption.begin(), ex.caption.end());
    seq.segments.push_back(text_segment<T>(std::move(toks)));
    if (use_canvas_)
      seq.segments.push_back(grid_segment(SegmentKind::kCanvas, canvas_->tokens, canvas_->layout));
    else if (query_tokens_.defined())
      seq.segments.push_back(
          grid_segment(SegmentKind::kQuery, query_tokens_, {1, 1, query_tokens_.rows()}));
    assign_mrope_positions(seq, cfg_.mllm.use_mrope);
    return seq;
  }

  // Canvas target grid: post-patchify grid, or the raw latent grid when the
  // canvas is added before patchification.
  GridLayout canvas_target(const Example<T>& ex) const {
    if (cfg_.connector.fuse_after_patchify)
      return {ex.generated_frames, ex.grid.height / 2, ex.grid.width / 2};
    return {ex.generated_frames, ex.grid.height, ex.grid.width};
  }

  Condition<T> encode_condition(const Example<T>& ex, std::mt19937_64* dropout_rng = nullptr) const {
    auto seq = build_sequence(ex);
    auto hidden = mllm_->forward(seq, {cfg_.mllm.use_lora});
    Condition<T> c;
    if (variant_uses_text(cfg_.dit.variant)) {
      auto ctx = extract_context_embeddings(hidden, seq);
      if (query_tokens_.defined())
        ctx = ops::concat_rows<T>({ctx, extract_query_embeddings(hidden, seq)});
      c.context = ctx_mlp_(ctx, dropout_rng);
    } else {
      c.context = Var<T>::constant(Tensor<T>(0, cfg_.dit.width));
    }
    if (use_canvas_) {
      auto emb = extract_canvas_embeddings(hidden, seq, canvas_->layout);
      auto aligned = connector_->align(emb, canvas_->layout);
      c.canvas = interpolate(aligned, canvas_->layout, canvas_target(ex));
    }
    return c;
  }

  // Predicted velocity for noisy cells zt at per-frame timesteps ts.
  // `features` (optional) receives the fuse block output before projection.
  Var<T> velocity(const Example<T>& ex, const Condition<T>& c, const Var<T>& zt,
                  const std::vector<double>& ts, FuseResult<T>* features = nullptr) const {
    DiTInput<T> in{ex.grid, zt, ex.condition, ex.reference, ts};
    typename DiT<T>::Hook hook;
    std::function<Var<T>(const Var<T>&)> pre;
    if (use_canvas_ && cfg_.connector.fuse_after_patchify) {
      hook = [&](const Var<T>& x, const FrameGrid& pg) {
        auto r = connector_->fuse(x, c.canvas, pg, {ts, ex.reference});
        if (features) *features = r;
        return r.latent;
      };
    } else if (use_canvas_) {
      pre = [&](const Var<T>& noisy) {
        return connector_->fuse_before_patchify(noisy, c.canvas, ex.grid, ex.reference);
      };
    }
    return dit_->forward(in, c.context, hook, pre);
  }

  Tensor<T> noise(const Example<T>& ex, std::mt19937_64& rng) const {
    Tensor<T> eps(ex.grid.size(), ex.target.cols());
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = static_cast<T>(nd(rng));
    return eps;
  }

  // N-step Euler sample; pinned frames come from ex.target.
  Tensor<T> sample(const Example<T>& ex, std::uint64_t seed, std::size_t steps) const {
    NoGradGuard guard;
    const auto c = encode_condition(ex);
    std::mt19937_64 rng(seed);
    VelocityFn<T> fn = [&](const Tensor<T>& z, const std::vector<double>& ts) {
      return velocity(ex, c, Var<T>::constant(z), ts).value();
    };
    return euler_sample<T>(fn, noise(ex, rng), ex.grid.frames, {steps, ex.pinned}, &ex.target);
  }

  // Fuse-block features on the sampling trajectory at the first step with
  // t <= t_mid.
  FuseResult<T> canvas_features(const Example<T>& ex, double t_mid, std::uint64_t seed,
                                std::size_t steps = 8) const {
    NoGradGuard guard;
    const auto c = encode_condition(ex);
    std::mt19937_64 rng(seed);
    Tensor<T> z = noise(ex, rng);
    const std::size_t per = ex.grid.tokens_per_frame(), d = z.cols();
    auto ts_at = [&](double t) {
      std::vector<double> ts(ex.grid.frames, t);
      for (std::size_t f = 0; f < ts.size(); ++f)
        if (ex.pinned[f]) ts[f] = 0.0;
      return ts;
    };
    auto overwrite = [&] {
      for (std::size_t f = 0; f < ex.grid.frames; ++f)
        if (ex.pinned[f])
          std::copy_n(ex.target.data() + f * per * d, per * d, z.data() + f * per * d);
    };
    for (std::size_t i = 0; i <= steps; ++i) {
      const double t = 1.0 - static_cast<double>(i) / static_cast<double>(steps);
      overwrite();
      FuseResult<T> r;
      auto u = velocity(ex, c, Var<T>::constant(z), ts_at(t), &r);
      if (t <= t_mid + 1e-12) {
        if (!r.features.defined()) r.features = c.canvas;
        return r;
      }
      for (std::size_t k = 0; k < z.size(); ++k)
        z[k] -= static_cast<T>(1.0 / static_cast<double>(steps)) * u.value()[k];
    }
    return {};
  }

  // Generated frames of a cell tensor, decoded to pixels and clamped to [0, 1].
  PixelMedia<float> decode_generated(const Tensor<T>& cells, const Example<T>& ex) const {
    const std::size_t per = ex.grid.tokens_per_frame();
    const std::size_t nref = ex.grid.frames - ex.generated_frames;
    Tensor<T> gen(ex.generated_frames * per, cells.cols());
    std::copy(cells.data() + nref * per * cells.cols(), cells.data() + cells.size(), gen.data());
    auto px = decode(from_cells(gen, ex.generated_frames, ex.grid.height, ex.grid.width), cfg_.codec);
    PixelMedia<float> out = cast_media<float>(px);
    for (auto& v : out.data) v = std::clamp(v, 0.f, 1.f);
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  std::optional<Mllm<T>> mllm_;
  ContextMlp<T> ctx_mlp_;
  bool use_canvas_ = false;
  std::optional<CanvasGrid<T>> canvas_;
  Var<T> query_tokens_;
  std::optional<CanvasConnector<T>> connector_;
  std::optional<DiT<T>> dit_;
};

}  // namespace canvasflow
