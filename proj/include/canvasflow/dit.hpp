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

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "canvasflow/connector.hpp"
#include "canvasflow/latent_codec.hpp"

namespace canvasflow {

// Conditioning arms: text context only, text plus 1-D query tokens, canvas
// without text context, canvas with text context.
enum class ConditioningVariant { kTextOnly, kQuery1d, kCanvas, kCanvasPlusText };

inline bool variant_uses_canvas(ConditioningVariant v) {
  return v == ConditioningVariant::kCanvas || v == ConditioningVariant::kCanvasPlusText;
}
inline bool variant_uses_text(ConditioningVariant v) { return v != ConditioningVariant::kCanvas; }

struct DiTConfig {
  std::size_t depth = 6;
  std::size_t width = 256;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t timestep_freq_dim = 64;
  ConditioningVariant variant = ConditioningVariant::kCanvasPlusText;
  std::size_t query_tokens = 32;
  double rope_base = 10000.0;
};

// Network input in cell layout ([F'*H'*W', d] per tensor). Channel order fed
// to the patch embedding is [noisy | condition | indicator].
template <typename T>
struct DiTInput {
  FrameGrid grid;  // latent frames x H' x W'
  Var<T> noisy;
  Tensor<T> condition;  // empty => zeros, indicator 0
  std::vector<std::uint8_t> reference;
  std::vector<double> timesteps;
};

template <typename T>
struct DiTBlock {
  Var<T> table;  // [1, 6*width]
  Linear<T> q, k, v, o, cq, ck, cv, co, fc1, fc2;
};

// Patch (1, 2, 2) gather: cell rows -> patch rows with channel order (dy, dx, c).
inline std::vector<std::size_t> patchify_index(const FrameGrid& g, std::size_t ch) {
  if (g.height % 2 || g.width % 2)
    throw shape_error("patchify: latent grid " + std::to_string(g.height) + "x" +
                      std::to_string(g.width) + " must have even sides");
  const std::size_t ph = g.height / 2, pw = g.width / 2;
  std::vector<std::size_t> idx;
  idx.reserve(g.size() * ch);
  for (std::size_t f = 0; f < g.frames; ++f)
    for (std::size_t i = 0; i < ph; ++i)
      for (std::size_t j = 0; j < pw; ++j)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t cell = (f * g.height + 2 * i + dy) * g.width + 2 * j + dx;
              idx.push_back(cell * ch + c);
            }
  return idx;
}

inline std::vector<std::size_t> unpatchify_index(const FrameGrid& g, std::size_t ch) {
  auto fwd = patchify_index(g, ch);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return inv;
}

inline FrameGrid patch_grid(const FrameGrid& g) {
  if (g.height % 2 || g.width % 2) throw shape_error("patch grid: odd latent dimensions");
  return {g.frames, g.height / 2, g.width / 2};
}

template <typename T>
class DiT {
 public:
  DiT(const DiTConfig& cfg, std::size_t latent_channels, ParamStore<T>& s, std::mt19937_64& rng)
      : cfg_(cfg), d_latent_(latent_channels) {
    const std::size_t D = cfg.width;
    if (D % cfg.heads) throw config_error("dit: width not divisible by heads");
    const auto g = ParamGroup::kDitOther;
    const auto gx = ParamGroup::kDitCrossAttn;
    in_ch_ = 2 * latent_channels + 1;
    patch_embed_ = Linear<T>(s, "dit.patch_embed", 4 * in_ch_, D, g, rng);
    t_embed_ = TimestepEmbedder<T>(s, "dit.t_embed", cfg.timestep_freq_dim, D, g, rng);
    t_block_ = Linear<T>(s, "dit.t_block", D, 6 * D, g, rng);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      const std::string p = "dit.block" + std::to_string(l);
      DiTBlock<T> b;
      b.table = s.add(p + ".scale_shift_table",
                      normal_tensor<T>(1, 6 * D, 1.0 / std::sqrt(double(D)), rng), g);
      b.q = Linear<T>(s, p + ".attn.q", D, D, g, rng, false);
      b.k = Linear<T>(s, p + ".attn.k", D, D, g, rng, false);
      b.v = Linear<T>(s, p + ".attn.v", D, D, g, rng, false);
      b.o = Linear<T>(s, p + ".attn.o", D, D, g, rng, false);
      b.cq = Linear<T>(s, p + ".cross.q", D, D, gx, rng, false);
      b.ck = Linear<T>(s, p + ".cross.k", D, D, gx, rng, false);
      b.cv = Linear<T>(s, p + ".cross.v", D, D, gx, rng, false);
      b.co = Linear<T>(s, p + ".cross.o", D, D, gx, rng, false);
      b.fc1 = Linear<T>(s, p + ".ffn.fc1", D, D * cfg.mlp_ratio, g, rng);
      b.fc2 = Linear<T>(s, p + ".ffn.fc2", D * cfg.mlp_ratio, D, g, rng);
      blocks_.push_back(std::move(b));
    }
    final_table_ = s.add("dit.final.scale_shift_table",
                         normal_tensor<T>(1, 2 * D, 1.0 / std::sqrt(double(D)), rng), g);
    unpatch_ = Linear<T>(s, "dit.unpatch", D, 4 * latent_channels, g, rng);
    sections_ = ops::RotarySections::split(D / cfg.heads / 2);
  }

  const DiTConfig& config() const { return cfg_; }
  std::size_t latent_channels() const { return d_latent_; }

  // Cell tensors -> [F*Hp*Wp, width] patch tokens.
  Var<T> patchify(const Var<T>& noisy, const Tensor<T>& condition, const FrameGrid& g) const {
    const std::size_t n = g.size();
    if (noisy.rows() != n || noisy.cols() != d_latent_)
      throw shape_error("dit: noisy latents " + shape_str(noisy.value()) + " do not match grid");
    Tensor<T> cond = condition.empty() ? Tensor<T>(n, d_latent_) : condition;
    if (!cond.same_shape(noisy.value())) throw shape_error("dit: condition shape mismatch");
    Tensor<T> ind(n, 1, condition.empty() ? T(0) : T(1));
    auto cells = ops::concat_cols<T>({noisy, Var<T>::constant(std::move(cond)),
                                      Var<T>::constant(std::move(ind))});
    const FrameGrid pg = patch_grid(g);
    auto patches = ops::permute(cells, patchify_index(g, in_ch_), pg.size(), 4 * in_ch_);
    return patch_embed_(patches);
  }

  // Patch tokens -> velocity in cell layout [F*H*W, d].
  Var<T> unpatchify(const Var<T>& tokens, const FrameGrid& g) const {
    auto out = unpatch_(tokens);
    return ops::permute(out, unpatchify_index(g, d_latent_), g.size(), d_latent_);
  }

  // Per-frame timestep embedding [F, width].
  Var<T> timestep_embedding(const std::vector<double>& ts) const { return t_embed_(ts); }

  using Hook = std::function<Var<T>(const Var<T>& latent_embed, const FrameGrid& patch_grid)>;

  // `pre_patch` (optional) rewrites the noisy cells before patchify; `hook`
  // (optional) rewrites the patch tokens before the transformer blocks.
  Var<T> forward(const DiTInput<T>& in, const Var<T>& context, const Hook& hook = {},
                 const std::function<Var<T>(const Var<T>&)>& pre_patch = {}) const {
    const FrameGrid& g = in.grid;
    if (in.timesteps.size() != g.frames)
      throw shape_error("dit: expected one timestep per latent frame");
    if (variant_uses_text(cfg_.variant) && (!context.defined() || context.rows() == 0))
      throw shape_error("dit: this conditioning variant needs non-empty context");
    const FrameGrid pg = patch_grid(g);
    const std::size_t D = cfg_.width, per = pg.tokens_per_frame();
    Var<T> noisy = pre_patch ? pre_patch(in.noisy) : in.noisy;
    Var<T> x = patchify(noisy, in.condition, g);
    if (hook) x = hook(x, pg);

    auto temb = t_embed_(in.timesteps);                 // [F, D]
    auto mod_frames = t_block_(ops::silu(temb));        // [F, 6D]
    std::vector<Position3> pos;
    for (std::size_t f = 0; f < pg.frames; ++f)
      for (std::size_t i = 0; i < pg.height; ++i)
        for (std::size_t j = 0; j < pg.width; ++j)
          pos.push_back({static_cast<std::int64_t>(f), static_cast<std::int64_t>(i),
                         static_cast<std::int64_t>(j)});
    const bool cross = context.defined() && context.rows() > 0;
    for (const auto& b : blocks_) {
      auto m = Modulation<T>::build(mod_frames, b.table, per, D);
      auto h = modulate(ops::layer_norm(x), m.shift_msa, m.scale_msa);
      auto q = ops::rotary(b.q(h), pos, cfg_.heads, sections_, cfg_.rope_base);
      auto k = ops::rotary(b.k(h), pos, cfg_.heads, sections_, cfg_.rope_base);
      auto a = b.o(ops::attention(q, k, b.v(h), cfg_.heads));
      x = ops::add(x, ops::mul(a, m.gate_msa));
      if (cross) {
        auto hq = b.cq(ops::layer_norm(x));
        auto c = ops::attention(hq, b.ck(context), b.cv(context), cfg_.heads);
        x = ops::add(x, b.co(c));
      }
      auto h2 = modulate(ops::layer_norm(x), m.shift_mlp, m.scale_mlp);
      x = ops::add(x, ops::mul(b.fc2(ops::gelu(b.fc1(h2))), m.gate_mlp));
    }
    std::vector<std::size_t> idx;
    for (std::size_t f = 0; f < pg.frames; ++f)
      for (std::size_t t = 0; t < per; ++t) idx.push_back(f);
    auto temb_rows = ops::gather_rows(temb, std::move(idx));
    auto shift = ops::add(temb_rows, ops::slice_cols(final_table_, 0, D));
    auto scl = ops::add(temb_rows, ops::slice_cols(final_table_, D, 2 * D));
    x = modulate(ops::layer_norm(x), shift, scl);
    return unpatchify(x, g);
  }

 private:
  DiTConfig cfg_;
  std::size_t d_latent_;
  std::size_t in_ch_ = 0;
  Linear<T> patch_embed_, t_block_, unpatch_;
  TimestepEmbedder<T> t_embed_;
  std::vector<DiTBlock<T>> blocks_;
  Var<T> final_table_;
  ops::RotarySections sections_;
};

// Velocity callback for the sampler: (z cells, per-frame t) -> u cells.
template <typename T>
using VelocityFn = std::function<Tensor<T>(const Tensor<T>&, const std::vector<double>&)>;

struct SamplerOptions {
  std::size_t steps = 8;
  std::vector<std::uint8_t> pinned;  // per latent frame: held clean, t = 0
};

// Euler integration of dz/dt = u from t = 1 to t = 0 with uniform steps.
// Pinned frames are overwritten with `clean` before every model call and at
// the end, and always see t = 0.
template <typename T>
Tensor<T> euler_sample(const VelocityFn<T>& velocity, Tensor<T> z, std::size_t frames,
                       const SamplerOptions& opt, const Tensor<T>* clean = nullptr) {
  if (opt.steps == 0) throw shape_error("sampler: steps must be >= 1");
  if (z.rows() % frames) throw shape_error("sampler: rows not divisible by frames");
  const std::size_t per = z.rows() / frames, d = z.cols();
  auto is_pinned = [&](std::size_t f) { return !opt.pinned.empty() && opt.pinned[f] && clean; };
  auto overwrite = [&] {
    for (std::size_t f = 0; f < frames; ++f)
      if (is_pinned(f))
        std::copy_n(clean->data() + f * per * d, per * d, z.data() + f * per * d);
  };
  const double dt = 1.0 / static_cast<double>(opt.steps);
  for (std::size_t i = 0; i < opt.steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) * dt;
    overwrite();
    std::vector<double> ts(frames, t);
    for (std::size_t f = 0; f < frames; ++f)
      if (is_pinned(f)) ts[f] = 0.0;
    Tensor<T> u = velocity(z, ts);
    for (std::size_t k = 0; k < z.size(); ++k) z[k] -= static_cast<T>(dt) * u[k];
  }
  overwrite();
  return z;
}

}  // namespace canvasflow
