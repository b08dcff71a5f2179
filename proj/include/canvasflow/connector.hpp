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

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "canvasflow/mllm.hpp"
#include "canvasflow/nn.hpp"

namespace canvasflow {

struct ConnectorConfig {
  bool enabled = true;
  bool use_align_block = true;
  bool use_dit_block = true;
  bool use_timestep_cond = true;
  bool fuse_after_patchify = true;
  std::size_t keyframes = 1;
  // Canvas spatial size; 0 means "match the post-patchify grid".
  std::size_t canvas_height = 0;
  std::size_t canvas_width = 0;
  std::size_t heads = 4;
  double mixffn_ratio = 2.5;
  std::size_t timestep_freq_dim = 64;
};

// Learnable keyframe canvas, K_f x K_h x K_w tokens of width d_mllm, stored
// as one row per token in (frame, row, col) order.
template <typename T>
struct CanvasGrid {
  GridLayout layout;
  Var<T> tokens;

  CanvasGrid() = default;
  CanvasGrid(ParamStore<T>& s, GridLayout l, std::size_t width, std::mt19937_64& rng)
      : layout(l),
        tokens(s.add("canvas.tokens",
                     normal_tensor<T>(l.size(), width, 1.0 / std::sqrt(double(width)), rng),
                     ParamGroup::kCanvasGrid)) {
    static constexpr std::size_t kSupported[] = {1, 3, 6, 11, 31};
    bool ok = false;
    for (auto k : kSupported) ok = ok || k == l.frames;
    if (!ok) throw config_error("canvas: keyframes must be one of 1, 3, 6, 11, 31");
  }
};

// Anchor of keyframe k among `frames` latent frames: round(k (F-1) / (K-1)).
inline std::size_t keyframe_anchor(std::size_t k, std::size_t keyframes, std::size_t frames) {
  if (keyframes <= 1) return 0;
  const std::size_t num = 2 * k * (frames - 1) + (keyframes - 1);
  return num / (2 * (keyframes - 1));
}

// Dense linear map from K_f*K_h*K_w keyframe tokens to F*H*W grid tokens:
// piecewise-linear in time between anchors, bilinear (corner-aligned) in space.
template <typename T>
Tensor<T> interpolation_matrix(const GridLayout& from, const GridLayout& to) {
  if (from.frames > to.frames)
    throw shape_error("interpolate: " + std::to_string(from.frames) + " keyframes exceed " +
                      std::to_string(to.frames) + " latent frames");
  if (from.frames == 0 || from.height == 0 || from.width == 0)
    throw shape_error("interpolate: empty keyframe grid");
  struct Tap {
    std::size_t i0, i1;
    double w;  // weight of i1
  };
  auto spatial = [](std::size_t src, std::size_t dst, std::size_t i) -> Tap {
    if (src == 1 || dst == 1) return {0, 0, 0.0};
    const double p = static_cast<double>(i) * static_cast<double>(src - 1) /
                     static_cast<double>(dst - 1);
    std::size_t i0 = static_cast<std::size_t>(std::floor(p));
    if (i0 >= src - 1) return {src - 1, src - 1, 0.0};
    return {i0, i0 + 1, p - static_cast<double>(i0)};
  };
  auto temporal = [&](std::size_t f) -> Tap {
    if (from.frames == 1) return {0, 0, 0.0};
    for (std::size_t k = 0; k + 1 < from.frames; ++k) {
      const std::size_t a0 = keyframe_anchor(k, from.frames, to.frames);
      const std::size_t a1 = keyframe_anchor(k + 1, from.frames, to.frames);
      if (f >= a0 && f <= a1) {
        if (f == a0) return {k, k, 0.0};
        if (f == a1) return {k + 1, k + 1, 0.0};
        return {k, k + 1, static_cast<double>(f - a0) / static_cast<double>(a1 - a0)};
      }
    }
    return {from.frames - 1, from.frames - 1, 0.0};
  };
  Tensor<T> m(to.size(), from.size());
  auto src_index = [&](std::size_t k, std::size_t y, std::size_t x) {
    return (k * from.height + y) * from.width + x;
  };
  for (std::size_t f = 0; f < to.frames; ++f) {
    const Tap tf = temporal(f);
    for (std::size_t i = 0; i < to.height; ++i) {
      const Tap ty = spatial(from.height, to.height, i);
      for (std::size_t j = 0; j < to.width; ++j) {
        const Tap tx = spatial(from.width, to.width, j);
        const std::size_t r = (f * to.height + i) * to.width + j;
        const std::size_t kf[2] = {tf.i0, tf.i1};
        const double wf[2] = {1.0 - tf.w, tf.w};
        const std::size_t ky[2] = {ty.i0, ty.i1};
        const double wy[2] = {1.0 - ty.w, ty.w};
        const std::size_t kx[2] = {tx.i0, tx.i1};
        const double wx[2] = {1.0 - tx.w, tx.w};
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) {
              const double w = wf[a] * wy[b] * wx[c];
              if (w != 0.0) m(r, src_index(kf[a], ky[b], kx[c])) += static_cast<T>(w);
            }
      }
    }
  }
  return m;
}

template <typename T>
Var<T> interpolate(const Var<T>& aligned, const GridLayout& from, const GridLayout& to) {
  if (aligned.rows() != from.size())
    throw shape_error("interpolate: " + std::to_string(aligned.rows()) + " tokens for grid of " +
                      std::to_string(from.size()));
  return ops::matmul(Var<T>::constant(interpolation_matrix<T>(from, to)), aligned);
}

// Vanilla transformer block over the flattened canvas, followed by a width
// map into the DiT space and a zero-initialized projection.
template <typename T>
struct AlignBlock {
  bool use_block = true;
  std::size_t heads = 4;
  Linear<T> q, k, v, o, fc1, fc2, in_proj, zero_proj;

  AlignBlock() = default;
  AlignBlock(ParamStore<T>& s, std::size_t d_in, std::size_t d_out, std::size_t heads_,
             bool use_block_, std::mt19937_64& rng)
      : use_block(use_block_), heads(heads_) {
    const auto g = ParamGroup::kConnector;
    if (use_block) {
      q = Linear<T>(s, "connector.align.q", d_in, d_in, g, rng);
      k = Linear<T>(s, "connector.align.k", d_in, d_in, g, rng);
      v = Linear<T>(s, "connector.align.v", d_in, d_in, g, rng);
      o = Linear<T>(s, "connector.align.o", d_in, d_in, g, rng);
      fc1 = Linear<T>(s, "connector.align.fc1", d_in, 4 * d_in, g, rng);
      fc2 = Linear<T>(s, "connector.align.fc2", 4 * d_in, d_in, g, rng);
    }
    in_proj = Linear<T>(s, "connector.align.in_proj", d_in, d_out, g, rng);
    zero_proj = Linear<T>(s, "connector.align.zero_proj", d_out, d_out, g, rng, true, true);
  }

  Var<T> operator()(const Var<T>& canvas_emb, std::size_t expected) const {
    if (canvas_emb.rows() != expected)
      throw shape_error("align: got " + std::to_string(canvas_emb.rows()) +
                        " canvas embeddings, expected " + std::to_string(expected));
    Var<T> x = canvas_emb;
    if (use_block) {
      auto h = ops::layer_norm(x);
      auto a = ops::attention(q(h), k(h), v(h), heads, false);
      x = ops::add(x, o(a));
      x = ops::add(x, fc2(ops::gelu(fc1(ops::layer_norm(x)))));
    }
    return zero_proj(in_proj(x));
  }
};

// Per-frame linear attention with ReLU feature maps:
// out_i = phi(q_i) sum_j phi(k_j)^T v_j / (phi(q_i) sum_j phi(k_j) + eps).
template <typename T>
Var<T> linear_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                        std::size_t frames, T eps = T(1e-6)) {
  const std::size_t n = q.rows(), dm = q.cols(), dh = dm / heads;
  if (n % frames) throw shape_error("linear_attention: rows not divisible by frames");
  const std::size_t per = n / frames;
  auto pq = ops::relu(q), pk = ops::relu(k);
  std::vector<Var<T>> frame_out;
  for (std::size_t f = 0; f < frames; ++f) {
    auto fq = ops::slice_rows(pq, f * per, (f + 1) * per);
    auto fk = ops::slice_rows(pk, f * per, (f + 1) * per);
    auto fv = ops::slice_rows(v, f * per, (f + 1) * per);
    std::vector<Var<T>> head_out;
    for (std::size_t h = 0; h < heads; ++h) {
      auto hq = ops::slice_cols(fq, h * dh, (h + 1) * dh);
      auto hk = ops::slice_cols(fk, h * dh, (h + 1) * dh);
      auto hv = ops::slice_cols(fv, h * dh, (h + 1) * dh);
      auto kt = ops::transpose(hk);
      auto num = ops::matmul(hq, ops::matmul(kt, hv));
      auto den = ops::add_scalar(ops::matmul(hq, ops::transpose(ops::sum_rows(hk))), eps);
      head_out.push_back(ops::div(num, den));
    }
    frame_out.push_back(heads == 1 ? head_out.front() : ops::concat_cols(head_out));
  }
  return frames == 1 ? frame_out.front() : ops::concat_rows(frame_out);
}

// Adaptive-norm conditioning: per-frame timestep -> 6 modulation vectors
// (shift/scale/gate for attention and feed-forward).
template <typename T>
struct AdaLnSingle {
  TimestepEmbedder<T> embed;
  Linear<T> proj;
  std::size_t width = 0;

  AdaLnSingle() = default;
  AdaLnSingle(ParamStore<T>& s, const std::string& name, std::size_t freq, std::size_t width_,
              ParamGroup g, std::mt19937_64& rng)
      : embed(s, name + ".t_embed", freq, width_, g, rng),
        proj(s, name + ".t_proj", width_, 6 * width_, g, rng),
        width(width_) {}

  // Returns [frames, 6*width].
  Var<T> operator()(const std::vector<double>& ts) const { return proj(ops::silu(embed(ts))); }
};

// Per-frame modulation table expanded to token rows.
template <typename T>
struct Modulation {
  Var<T> shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp;

  static Modulation build(const Var<T>& per_frame, const Var<T>& table, std::size_t tokens_per_frame,
                          std::size_t width) {
    std::vector<std::size_t> idx;
    for (std::size_t f = 0; f < per_frame.rows(); ++f)
      for (std::size_t t = 0; t < tokens_per_frame; ++t) idx.push_back(f);
    auto rows = ops::add(ops::gather_rows(per_frame, std::move(idx)), table);
    Modulation m;
    Var<T>* slots[6] = {&m.shift_msa, &m.scale_msa, &m.gate_msa,
                        &m.shift_mlp, &m.scale_mlp, &m.gate_mlp};
    for (std::size_t i = 0; i < 6; ++i)
      *slots[i] = ops::slice_cols(rows, i * width, (i + 1) * width);
    return m;
  }
};

// Mix-FFN: pointwise expand, 3x3 depthwise conv, gated SiLU, pointwise project.
template <typename T>
struct MixFfn {
  Linear<T> inverted, point;
  Var<T> dw_weight, dw_bias;
  std::size_t hidden = 0;

  MixFfn() = default;
  MixFfn(ParamStore<T>& s, const std::string& name, std::size_t width, double ratio, ParamGroup g,
         std::mt19937_64& rng)
      : hidden(static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(width)))) {
    inverted = Linear<T>(s, name + ".inverted", width, 2 * hidden, g, rng);
    dw_weight = s.add(name + ".dw.weight", normal_tensor<T>(9, 2 * hidden, 1.0 / 3.0, rng), g);
    dw_bias = s.add(name + ".dw.bias", Tensor<T>(1, 2 * hidden), g);
    point = Linear<T>(s, name + ".point", hidden, width, g, rng, /*with_bias=*/false);
  }

  Var<T> operator()(const Var<T>& x, std::size_t frames, std::size_t h, std::size_t w) const {
    auto y = ops::silu(inverted(x));
    y = ops::depthwise_conv3x3(y, dw_weight, dw_bias, frames, h, w);
    auto val = ops::slice_cols(y, 0, hidden);
    auto gate = ops::slice_cols(y, hidden, 2 * hidden);
    return point(ops::mul(val, ops::silu(gate)));
  }
};

struct FrameGrid {
  std::size_t frames = 1, height = 1, width = 1;
  std::size_t tokens_per_frame() const { return height * width; }
  std::size_t size() const { return frames * height * width; }
};

// Fusion block: adds the interpolated canvas to the post-patchify latents of
// non-reference frames, runs one adaptive-norm linear-attention block per
// frame and adds the zero-projected result back.
template <typename T>
struct FuseBlock {
  std::size_t width = 0, heads = 1;
  AdaLnSingle<T> ada;
  Var<T> table;
  Linear<T> q, k, v, o, zero_proj;
  MixFfn<T> ffn;

  FuseBlock() = default;
  FuseBlock(ParamStore<T>& s, std::size_t width_, std::size_t heads_, double ffn_ratio,
            std::size_t freq_dim, std::mt19937_64& rng)
      : width(width_), heads(heads_) {
    const auto g = ParamGroup::kConnector;
    ada = AdaLnSingle<T>(s, "connector.fuse.ada", freq_dim, width, g, rng);
    table = s.add("connector.fuse.scale_shift_table",
                  normal_tensor<T>(1, 6 * width, 1.0 / std::sqrt(double(width)), rng), g);
    q = Linear<T>(s, "connector.fuse.q", width, width, g, rng, false);
    k = Linear<T>(s, "connector.fuse.k", width, width, g, rng, false);
    v = Linear<T>(s, "connector.fuse.v", width, width, g, rng, false);
    o = Linear<T>(s, "connector.fuse.o", width, width, g, rng);
    ffn = MixFfn<T>(s, "connector.fuse.ffn", width, ffn_ratio, g, rng);
    zero_proj = Linear<T>(s, "connector.fuse.zero_proj", width, width, g, rng, true, true);
  }

  // x: [frames * H * W, width] for the frames being processed.
  Var<T> block(const Var<T>& x, const std::vector<double>& ts, const FrameGrid& grid) const {
    auto m = Modulation<T>::build(ada(ts), table, grid.tokens_per_frame(), width);
    auto h = modulate(ops::layer_norm(x), m.shift_msa, m.scale_msa);
    auto a = o(linear_attention(q(h), k(h), v(h), heads, grid.frames));
    auto y = ops::add(x, ops::mul(a, m.gate_msa));
    auto h2 = modulate(ops::layer_norm(y), m.shift_mlp, m.scale_mlp);
    auto f = ffn(h2, grid.frames, grid.height, grid.width);
    return ops::add(y, ops::mul(f, m.gate_mlp));
  }
};

namespace detail {

inline std::vector<std::size_t> frame_rows(const std::vector<std::size_t>& frames,
                                           std::size_t per) {
  std::vector<std::size_t> rows;
  for (auto f : frames)
    for (std::size_t t = 0; t < per; ++t) rows.push_back(f * per + t);
  return rows;
}

}  // namespace detail

// Scatters rows of `part` (frames listed in `frames`) into a [total, cols]
// matrix whose other frames are zero.
template <typename T>
Var<T> scatter_frames(const Var<T>& part, const std::vector<std::size_t>& frames,
                      std::size_t total_frames, std::size_t per) {
  const std::size_t cols = part.cols();
  auto padded = ops::concat_rows<T>({part, Var<T>::constant(Tensor<T>(1, cols))});
  std::vector<std::size_t> idx(total_frames * per, part.rows());
  for (std::size_t i = 0; i < frames.size(); ++i)
    for (std::size_t t = 0; t < per; ++t) idx[frames[i] * per + t] = i * per + t;
  return ops::gather_rows(padded, std::move(idx));
}

struct FuseInputs {
  std::vector<double> timesteps;          // one per latent frame
  std::vector<std::uint8_t> reference;    // one per latent frame, 1 = reference
};

// Output of fuse plus the block's features (pre zero-projection) for the
// generated frames, when the block ran.
template <typename T>
struct FuseResult {
  Var<T> latent;
  Var<T> features;
  std::vector<std::size_t> feature_frames;
};

template <typename T>
class CanvasConnector {
 public:
  CanvasConnector(const ConnectorConfig& cfg, std::size_t d_mllm, std::size_t d_dit,
                  std::size_t d_latent, ParamStore<T>& s, std::mt19937_64& rng)
      : cfg_(cfg), d_dit_(d_dit) {
    if (!cfg.enabled) return;
    align_ = AlignBlock<T>(s, d_mllm, d_dit, cfg.heads, cfg.use_align_block, rng);
    if (cfg.use_dit_block)
      fuse_.emplace(s, d_dit, cfg.heads, cfg.mixffn_ratio, cfg.timestep_freq_dim, rng);
    if (!cfg.fuse_after_patchify)
      pre_patch_proj_ = Linear<T>(s, "connector.pre_patch_proj", d_dit, d_latent,
                                  ParamGroup::kConnector, rng, true, true);
  }

  const ConnectorConfig& config() const { return cfg_; }

  Var<T> align(const Var<T>& canvas_emb, const GridLayout& layout) const {
    return align_(canvas_emb, layout.size());
  }

  // latent_embed: [F * H * W, d_dit] post-patchify tokens; interp: canvas
  // interpolated over the non-reference frames only (in frame order).
  FuseResult<T> fuse(const Var<T>& latent_embed, const Var<T>& interp, const FrameGrid& grid,
                     const FuseInputs& in) const {
    if (in.timesteps.size() != grid.frames)
      throw shape_error("fuse: " + std::to_string(in.timesteps.size()) +
                        " timesteps for " + std::to_string(grid.frames) + " latent frames");
    if (!in.reference.empty() && in.reference.size() != grid.frames)
      throw shape_error("fuse: reference mask length mismatch");
    if (latent_embed.rows() != grid.size() || latent_embed.cols() != d_dit_)
      throw shape_error("fuse: latent embedding shape mismatch");
    FuseResult<T> res;
    res.latent = latent_embed;
    if (!cfg_.enabled) return res;
    std::vector<std::size_t> gen;
    for (std::size_t f = 0; f < grid.frames; ++f)
      if (in.reference.empty() || !in.reference[f]) gen.push_back(f);
    if (gen.empty()) return res;
    const std::size_t per = grid.tokens_per_frame();
    std::vector<std::uint8_t> gen_mask(grid.size(), 0);
    for (auto r : detail::frame_rows(gen, per)) gen_mask[r] = 1;

    Var<T> hidden = latent_embed;
    if (cfg_.fuse_after_patchify && interp.defined()) {
      if (interp.rows() != gen.size() * per)
        throw shape_error("fuse: interpolated canvas has " + std::to_string(interp.rows()) +
                          " rows, expected " + std::to_string(gen.size() * per));
      hidden = ops::add_masked_rows(latent_embed, scatter_frames(interp, gen, grid.frames, per),
                                    gen_mask);
    }
    if (!fuse_) {
      res.latent = hidden;
      return res;
    }
    std::vector<double> ts;
    for (auto f : gen) ts.push_back(cfg_.use_timestep_cond ? in.timesteps[f] : 0.0);
    auto x = ops::gather_rows(hidden, detail::frame_rows(gen, per));
    auto feat = fuse_->block(x, ts, {gen.size(), grid.height, grid.width});
    auto out = fuse_->zero_proj(feat);
    res.latent = ops::add_masked_rows(latent_embed, scatter_frames(out, gen, grid.frames, per),
                                      gen_mask);
    res.features = feat;
    res.feature_frames = gen;
    return res;
  }

  // Ablation arm: canvas interpolated to the raw latent grid, projected to
  // the codec width and added to the noisy latent cells of non-reference
  // frames before patchification.
  Var<T> fuse_before_patchify(const Var<T>& raw_cells, const Var<T>& interp_cells,
                              const FrameGrid& latent_grid,
                              const std::vector<std::uint8_t>& reference) const {
    if (!cfg_.enabled || cfg_.fuse_after_patchify || !interp_cells.defined()) return raw_cells;
    std::vector<std::size_t> gen;
    for (std::size_t f = 0; f < latent_grid.frames; ++f)
      if (reference.empty() || !reference[f]) gen.push_back(f);
    const std::size_t per = latent_grid.tokens_per_frame();
    if (interp_cells.rows() != gen.size() * per)
      throw shape_error("fuse_before_patchify: canvas rows mismatch");
    auto proj = pre_patch_proj_(interp_cells);
    if (proj.cols() != raw_cells.cols())
      throw shape_error("fuse_before_patchify: codec width mismatch");
    std::vector<std::uint8_t> mask(latent_grid.size(), 0);
    for (auto r : detail::frame_rows(gen, per)) mask[r] = 1;
    return ops::add_masked_rows(raw_cells, scatter_frames(proj, gen, latent_grid.frames, per),
                                mask);
  }

  bool has_fuse_block() const { return fuse_.has_value(); }
  const FuseBlock<T>& fuse_block() const { return *fuse_; }
  const AlignBlock<T>& align_block() const { return align_; }
  const Linear<T>& pre_patch_projection() const { return pre_patch_proj_; }

 private:
  ConnectorConfig cfg_;
  std::size_t d_dit_;
  AlignBlock<T> align_;
  std::optional<FuseBlock<T>> fuse_;
  Linear<T> pre_patch_proj_;
};

}  // namespace canvasflow
