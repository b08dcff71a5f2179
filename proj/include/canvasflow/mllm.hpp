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
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "canvasflow/latent_codec.hpp"
#include "canvasflow/nn.hpp"
#include "canvasflow/vocabulary.hpp"

namespace canvasflow {

enum class SegmentKind { kText, kVision, kCanvas, kQuery };

struct GridLayout {
  std::size_t frames = 1, height = 1, width = 1;
  std::size_t size() const { return frames * height * width; }
  friend bool operator==(const GridLayout&, const GridLayout&) = default;
};

// One run of tokens. Text carries ids; vision carries flattened pixel patches
// (one row per grid cell); canvas/query carry externally owned embeddings.
template <typename T>
struct Segment {
  SegmentKind kind = SegmentKind::kText;
  std::vector<int> tokens;
  Tensor<T> patches;
  Var<T> embeddings;
  GridLayout layout;
  std::vector<Position3> positions;

  std::size_t length() const {
    switch (kind) {
      case SegmentKind::kText: return tokens.size();
      case SegmentKind::kVision: return patches.rows();
      default: return embeddings.defined() ? embeddings.rows() : 0;
    }
  }
};

template <typename T>
struct MultimodalSequence {
  std::vector<Segment<T>> segments;

  std::size_t length() const {
    std::size_t n = 0;
    for (const auto& s : segments) n += s.length();
    return n;
  }
  // Index of the first canvas/query token, or length() when there is none.
  std::size_t gate_index() const {
    std::size_t n = 0;
    for (const auto& s : segments) {
      if (s.kind == SegmentKind::kCanvas || s.kind == SegmentKind::kQuery) return n;
      n += s.length();
    }
    return n;
  }
};

template <typename T>
Segment<T> text_segment(std::vector<int> tokens) {
  Segment<T> s;
  s.kind = SegmentKind::kText;
  s.layout = {1, 1, tokens.size()};
  s.tokens = std::move(tokens);
  return s;
}

// Patch rows for the vision encoder: frame f, patch (i, j) of size p x p.
template <typename T>
Segment<T> vision_segment(const PixelMedia<T>& media, std::size_t patch) {
  if (media.height % patch || media.width % patch)
    throw shape_error("vision_segment: image not divisible by patch " + std::to_string(patch));
  const std::size_t gh = media.height / patch, gw = media.width / patch;
  Segment<T> s;
  s.kind = SegmentKind::kVision;
  s.layout = {media.frames, gh, gw};
  s.patches = Tensor<T>(media.frames * gh * gw, 3 * patch * patch);
  for (std::size_t f = 0; f < media.frames; ++f)
    for (std::size_t i = 0; i < gh; ++i)
      for (std::size_t j = 0; j < gw; ++j) {
        const std::size_t r = (f * gh + i) * gw + j;
        std::size_t c = 0;
        for (std::size_t ch = 0; ch < 3; ++ch)
          for (std::size_t dy = 0; dy < patch; ++dy)
            for (std::size_t dx = 0; dx < patch; ++dx)
              s.patches(r, c++) = media.at(f, ch, i * patch + dy, j * patch + dx);
      }
  return s;
}

template <typename T>
Segment<T> grid_segment(SegmentKind kind, Var<T> embeddings, GridLayout layout) {
  if (embeddings.rows() != layout.size())
    throw shape_error("grid_segment: " + std::to_string(embeddings.rows()) +
                      " embeddings for layout of " + std::to_string(layout.size()));
  Segment<T> s;
  s.kind = kind;
  s.embeddings = std::move(embeddings);
  s.layout = layout;
  return s;
}

// Text tokens take (i, i, i) with a running index; a grid cell (f, i, j) of a
// vision/canvas segment takes (base + f, i, j) with base one past the largest
// index used so far. With use_mrope == false every token is 1-D.
template <typename T>
void assign_mrope_positions(MultimodalSequence<T>& seq, bool use_mrope = true) {
  int canvas_count = 0;
  for (std::size_t k = 0; k < seq.segments.size(); ++k) {
    const auto& s = seq.segments[k];
    if (s.kind != SegmentKind::kCanvas && s.kind != SegmentKind::kQuery) continue;
    if (s.kind == SegmentKind::kCanvas && ++canvas_count > 1)
      throw shape_error("sequence: more than one canvas segment");
    if (s.kind == SegmentKind::kCanvas && k + 1 != seq.segments.size())
      throw shape_error("sequence: canvas segment must be last");
    if (k == 0 || seq.segments[k - 1].kind != SegmentKind::kText ||
        seq.segments[k - 1].tokens.empty() ||
        seq.segments[k - 1].tokens.back() != Vocabulary::kEos)
      throw shape_error("sequence: canvas/query tokens must directly follow an <EoS> token");
  }
  std::int64_t next = 0;  // one past the largest index used so far
  for (auto& s : seq.segments) {
    s.positions.clear();
    const std::size_t n = s.length();
    const bool grid = use_mrope && (s.kind == SegmentKind::kVision || s.kind == SegmentKind::kCanvas);
    if (!grid) {
      for (std::size_t i = 0; i < n; ++i, ++next) s.positions.push_back({next, next, next});
      continue;
    }
    const std::int64_t base = next;
    std::int64_t mx = next - 1;
    for (std::size_t f = 0; f < s.layout.frames; ++f)
      for (std::size_t i = 0; i < s.layout.height; ++i)
        for (std::size_t j = 0; j < s.layout.width; ++j) {
          Position3 p{base + static_cast<std::int64_t>(f), static_cast<std::int64_t>(i),
                      static_cast<std::int64_t>(j)};
          mx = std::max({mx, p[0], p[1], p[2]});
          s.positions.push_back(p);
        }
    next = mx + 1;
  }
}

struct MllmConfig {
  std::size_t vocab_size = 62;
  std::size_t width = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t vision_patch = 16;
  bool use_mrope = true;
  double rope_base = 10000.0;
  bool use_lora = true;
  std::size_t lora_rank = 8;
  double lora_alpha = 8.0;
};

// Low-rank adapter y += (alpha/r) * x A B on rows at or after the gate.
template <typename T>
struct LoraAdapter {
  Var<T> down;  // [in, r]
  Var<T> up;    // [r, out], zero at init
  T scale = T(1);

  LoraAdapter() = default;
  LoraAdapter(ParamStore<T>& s, const std::string& name, std::size_t in, std::size_t out,
              std::size_t rank, double alpha, std::mt19937_64& rng)
      : down(s.add(name + ".lora_down", normal_tensor<T>(in, rank, 1.0 / std::sqrt(double(in)), rng),
                   ParamGroup::kMllmLora)),
        up(s.add(name + ".lora_up", Tensor<T>(rank, out), ParamGroup::kMllmLora)),
        scale(static_cast<T>(alpha / static_cast<double>(rank))) {}

  Var<T> apply(const Var<T>& x, const Var<T>& base, std::size_t gate) const {
    if (gate >= x.rows()) return base;
    auto delta = ops::scale(ops::matmul(ops::matmul(x, down), up), scale);
    std::vector<std::uint8_t> mask(x.rows(), 0);
    for (std::size_t r = gate; r < x.rows(); ++r) mask[r] = 1;
    return ops::add_masked_rows(base, delta, std::move(mask));
  }
};

template <typename T>
struct MllmLayer {
  Linear<T> q, k, v, o, fc1, fc2;
  std::optional<LoraAdapter<T>> lq, lk, lv, lo;
};

struct MllmForwardOptions {
  bool lora_enabled = true;
};

// Decoder-only transformer with 3-axis rotary positions and causal attention.
template <typename T>
class Mllm {
 public:
  Mllm(const MllmConfig& cfg, ParamStore<T>& store, std::mt19937_64& rng) : cfg_(cfg) {
    if (cfg.width % cfg.heads) throw config_error("mllm: width not divisible by heads");
    const std::size_t d = cfg.width;
    const auto g = ParamGroup::kMllmBase;
    token_embed_ = store.add("mllm.token_embed", normal_tensor<T>(cfg.vocab_size, d, 1.0, rng), g);
    vision_embed_ = Linear<T>(store, "mllm.vision_embed", 3 * cfg.vision_patch * cfg.vision_patch,
                              d, g, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "mllm.layer" + std::to_string(l);
      MllmLayer<T> L;
      L.q = Linear<T>(store, p + ".q", d, d, g, rng);
      L.k = Linear<T>(store, p + ".k", d, d, g, rng);
      L.v = Linear<T>(store, p + ".v", d, d, g, rng);
      L.o = Linear<T>(store, p + ".o", d, d, g, rng);
      L.fc1 = Linear<T>(store, p + ".fc1", d, d * cfg.mlp_ratio, g, rng);
      L.fc2 = Linear<T>(store, p + ".fc2", d * cfg.mlp_ratio, d, g, rng);
      if (cfg.use_lora) {
        L.lq.emplace(store, p + ".q", d, d, cfg.lora_rank, cfg.lora_alpha, rng);
        L.lk.emplace(store, p + ".k", d, d, cfg.lora_rank, cfg.lora_alpha, rng);
        L.lv.emplace(store, p + ".v", d, d, cfg.lora_rank, cfg.lora_alpha, rng);
        L.lo.emplace(store, p + ".o", d, d, cfg.lora_rank, cfg.lora_alpha, rng);
      }
      layers_.push_back(std::move(L));
    }
    sections_ = ops::RotarySections::split(d / cfg.heads / 2);
  }

  const MllmConfig& config() const { return cfg_; }

  Var<T> embed(const MultimodalSequence<T>& seq) const {
    std::vector<Var<T>> parts;
    for (const auto& s : seq.segments) {
      if (s.length() == 0) continue;
      switch (s.kind) {
        case SegmentKind::kText: {
          std::vector<std::size_t> ids(s.tokens.begin(), s.tokens.end());
          for (auto id : ids)
            if (id >= cfg_.vocab_size) throw shape_error("mllm: token id out of vocabulary");
          parts.push_back(ops::gather_rows(token_embed_, std::move(ids)));
          break;
        }
        case SegmentKind::kVision:
          parts.push_back(vision_embed_(Var<T>::constant(s.patches)));
          break;
        default:
          if (s.embeddings.cols() != cfg_.width)
            throw shape_error("mllm: canvas/query embedding width mismatch");
          parts.push_back(s.embeddings);
      }
    }
    if (parts.empty()) throw shape_error("mllm: empty sequence");
    return parts.size() == 1 ? parts.front() : ops::concat_rows(parts);
  }

  // Hidden states at every position. Positions must already be assigned.
  Var<T> forward(const MultimodalSequence<T>& seq, MllmForwardOptions opt = {}) const {
    std::vector<Position3> pos;
    for (const auto& s : seq.segments) {
      if (s.positions.size() != s.length())
        throw shape_error("mllm: positions not assigned for a segment");
      pos.insert(pos.end(), s.positions.begin(), s.positions.end());
    }
    const std::size_t gate = seq.gate_index();
    Var<T> x = embed(seq);
    for (const auto& L : layers_) {
      auto h = ops::layer_norm(x);
      auto proj = [&](const Linear<T>& lin, const std::optional<LoraAdapter<T>>& lora,
                      const Var<T>& in) {
        auto y = lin(in);
        if (lora && opt.lora_enabled) y = lora->apply(in, y, gate);
        return y;
      };
      auto q = ops::rotary(proj(L.q, L.lq, h), pos, cfg_.heads, sections_, cfg_.rope_base);
      auto k = ops::rotary(proj(L.k, L.lk, h), pos, cfg_.heads, sections_, cfg_.rope_base);
      auto v = proj(L.v, L.lv, h);
      auto a = ops::attention(q, k, v, cfg_.heads, /*causal=*/true);
      x = ops::add(x, proj(L.o, L.lo, a));
      auto m = L.fc2(ops::gelu(L.fc1(ops::layer_norm(x))));
      x = ops::add(x, m);
    }
    return ops::layer_norm(x);
  }

  const ops::RotarySections& sections() const { return sections_; }

 private:
  MllmConfig cfg_;
  Var<T> token_embed_;
  Linear<T> vision_embed_;
  std::vector<MllmLayer<T>> layers_;
  ops::RotarySections sections_;
};

// Row ranges of each segment kind inside the hidden-state matrix.
template <typename T>
Var<T> extract_rows_of(const Var<T>& hidden, const MultimodalSequence<T>& seq,
                       bool (*want)(SegmentKind)) {
  std::vector<std::size_t> idx;
  std::size_t off = 0;
  for (const auto& s : seq.segments) {
    if (want(s.kind))
      for (std::size_t i = 0; i < s.length(); ++i) idx.push_back(off + i);
    off += s.length();
  }
  if (off != hidden.rows()) throw shape_error("extract: hidden rows do not match sequence");
  if (idx.empty()) return Var<T>::constant(Tensor<T>(0, hidden.cols()));
  return ops::gather_rows(hidden, std::move(idx));
}

template <typename T>
Var<T> extract_context_embeddings(const Var<T>& hidden, const MultimodalSequence<T>& seq) {
  return extract_rows_of(hidden, seq, +[](SegmentKind k) {
    return k == SegmentKind::kText || k == SegmentKind::kVision;
  });
}

template <typename T>
Var<T> extract_query_embeddings(const Var<T>& hidden, const MultimodalSequence<T>& seq) {
  return extract_rows_of(hidden, seq, +[](SegmentKind k) { return k == SegmentKind::kQuery; });
}

template <typename T>
Var<T> extract_canvas_embeddings(const Var<T>& hidden, const MultimodalSequence<T>& seq,
                                 const GridLayout& layout) {
  for (const auto& s : seq.segments)
    if (s.kind == SegmentKind::kCanvas && !(s.layout == layout))
      throw shape_error("extract_canvas_embeddings: layout mismatch");
  return extract_rows_of(hidden, seq, +[](SegmentKind k) { return k == SegmentKind::kCanvas; });
}

// Two-layer connector d_mllm -> 4 d_mllm -> d_dit with dropout on the hidden
// activations in training mode.
template <typename T>
struct ContextMlp {
  Linear<T> fc1, fc2;
  double dropout = 0.1;

  ContextMlp() = default;
  ContextMlp(ParamStore<T>& s, std::size_t d_in, std::size_t d_out, double drop,
             std::mt19937_64& rng)
      : fc1(s, "context_mlp.fc1", d_in, 4 * d_in, ParamGroup::kContextMlp, rng),
        fc2(s, "context_mlp.fc2", 4 * d_in, d_out, ParamGroup::kContextMlp, rng),
        dropout(drop) {}

  Var<T> operator()(const Var<T>& ctx, std::mt19937_64* train_rng = nullptr) const {
    if (ctx.rows() == 0) return Var<T>::constant(Tensor<T>(0, fc2.out_features()));
    auto h = ops::gelu(fc1(ctx));
    if (train_rng) h = ops::dropout(h, dropout, *train_rng);
    return fc2(h);
  }
};

}  // namespace canvasflow
