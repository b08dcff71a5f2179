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
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "canvasflow/ops.hpp"

namespace canvasflow {

// Freeze-schedule granularity. Stage plans toggle whole groups.
enum class ParamGroup : std::uint8_t {
  kMllmBase,
  kMllmLora,
  kCanvasGrid,
  kQueryTokens,
  kContextMlp,
  kConnector,
  kDitCrossAttn,
  kDitOther,
};

inline std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kMllmBase: return "mllm_base";
    case ParamGroup::kMllmLora: return "mllm_lora";
    case ParamGroup::kCanvasGrid: return "canvas_grid";
    case ParamGroup::kQueryTokens: return "query_tokens";
    case ParamGroup::kContextMlp: return "context_mlp";
    case ParamGroup::kConnector: return "connector";
    case ParamGroup::kDitCrossAttn: return "dit_cross_attn";
    case ParamGroup::kDitOther: return "dit_other";
  }
  return "unknown";
}

template <typename T>
struct ParamEntry {
  std::string name;
  Var<T> var;
  ParamGroup group;
};

// Owns every learnable tensor of a model, in registration order.
template <typename T>
class ParamStore {
 public:
  Var<T> add(std::string name, Tensor<T> init, ParamGroup group) {
    for (const auto& e : entries_)
      if (e.name == name) throw std::logic_error("duplicate parameter " + name);
    Var<T> v = Var<T>::leaf(std::move(init), false);
    entries_.push_back({std::move(name), v, group});
    return v;
  }

  std::vector<ParamEntry<T>>& entries() { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }

  const ParamEntry<T>* find(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::size_t count(ParamGroup g) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.group == g) n += e.var.value().size();
    return n;
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.var.value().size();
    return n;
  }

  void set_trainable(const std::vector<ParamGroup>& groups) {
    for (auto& e : entries_) {
      bool on = false;
      for (auto g : groups) on = on || e.group == g;
      e.var.set_requires_grad(on);
    }
  }
  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

 private:
  std::vector<ParamEntry<T>> entries_;
};

// Deterministic initializers. All randomness flows from an explicit engine.
template <typename T>
Tensor<T> normal_tensor(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, stddev);
  Tensor<T> t(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(nd(rng));
  return t;
}

template <typename T>
struct Linear {
  Var<T> weight;  // [in, out]
  Var<T> bias;    // [1, out] or undefined

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
         ParamGroup group, std::mt19937_64& rng, bool with_bias = true, bool zero_init = false) {
    const double std = std::sqrt(2.0 / static_cast<double>(in + out));
    weight = store.add(name + ".weight",
                       zero_init ? Tensor<T>(in, out) : normal_tensor<T>(in, out, std, rng), group);
    if (with_bias) bias = store.add(name + ".bias", Tensor<T>(1, out), group);
  }

  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }
  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }
};

// Sinusoidal features of t in [0,1], scaled to a 1000-step range.
template <typename T>
Tensor<T> timestep_features(const std::vector<double>& ts, std::size_t dim) {
  Tensor<T> out(ts.size(), dim);
  const std::size_t half = dim / 2;
  for (std::size_t r = 0; r < ts.size(); ++r) {
    const double t = ts[r] * 1000.0;
    for (std::size_t i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                static_cast<double>(std::max<std::size_t>(half, 1)));
      out(r, i) = static_cast<T>(std::cos(t * f));
      out(r, half + i) = static_cast<T>(std::sin(t * f));
    }
  }
  return out;
}

// Timestep embedder: features -> Linear -> SiLU -> Linear.
template <typename T>
struct TimestepEmbedder {
  std::size_t freq_dim = 0;
  Linear<T> fc1, fc2;

  TimestepEmbedder() = default;
  TimestepEmbedder(ParamStore<T>& s, const std::string& name, std::size_t freq, std::size_t width,
                   ParamGroup g, std::mt19937_64& rng)
      : freq_dim(freq),
        fc1(s, name + ".fc1", freq, width, g, rng),
        fc2(s, name + ".fc2", width, width, g, rng) {}

  Var<T> operator()(const std::vector<double>& ts) const {
    auto f = Var<T>::constant(timestep_features<T>(ts, freq_dim));
    return fc2(ops::silu(fc1(f)));
  }
};

// x * (1 + scale) + shift with per-row modulation tensors.
template <typename T>
Var<T> modulate(const Var<T>& x, const Var<T>& shift, const Var<T>& scale) {
  return ops::add(ops::add(x, ops::mul(x, scale)), shift);
}

}  // namespace canvasflow
