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

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "canvasflow/autograd.hpp"

namespace canvasflow::ops {

namespace detail {

enum class Bcast { kFull, kRow, kCol, kScalar };

template <typename T>
Bcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.same_shape(b)) return Bcast::kFull;
  if (b.rows() == 1 && b.cols() == 1) return Bcast::kScalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::kRow;
  if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::kCol;
  throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(b) +
                              " onto " + shape_str(a));
}

inline std::size_t bidx(Bcast k, std::size_t r, std::size_t c, std::size_t cols) {
  switch (k) {
    case Bcast::kFull: return r * cols + c;
    case Bcast::kRow: return c;
    case Bcast::kCol: return r;
    default: return 0;
  }
}

}  // namespace detail

// Binary ops: `b` may be full-shape, a [1,m] row, an [n,1] column or [1,1].
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto k = detail::broadcast_kind(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  const std::size_t n = out.rows(), m = out.cols();
  if (k == detail::Bcast::kFull) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  } else {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) out(r, c) += b.value()[detail::bidx(k, r, c, m)];
  }
  return make_result<T>(std::move(out), {a, b}, [a, b, k](Node<T>& self) {
    const auto& g = self.grad;
    if (a.requires_grad()) {
      auto& ga = a.node()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->ensure_grad();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c)
          gb[detail::bidx(k, r, c, g.cols())] += g(r, c);
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto k = detail::broadcast_kind(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  const std::size_t m = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < m; ++c) out(r, c) -= b.value()[detail::bidx(k, r, c, m)];
  return make_result<T>(std::move(out), {a, b}, [a, b, k](Node<T>& self) {
    const auto& g = self.grad;
    if (a.requires_grad()) {
      auto& ga = a.node()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->ensure_grad();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c)
          gb[detail::bidx(k, r, c, g.cols())] -= g(r, c);
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto k = detail::broadcast_kind(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const std::size_t m = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < m; ++c) out(r, c) *= b.value()[detail::bidx(k, r, c, m)];
  return make_result<T>(std::move(out), {a, b}, [a, b, k](Node<T>& self) {
    const auto& g = self.grad;
    const std::size_t m = g.cols();
    if (a.requires_grad()) {
      auto& ga = a.node()->ensure_grad();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < m; ++c)
          ga(r, c) += g(r, c) * b.value()[detail::bidx(k, r, c, m)];
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->ensure_grad();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < m; ++c)
          gb[detail::bidx(k, r, c, m)] += g(r, c) * a.value()(r, c);
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  auto k = detail::broadcast_kind(a.value(), b.value(), "div");
  Tensor<T> out = a.value();
  const std::size_t m = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < m; ++c) out(r, c) /= b.value()[detail::bidx(k, r, c, m)];
  return make_result<T>(std::move(out), {a, b}, [a, b, k](Node<T>& self) {
    const auto& g = self.grad;
    const std::size_t m = g.cols();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < m; ++c) {
        const T bv = b.value()[detail::bidx(k, r, c, m)];
        if (a.requires_grad()) a.node()->ensure_grad()(r, c) += g(r, c) / bv;
        if (b.requires_grad())
          b.node()->ensure_grad()[detail::bidx(k, r, c, m)] -=
              g(r, c) * a.value()(r, c) / (bv * bv);
      }
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  return make_result<T>(std::move(out), {a}, [a, s](Node<T>& self) {
    auto& ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * self.grad[i];
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s;
  return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    auto& ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = canvasflow::matmul(a.value(), b.value());
  return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    const auto& g = self.grad;
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    if (a.requires_grad()) {
      kernels::gemm_nt_acc(g.data(), b.value(), a.node()->ensure_grad().data(), n, m);
    }
    if (b.requires_grad()) {
      kernels::gemm_tn_acc(a.value().data(), g.data(), b.node()->ensure_grad().data(), n, k, m);
    }
  });
}

// x[n,in] * W[in,out] + bias[1,out]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  if (x.cols() != w.rows())
    throw std::invalid_argument("linear: input " + shape_str(x.value()) + " weight " +
                                shape_str(w.value()));
  const std::size_t n = x.rows(), k = x.cols(), m = w.cols();
  Tensor<T> out(n, m);
  if (bias.defined()) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) out(r, c) = bias.value()[c];
  }
  kernels::gemm_acc(x.value().data(), w.value().data(), out.data(), n, k, m);
  std::vector<Var<T>> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [x, w, bias, n, k, m](Node<T>& self) {
    const auto& g = self.grad;
    if (x.requires_grad())
      kernels::gemm_nt_acc(g.data(), w.value(), x.node()->ensure_grad().data(), n, m);
    if (w.requires_grad())
      kernels::gemm_tn_acc(x.value().data(), g.data(), w.node()->ensure_grad().data(), n, k, m);
    if (bias.defined() && bias.requires_grad()) {
      auto& gb = bias.node()->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gb[c] += g(r, c);
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  return make_result<T>(kernels::transpose(a.value()), {a}, [a](Node<T>& self) {
    auto& ga = a.node()->ensure_grad();
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += self.grad(c, r);
  });
}

namespace detail {

template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D df) {
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(out[i]);
  return make_result<T>(std::move(out), {a}, [a, df](Node<T>& self) {
    auto& ga = a.node()->ensure_grad();
    const auto& x = a.value();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * df(x[i]);
  });
}

template <typename T>
T gelu_tanh(T x) {
  const T c = T(0.7978845608028654);
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_tanh_grad(T x) {
  const T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

}  // namespace detail

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  return detail::unary(a, detail::gelu_tanh<T>, detail::gelu_tanh_grad<T>);
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

// Per-row normalization without affine parameters.
template <typename T>
Var<T> layer_norm(const Var<T>& x, T eps = T(1e-6)) {
  const std::size_t n = x.rows(), m = x.cols();
  Tensor<T> out(n, m);
  std::vector<T> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = x.value().row(r);
    T mean = 0;
    for (T v : row) mean += v;
    mean /= T(m);
    T var = 0;
    for (T v : row) var += (v - mean) * (v - mean);
    var /= T(m);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < m; ++c) out(r, c) = (row[c] - mean) * is;
  }
  Tensor<T> normed = out;
  return make_result<T>(std::move(out), {x},
                        [x, normed = std::move(normed), inv_std, n, m](Node<T>& self) {
    auto& gx = x.node()->ensure_grad();
    for (std::size_t r = 0; r < n; ++r) {
      T sum_g = 0, sum_gy = 0;
      for (std::size_t c = 0; c < m; ++c) {
        sum_g += self.grad(r, c);
        sum_gy += self.grad(r, c) * normed(r, c);
      }
      for (std::size_t c = 0; c < m; ++c) {
        gx(r, c) += inv_std[r] *
                    (self.grad(r, c) - sum_g / T(m) - normed(r, c) * sum_gy / T(m));
      }
    }
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, std::size_t r0, std::size_t r1) {
  if (r0 > r1 || r1 > a.rows())
    throw std::out_of_range("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                            ") of " + shape_str(a.value()));
  const std::size_t m = a.cols();
  Tensor<T> out(r1 - r0, m);
  std::copy(a.value().data() + r0 * m, a.value().data() + r1 * m, out.data());
  return make_result<T>(std::move(out), {a}, [a, r0, m](Node<T>& self) {
    auto& ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[r0 * m + i] += self.grad[i];
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t c0, std::size_t c1) {
  if (c0 > c1 || c1 > a.cols())
    throw std::out_of_range("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                            ") of " + shape_str(a.value()));
  const std::size_t n = a.rows(), w = c1 - c0;
  Tensor<T> out(n, w);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = a.value()(r, c0 + c);
  return make_result<T>(std::move(out), {a}, [a, c0, n, w](Node<T>& self) {
    auto& ga = a.node()->ensure_grad();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < w; ++c) ga(r, c0 + c) += self.grad(r, c);
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t m = parts.front().cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.cols() != m) throw std::invalid_argument("concat_rows: column mismatch");
    n += p.rows();
  }
  Tensor<T> out(n, m);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off);
    off += p.value().size();
  }
  return make_result<T>(std::move(out), parts, [parts](Node<T>& self) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) {
        auto& g = p.node()->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += p.value().size();
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw std::invalid_argument("concat_cols: row mismatch");
    m += p.cols();
  }
  Tensor<T> out(n, m);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out(r, off + c) = p.value()(r, c);
    off += p.cols();
  }
  return make_result<T>(std::move(out), parts, [parts, n](Node<T>& self) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) {
        auto& g = p.node()->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < p.cols(); ++c) g(r, c) += self.grad(r, off + c);
      }
      off += p.cols();
    }
  });
}

// out[i] = a[idx[i]] (row gather; backward scatter-adds).
template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<std::size_t> idx) {
  const std::size_t m = a.cols();
  Tensor<T> out(idx.size(), m);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a.rows()) throw std::out_of_range("gather_rows: index out of range");
    std::copy_n(a.value().data() + idx[i] * m, m, out.data() + i * m);
  }
  return make_result<T>(std::move(out), {a}, [a, idx = std::move(idx), m](Node<T>& self) {
    auto& ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < m; ++c) ga(idx[i], c) += self.grad(i, c);
  });
}

// Element permutation: out.flat[i] = a.flat[src[i]].
template <typename T>
Var<T> permute(const Var<T>& a, std::vector<std::size_t> src, std::size_t rows,
               std::size_t cols) {
  if (src.size() != rows * cols) throw std::invalid_argument("permute: size mismatch");
  Tensor<T> out(rows, cols);
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = a.value()[src[i]];
  return make_result<T>(std::move(out), {a}, [a, src = std::move(src)](Node<T>& self) {
    auto& ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < src.size(); ++i) ga[src[i]] += self.grad[i];
  });
}

// a + b on rows where mask[r] != 0; other rows of `a` pass through untouched
// (no arithmetic), so they stay bit-identical.
template <typename T>
Var<T> add_masked_rows(const Var<T>& a, const Var<T>& b, std::vector<std::uint8_t> mask) {
  if (!a.value().same_shape(b.value()) || mask.size() != a.rows())
    throw std::invalid_argument("add_masked_rows: shape mismatch");
  Tensor<T> out = a.value();
  const std::size_t m = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r)
    if (mask[r])
      for (std::size_t c = 0; c < m; ++c) out(r, c) += b.value()(r, c);
  return make_result<T>(std::move(out), {a, b}, [a, b, mask = std::move(mask), m](Node<T>& self) {
    if (a.requires_grad()) {
      auto& ga = a.node()->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->ensure_grad();
      for (std::size_t r = 0; r < mask.size(); ++r)
        if (mask[r])
          for (std::size_t c = 0; c < m; ++c) gb(r, c) += self.grad(r, c);
    }
  });
}

// Column sums -> [1, m].
template <typename T>
Var<T> sum_rows(const Var<T>& a) {
  Tensor<T> out(1, a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out[c] += a.value()(r, c);
  return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    auto& ga = a.node()->ensure_grad();
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += self.grad[c];
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  T s = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value()[i];
  return make_result<T>(Tensor<T>(1, 1, s), {a}, [a](Node<T>& self) {
    auto& ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[0];
  });
}

template <typename T>
Var<T> sum_squares(const Var<T>& a) {
  T s = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value()[i] * a.value()[i];
  return make_result<T>(Tensor<T>(1, 1, s), {a}, [a](Node<T>& self) {
    auto& ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T(2) * a.value()[i] * self.grad[0];
  });
}

// Inverted dropout with keep-probability 1-p.
template <typename T>
Var<T> dropout(const Var<T>& a, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  const T s = T(1.0 / (1.0 - p));
  std::vector<T> mask(a.value().size());
  for (auto& v : mask) v = keep(rng) ? s : T(0);
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_result<T>(std::move(out), {a}, [a, mask = std::move(mask)](Node<T>& self) {
    auto& ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * mask[i];
  });
}

// Multi-head softmax attention. q [nq, H*dh], k/v [nk, H*dh].
// With `causal`, query i sees keys [0, i + causal_offset]. Masked keys are
// skipped rather than zero-weighted.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                 bool causal = false, std::size_t causal_offset = 0) {
  const std::size_t nq = q.rows(), nk = k.rows(), dm = q.cols();
  if (k.cols() != dm || v.cols() != dm || v.rows() != nk || dm % heads != 0)
    throw std::invalid_argument("attention: shape mismatch q" + shape_str(q.value()) + " k" +
                                shape_str(k.value()) + " v" + shape_str(v.value()));
  const std::size_t dh = dm / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  auto kend = [=](std::size_t i) { return causal ? std::min(nk, i + causal_offset + 1) : nk; };
  // probs laid out [heads][nq][nk]
  std::vector<T> probs(heads * nq * nk, T(0));
  Tensor<T> out(nq, dm);
  std::vector<T> logits(nk);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t o = h * dh;
    for (std::size_t i = 0; i < nq; ++i) {
      const std::size_t ke = kend(i);
      if (ke == 0) continue;
      const T* qi = q.value().data() + i * dm + o;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < ke; ++j) {
        const T* kj = k.value().data() + j * dm + o;
        T s = 0;
        for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
        logits[j] = s * sc;
        mx = std::max(mx, logits[j]);
      }
      T z = 0;
      for (std::size_t j = 0; j < ke; ++j) {
        logits[j] = std::exp(logits[j] - mx);
        z += logits[j];
      }
      T* p = probs.data() + (h * nq + i) * nk;
      T* oi = out.data() + i * dm + o;
      for (std::size_t j = 0; j < ke; ++j) {
        p[j] = logits[j] / z;
        const T* vj = v.value().data() + j * dm + o;
        for (std::size_t d = 0; d < dh; ++d) oi[d] += p[j] * vj[d];
      }
    }
  }
  return make_result<T>(
      std::move(out), {q, k, v},
      [q, k, v, heads, dh, dm, nq, nk, sc, kend, probs = std::move(probs)](Node<T>& self) {
        const auto& g = self.grad;
        T* gq = q.requires_grad() ? q.node()->ensure_grad().data() : nullptr;
        T* gk = k.requires_grad() ? k.node()->ensure_grad().data() : nullptr;
        T* gv = v.requires_grad() ? v.node()->ensure_grad().data() : nullptr;
        std::vector<T> dp(nk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t o = h * dh;
          for (std::size_t i = 0; i < nq; ++i) {
            const std::size_t ke = kend(i);
            const T* p = probs.data() + (h * nq + i) * nk;
            const T* gi = g.data() + i * dm + o;
            T dot = 0;
            for (std::size_t j = 0; j < ke; ++j) {
              const T* vj = v.value().data() + j * dm + o;
              T s = 0;
              for (std::size_t d = 0; d < dh; ++d) s += gi[d] * vj[d];
              dp[j] = s;
              dot += p[j] * s;
              if (gv) {
                T* gvj = gv + j * dm + o;
                for (std::size_t d = 0; d < dh; ++d) gvj[d] += p[j] * gi[d];
              }
            }
            const T* qi = q.value().data() + i * dm + o;
            for (std::size_t j = 0; j < ke; ++j) {
              const T ds = p[j] * (dp[j] - dot) * sc;
              if (ds == T(0)) continue;
              const T* kj = k.value().data() + j * dm + o;
              if (gq) {
                T* gqi = gq + i * dm + o;
                for (std::size_t d = 0; d < dh; ++d) gqi[d] += ds * kj[d];
              }
              if (gk) {
                T* gkj = gk + j * dm + o;
                for (std::size_t d = 0; d < dh; ++d) gkj[d] += ds * qi[d];
              }
            }
          }
        }
      });
}

// Rotary embedding over three index axes. Each head's channel pairs are split
// into consecutive sections (t, h, w); pair p of a section with n pairs
// rotates by position * base^(-p/n).
struct RotarySections {
  std::size_t t = 0, h = 0, w = 0;
  std::size_t total() const { return t + h + w; }
  static RotarySections split(std::size_t pairs) {
    RotarySections s;
    s.t = s.h = s.w = pairs / 3;
    std::size_t rem = pairs % 3;
    if (rem > 0) ++s.t;
    if (rem > 1) ++s.h;
    return s;
  }
};

using Position3 = std::array<std::int64_t, 3>;

namespace detail {

template <typename T>
void rotary_apply(const T* in, T* out, std::size_t n, std::size_t dm, std::size_t heads,
                  const RotarySections& sec, const std::vector<Position3>& pos, double base,
                  double sign) {
  const std::size_t dh = dm / heads;
  const std::size_t pairs = sec.total();
  std::vector<double> freq(pairs);
  std::vector<int> axis(pairs);
  std::size_t p = 0;
  const std::size_t counts[3] = {sec.t, sec.h, sec.w};
  for (int a = 0; a < 3; ++a) {
    for (std::size_t q = 0; q < counts[a]; ++q, ++p) {
      freq[p] = std::pow(base, -static_cast<double>(q) / static_cast<double>(counts[a]));
      axis[p] = a;
    }
  }
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t pp = 0; pp < pairs; ++pp) {
      const double ang = sign * static_cast<double>(pos[r][axis[pp]]) * freq[pp];
      const T c = static_cast<T>(std::cos(ang));
      const T s = static_cast<T>(std::sin(ang));
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t i0 = r * dm + h * dh + 2 * pp;
        const T x0 = in[i0], x1 = in[i0 + 1];
        out[i0] = x0 * c - x1 * s;
        out[i0 + 1] = x0 * s + x1 * c;
      }
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> rotary(const Var<T>& x, const std::vector<Position3>& positions, std::size_t heads,
              RotarySections sec, double base = 10000.0) {
  const std::size_t n = x.rows(), dm = x.cols();
  if (positions.size() != n || dm % heads != 0 || 2 * sec.total() > dm / heads)
    throw std::invalid_argument("rotary: inconsistent positions/sections");
  Tensor<T> out = x.value();
  detail::rotary_apply(x.value().data(), out.data(), n, dm, heads, sec, positions, base, 1.0);
  return make_result<T>(std::move(out), {x}, [x, positions, heads, sec, base, n, dm](Node<T>& self) {
    Tensor<T> back = self.grad;
    detail::rotary_apply(self.grad.data(), back.data(), n, dm, heads, sec, positions, base, -1.0);
    auto& gx = x.node()->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += back[i];
  });
}

// 3x3 depthwise convolution with zero padding over a frames x height x width
// token grid. x [F*H*W, C], w [9, C] (row = ky*3+kx), b [1, C].
template <typename T>
Var<T> depthwise_conv3x3(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t frames,
                         std::size_t height, std::size_t width) {
  const std::size_t ch = x.cols();
  if (x.rows() != frames * height * width || w.rows() != 9 || w.cols() != ch || b.cols() != ch)
    throw std::invalid_argument("depthwise_conv3x3: shape mismatch");
  auto at = [=](std::size_t f, std::size_t i, std::size_t j) { return (f * height + i) * width + j; };
  Tensor<T> out(x.rows(), ch);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j) {
        T* o = out.data() + at(f, i, j) * ch;
        for (std::size_t c = 0; c < ch; ++c) o[c] = b.value()[c];
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const long yi = static_cast<long>(i) + dy, xj = static_cast<long>(j) + dx;
            if (yi < 0 || xj < 0 || yi >= static_cast<long>(height) || xj >= static_cast<long>(width))
              continue;
            const T* src = x.value().data() + at(f, yi, xj) * ch;
            const T* k = w.value().data() + ((dy + 1) * 3 + (dx + 1)) * ch;
            for (std::size_t c = 0; c < ch; ++c) o[c] += k[c] * src[c];
          }
      }
  return make_result<T>(std::move(out), {x, w, b}, [x, w, b, frames, height, width, ch, at](Node<T>& self) {
    T* gx = x.requires_grad() ? x.node()->ensure_grad().data() : nullptr;
    T* gw = w.requires_grad() ? w.node()->ensure_grad().data() : nullptr;
    T* gb = b.requires_grad() ? b.node()->ensure_grad().data() : nullptr;
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t i = 0; i < height; ++i)
        for (std::size_t j = 0; j < width; ++j) {
          const T* g = self.grad.data() + at(f, i, j) * ch;
          if (gb)
            for (std::size_t c = 0; c < ch; ++c) gb[c] += g[c];
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const long yi = static_cast<long>(i) + dy, xj = static_cast<long>(j) + dx;
              if (yi < 0 || xj < 0 || yi >= static_cast<long>(height) ||
                  xj >= static_cast<long>(width))
                continue;
              const std::size_t kidx = ((dy + 1) * 3 + (dx + 1)) * ch;
              const std::size_t sidx = at(f, yi, xj) * ch;
              for (std::size_t c = 0; c < ch; ++c) {
                if (gw) gw[kidx + c] += g[c] * x.value()[sidx + c];
                if (gx) gx[sidx + c] += g[c] * w.value()[kidx + c];
              }
            }
        }
  });
}

}  // namespace canvasflow::ops

namespace canvasflow {
using ops::Position3;
using ops::RotarySections;
}  // namespace canvasflow
