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
#include <cassert>
#include <cstddef>
#include <cstdlib>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace canvasflow {

// Row-major 2D buffer. Every activation in the library is laid out as
// [tokens, channels]; media with more axes is flattened by the caller.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("Tensor: data size " + std::to_string(data_.size()) +
                                  " does not match " + std::to_string(rows_) + "x" +
                                  std::to_string(cols_));
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

template <typename T>
std::string shape_str(const Tensor<T>& t) {
  return shape_str(t.rows(), t.cols());
}

namespace kernels {

// Worker count for the row-parallel kernels. Row partitioning never changes
// the per-element accumulation order, so results are identical for any count.
inline int& thread_count() {
  static int n = [] {
    if (const char* env = std::getenv("CANVASFLOW_THREADS")) {
      int v = std::atoi(env);
      if (v > 0) return v;
    }
    return 1;
  }();
  return n;
}

template <typename Fn>
void parallel_rows(std::size_t rows, std::size_t work, Fn&& fn) {
  int workers = thread_count();
  if (workers <= 1 || rows < 8 || work < (1u << 18)) {
    fn(std::size_t{0}, rows);
    return;
  }
  workers = std::min<int>(workers, static_cast<int>(rows / 4));
  std::vector<std::thread> pool;
  std::size_t chunk = (rows + workers - 1) / workers;
  chunk = (chunk + 3) / 4 * 4;
  for (std::size_t r0 = 0; r0 < rows; r0 += chunk) {
    std::size_t r1 = std::min(rows, r0 + chunk);
    pool.emplace_back([&fn, r0, r1] { fn(r0, r1); });
  }
  for (auto& t : pool) t.join();
}

// C[n,m] += A[n,k] * B[k,m]. Each output element accumulates over k in
// ascending order regardless of n, so row i of the result depends only on
// row i of A. Prefix-preservation tests rely on this.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  parallel_rows(n, n * k * m, [&](std::size_t r0, std::size_t r1) {
    std::size_t i = r0;
    for (; i + 4 <= r1; i += 4) {
      T* c0 = c + (i + 0) * m;
      T* c1 = c + (i + 1) * m;
      T* c2 = c + (i + 2) * m;
      T* c3 = c + (i + 3) * m;
      const T* a0 = a + (i + 0) * k;
      const T* a1 = a + (i + 1) * k;
      const T* a2 = a + (i + 2) * k;
      const T* a3 = a + (i + 3) * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T* br = b + p * m;
        const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
        for (std::size_t j = 0; j < m; ++j) {
          const T bj = br[j];
          c0[j] += v0 * bj;
          c1[j] += v1 * bj;
          c2[j] += v2 * bj;
          c3[j] += v3 * bj;
        }
      }
    }
    for (; i < r1; ++i) {
      T* ci = c + i * m;
      const T* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T* br = b + p * m;
        const T v = ai[p];
        for (std::size_t j = 0; j < m; ++j) ci[j] += v * br[j];
      }
    }
  });
}

// C[k,m] += A[n,k]^T * B[n,m]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T v = ai[p];
      if (v == T(0)) continue;
      T* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += v * bi[j];
    }
  }
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  Tensor<T> out(x.cols(), x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(c, r) = x(r, c);
  return out;
}

// C[n,m] += A[n,k] * B[m,k]^T
template <typename T>
void gemm_nt_acc(const T* a, const Tensor<T>& b, T* c, std::size_t n, std::size_t k) {
  Tensor<T> bt = transpose(b);
  gemm_acc(a, bt.data(), c, n, k, b.rows());
}

}  // namespace kernels

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: " + shape_str(a) + " x " + shape_str(b));
  }
  Tensor<T> out(a.rows(), b.cols());
  kernels::gemm_acc(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
  return out;
}

}  // namespace canvasflow
