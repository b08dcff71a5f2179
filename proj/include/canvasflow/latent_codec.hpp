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

#include <cstddef>
#include <string>
#include <vector>

#include "canvasflow/error.hpp"
#include "canvasflow/tensor.hpp"

namespace canvasflow {

enum class MediaMode { kImage, kVideo };

inline constexpr std::size_t kTemporalGroup = 4;

// Pixel media, layout [frame][channel][row][col], 3 channels, values in [0,1].
template <typename T = float>
struct PixelMedia {
  std::size_t frames = 0, height = 0, width = 0;
  std::vector<T> data;

  PixelMedia() = default;
  PixelMedia(std::size_t f, std::size_t h, std::size_t w, T fill = T(0))
      : frames(f), height(h), width(w), data(f * 3 * h * w, fill) {}

  static constexpr std::size_t channels = 3;
  T& at(std::size_t f, std::size_t c, std::size_t y, std::size_t x) {
    return data[((f * 3 + c) * height + y) * width + x];
  }
  const T& at(std::size_t f, std::size_t c, std::size_t y, std::size_t x) const {
    return data[((f * 3 + c) * height + y) * width + x];
  }
  PixelMedia frame(std::size_t f) const {
    PixelMedia out(1, height, width);
    std::copy_n(data.begin() + f * 3 * height * width, 3 * height * width, out.data.begin());
    return out;
  }
  friend bool operator==(const PixelMedia&, const PixelMedia&) = default;
};

// Latent media, layout [latent_frame][channel][row][col].
template <typename T = float>
struct LatentMedia {
  std::size_t frames = 0, channels = 0, height = 0, width = 0;
  std::vector<T> data;

  LatentMedia() = default;
  LatentMedia(std::size_t f, std::size_t d, std::size_t h, std::size_t w, T fill = T(0))
      : frames(f), channels(d), height(h), width(w), data(f * d * h * w, fill) {}

  T& at(std::size_t f, std::size_t c, std::size_t y, std::size_t x) {
    return data[((f * channels + c) * height + y) * width + x];
  }
  const T& at(std::size_t f, std::size_t c, std::size_t y, std::size_t x) const {
    return data[((f * channels + c) * height + y) * width + x];
  }
  std::size_t frame_size() const { return channels * height * width; }
  friend bool operator==(const LatentMedia&, const LatentMedia&) = default;
};

struct CodecConfig {
  std::size_t spatial_factor = 8;
  MediaMode mode = MediaMode::kImage;

  void validate() const {
    const std::size_t s = spatial_factor;
    if (s < 2 || (s & (s - 1)) != 0)
      throw config_error("codec: spatial_factor must be a power of two >= 2, got " +
                         std::to_string(s));
  }
  std::size_t latent_channels() const {
    const std::size_t s2 = spatial_factor * spatial_factor;
    return mode == MediaMode::kImage ? 3 * s2 : 3 * kTemporalGroup * s2;
  }
};

struct LatentShape {
  std::size_t frames, channels, height, width;
  friend bool operator==(const LatentShape&, const LatentShape&) = default;
};

inline LatentShape latent_grid_shape(std::size_t frames, std::size_t height, std::size_t width,
                                     const CodecConfig& cfg) {
  cfg.validate();
  if (frames == 0) throw shape_error("codec: frames must be >= 1");
  if (height % cfg.spatial_factor != 0)
    throw shape_error("codec: height " + std::to_string(height) + " not divisible by " +
                      std::to_string(cfg.spatial_factor));
  if (width % cfg.spatial_factor != 0)
    throw shape_error("codec: width " + std::to_string(width) + " not divisible by " +
                      std::to_string(cfg.spatial_factor));
  std::size_t lf = 1;
  if (cfg.mode == MediaMode::kImage) {
    if (frames != 1) throw shape_error("codec: image mode needs exactly 1 frame");
  } else {
    if ((frames - 1) % kTemporalGroup != 0)
      throw shape_error("codec: frames " + std::to_string(frames) +
                        " not congruent to 1 mod 4");
    lf = 1 + (frames - 1) / kTemporalGroup;
  }
  return {lf, cfg.latent_channels(), height / cfg.spatial_factor, width / cfg.spatial_factor};
}

namespace detail {

// Source pixel frame of group member g inside latent frame lf.
inline std::size_t source_frame(std::size_t lf, std::size_t g, MediaMode mode) {
  if (mode == MediaMode::kImage || lf == 0) return 0;
  return (lf - 1) * kTemporalGroup + 1 + g;
}

}  // namespace detail

// Space-to-depth by s per frame; video mode also channel-stacks each group of
// four frames (frame 0 stacked with itself) into one latent frame.
// channel = ((g * 3 + c) * s + dy) * s + dx.
template <typename T>
LatentMedia<T> encode(const PixelMedia<T>& x, const CodecConfig& cfg) {
  const LatentShape sh = latent_grid_shape(x.frames, x.height, x.width, cfg);
  if (x.data.size() != x.frames * 3 * x.height * x.width)
    throw shape_error("codec: pixel buffer size mismatch");
  const std::size_t s = cfg.spatial_factor;
  const std::size_t groups = cfg.mode == MediaMode::kImage ? 1 : kTemporalGroup;
  LatentMedia<T> z(sh.frames, sh.channels, sh.height, sh.width);
  for (std::size_t lf = 0; lf < sh.frames; ++lf)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t pf = detail::source_frame(lf, g, cfg.mode);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t dy = 0; dy < s; ++dy)
          for (std::size_t dx = 0; dx < s; ++dx) {
            const std::size_t ch = ((g * 3 + c) * s + dy) * s + dx;
            for (std::size_t i = 0; i < sh.height; ++i)
              for (std::size_t j = 0; j < sh.width; ++j)
                z.at(lf, ch, i, j) = x.at(pf, c, i * s + dy, j * s + dx);
          }
    }
  return z;
}

template <typename T>
PixelMedia<T> decode(const LatentMedia<T>& z, const CodecConfig& cfg) {
  cfg.validate();
  if (z.channels != cfg.latent_channels())
    throw shape_error("codec: latent has " + std::to_string(z.channels) + " channels, expected " +
                      std::to_string(cfg.latent_channels()));
  if (z.frames == 0) throw shape_error("codec: latent has no frames");
  if (cfg.mode == MediaMode::kImage && z.frames != 1)
    throw shape_error("codec: image mode latent must have one frame");
  const std::size_t s = cfg.spatial_factor;
  const std::size_t frames =
      cfg.mode == MediaMode::kImage ? 1 : 1 + (z.frames - 1) * kTemporalGroup;
  PixelMedia<T> x(frames, z.height * s, z.width * s);
  auto ch = [s](std::size_t g, std::size_t c, std::size_t dy, std::size_t dx) {
    return ((g * 3 + c) * s + dy) * s + dx;
  };
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t dy = 0; dy < s; ++dy)
      for (std::size_t dx = 0; dx < s; ++dx)
        for (std::size_t i = 0; i < z.height; ++i)
          for (std::size_t j = 0; j < z.width; ++j) {
            T v;
            if (cfg.mode == MediaMode::kImage) {
              v = z.at(0, ch(0, c, dy, dx), i, j);
            } else {
              // Pairwise sum keeps four identical copies exact.
              const T a = z.at(0, ch(0, c, dy, dx), i, j) + z.at(0, ch(1, c, dy, dx), i, j);
              const T b = z.at(0, ch(2, c, dy, dx), i, j) + z.at(0, ch(3, c, dy, dx), i, j);
              v = (a + b) * T(0.25);
            }
            x.at(0, c, i * s + dy, j * s + dx) = v;
          }
  for (std::size_t lf = 1; lf < z.frames; ++lf)
    for (std::size_t g = 0; g < kTemporalGroup; ++g) {
      const std::size_t pf = detail::source_frame(lf, g, cfg.mode);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t dy = 0; dy < s; ++dy)
          for (std::size_t dx = 0; dx < s; ++dx)
            for (std::size_t i = 0; i < z.height; ++i)
              for (std::size_t j = 0; j < z.width; ++j)
                x.at(pf, c, i * s + dy, j * s + dx) = z.at(lf, ch(g, c, dy, dx), i, j);
    }
  return x;
}

// [F'*H'*W', d] view used by the networks: one row per latent cell.
template <typename T>
Tensor<T> to_cells(const LatentMedia<T>& z) {
  Tensor<T> t(z.frames * z.height * z.width, z.channels);
  for (std::size_t f = 0; f < z.frames; ++f)
    for (std::size_t c = 0; c < z.channels; ++c)
      for (std::size_t i = 0; i < z.height; ++i)
        for (std::size_t j = 0; j < z.width; ++j)
          t((f * z.height + i) * z.width + j, c) = z.at(f, c, i, j);
  return t;
}

template <typename T>
LatentMedia<T> from_cells(const Tensor<T>& t, std::size_t frames, std::size_t height,
                          std::size_t width) {
  if (t.rows() != frames * height * width) throw shape_error("from_cells: row count mismatch");
  LatentMedia<T> z(frames, t.cols(), height, width);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t c = 0; c < z.channels; ++c)
      for (std::size_t i = 0; i < height; ++i)
        for (std::size_t j = 0; j < width; ++j)
          z.at(f, c, i, j) = t((f * height + i) * width + j, c);
  return z;
}

template <typename U, typename T>
LatentMedia<U> cast_media(const LatentMedia<T>& z) {
  LatentMedia<U> out(z.frames, z.channels, z.height, z.width);
  for (std::size_t i = 0; i < z.data.size(); ++i) out.data[i] = static_cast<U>(z.data[i]);
  return out;
}

template <typename U, typename T>
PixelMedia<U> cast_media(const PixelMedia<T>& x) {
  PixelMedia<U> out(x.frames, x.height, x.width);
  for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = static_cast<U>(x.data[i]);
  return out;
}

}  // namespace canvasflow
