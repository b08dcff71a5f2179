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
#include <gtest/gtest.h>

#include <random>

#include "canvasflow/latent_codec.hpp"

namespace cf = canvasflow;
using cf::CodecConfig;
using cf::MediaMode;
using cf::PixelMedia;

namespace {

template <typename T>
PixelMedia<T> random_media(std::size_t f, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PixelMedia<T> x(f, h, w);
  for (auto& v : x.data) v = static_cast<T>(u(rng));
  return x;
}

CodecConfig video(std::size_t s) { return {s, MediaMode::kVideo}; }
CodecConfig image(std::size_t s) { return {s, MediaMode::kImage}; }

}  // namespace

TEST(LatentShape, FormulaInstances) {
  EXPECT_EQ(cf::latent_grid_shape(121, 704, 1280, video(32)), (cf::LatentShape{31, 12 * 1024, 22, 40}));
  EXPECT_EQ(cf::latent_grid_shape(1, 512, 512, image(32)), (cf::LatentShape{1, 3072, 16, 16}));
  EXPECT_EQ(cf::latent_grid_shape(5, 16, 16, video(8)), (cf::LatentShape{2, 768, 2, 2}));
  EXPECT_EQ(cf::latent_grid_shape(1, 64, 64, image(8)), (cf::LatentShape{1, 192, 8, 8}));
  EXPECT_EQ(cf::latent_grid_shape(81, 16, 16, video(8)).frames, 21u);
}

TEST(LatentShape, TemporalLawOverFrameCounts) {
  for (std::size_t F = 1; F <= 121; F += 4)
    EXPECT_EQ(cf::latent_grid_shape(F, 16, 16, video(8)).frames, 1 + (F - 1) / 4) << F;
}

TEST(LatentShape, RejectsBadDimensionsNamingTheAxis) {
  try {
    cf::latent_grid_shape(1, 60, 64, image(8));
    FAIL();
  } catch (const cf::Error& e) {
    EXPECT_EQ(e.kind(), cf::ErrorKind::kShape);
    EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
  }
  try {
    cf::latent_grid_shape(1, 64, 36, image(8));
    FAIL();
  } catch (const cf::Error& e) {
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos);
  }
  EXPECT_THROW(cf::latent_grid_shape(6, 16, 16, video(8)), cf::Error);
  EXPECT_THROW(cf::latent_grid_shape(5, 16, 16, image(8)), cf::Error);
  EXPECT_THROW(cf::latent_grid_shape(1, 18, 18, image(3)), cf::Error);
}

TEST(Codec, RoundTripIsBitExact) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    auto x = random_media<float>(1, 16, 24, rng);
    EXPECT_EQ(cf::decode(cf::encode(x, image(4)), image(4)), x);
    auto v = random_media<float>(9, 16, 8, rng);
    EXPECT_EQ(cf::decode(cf::encode(v, video(8)), video(8)), v);
    auto d = random_media<double>(5, 8, 8, rng);
    EXPECT_EQ(cf::decode(cf::encode(d, video(2)), video(2)), d);
  }
}

TEST(Codec, ZeroLatentDecodesToZeroPixels) {
  cf::LatentMedia<float> z(3, video(4).latent_channels(), 2, 3);
  auto x = cf::decode(z, video(4));
  EXPECT_EQ(x.frames, 9u);
  for (float v : x.data) EXPECT_EQ(v, 0.f);
}

TEST(Codec, OneHotPixelRoundTripsAndTouchesOneCell) {
  PixelMedia<float> x(9, 16, 16);
  x.at(5, 1, 3, 3) = 1.f;
  const auto z = cf::encode(x, video(8));
  EXPECT_EQ(cf::decode(z, video(8)), x);
  // Frame 5 sits in latent frame 1 + (5-1)/4 = 2, group member 0; pixel (3,3)
  // lies in cell (0,0) at channel ((0*3+1)*8+3)*8+3.
  std::size_t nonzero = 0;
  for (std::size_t f = 0; f < z.frames; ++f)
    for (std::size_t c = 0; c < z.channels; ++c)
      for (std::size_t i = 0; i < z.height; ++i)
        for (std::size_t j = 0; j < z.width; ++j)
          if (z.at(f, c, i, j) != 0.f) {
            ++nonzero;
            EXPECT_EQ(f, 2u);
            EXPECT_EQ(c, (8u + 3u) * 8u + 3u);
            EXPECT_EQ(i, 0u);
            EXPECT_EQ(j, 0u);
          }
  EXPECT_EQ(nonzero, 1u);
}

TEST(Codec, FirstLatentFrameRepeatsFrameZero) {
  std::mt19937_64 rng(2);
  auto x = random_media<float>(5, 8, 8, rng);
  const auto z = cf::encode(x, video(4));
  const std::size_t per = 3 * 16;
  for (std::size_t c = 0; c < per; ++c)
    for (std::size_t g = 1; g < 4; ++g) EXPECT_EQ(z.at(0, c, 1, 1), z.at(0, g * per + c, 1, 1));
}

// Locality: perturbing one pixel changes exactly one latent cell (and in
// latent frame 0, the four copies of one channel of that cell).
TEST(Codec, LocalityOfSinglePixelChanges) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> pick(0, 15);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_media<float>(9, 16, 16, rng);
    const auto z0 = cf::to_cells(cf::encode(x, video(4)));
    const std::size_t f = pick(rng) % 9, c = pick(rng) % 3, y = pick(rng), xx = pick(rng);
    x.at(f, c, y, xx) += 0.5f;
    const auto z1 = cf::to_cells(cf::encode(x, video(4)));
    std::size_t rows_changed = 0;
    for (std::size_t r = 0; r < z0.rows(); ++r) {
      bool diff = false;
      for (std::size_t k = 0; k < z0.cols(); ++k) diff = diff || z0(r, k) != z1(r, k);
      rows_changed += diff;
    }
    EXPECT_EQ(rows_changed, 1u);
  }
}

TEST(Codec, CellsViewRoundTrips) {
  std::mt19937_64 rng(4);
  auto x = random_media<float>(9, 8, 16, rng);
  const auto z = cf::encode(x, video(4));
  const auto cells = cf::to_cells(z);
  EXPECT_EQ(cells.rows(), 3u * 2u * 4u);
  EXPECT_EQ(cells.cols(), 192u);
  EXPECT_EQ(cf::from_cells(cells, 3, 2, 4), z);
}

TEST(Codec, DecodeRejectsInconsistentChannels) {
  cf::LatentMedia<float> z(1, 100, 2, 2);
  EXPECT_THROW(cf::decode(z, image(4)), cf::Error);
}
