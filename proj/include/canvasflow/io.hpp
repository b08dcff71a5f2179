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
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "canvasflow/error.hpp"
#include "canvasflow/latent_codec.hpp"
#include "canvasflow/tensor.hpp"

namespace canvasflow::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* d = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = d[v & 15];
  return s;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw io_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot write " + p.string());
  f << s;
  if (!f) throw io_error("short write to " + p.string());
}

// 8-bit binary PPM (P6) of one frame. Values are clamped to [0, 1] and
// rounded to the nearest of 256 levels. `comment` becomes a header comment line.
inline void write_ppm(const fs::path& p, const PixelMedia<float>& m, std::size_t frame = 0,
                      const std::string& comment = {}) {
  std::ostringstream out;
  out << "P6\n";
  if (!comment.empty()) out << "# " << comment << '\n';
  out << m.width << ' ' << m.height << "\n255\n";
  std::string px(m.width * m.height * 3, '\0');
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(m.at(frame, c, y, x), 0.f, 1.f);
        px[(y * m.width + x) * 3 + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.f)));
      }
  out << px;
  write_text(p, out.str());
}

inline PixelMedia<float> read_ppm(const fs::path& p) {
  const std::string s = read_text(p);
  std::istringstream in(s);
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  in >> magic;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxv;
  if (magic != "P6" || !in || w == 0 || h == 0 || maxv != 255)
    throw io_error("unsupported pixmap " + p.string() + " (need 8-bit P6)");
  in.get();
  const std::size_t off = static_cast<std::size_t>(in.tellg());
  if (s.size() < off + w * h * 3) throw io_error("truncated pixmap " + p.string());
  PixelMedia<float> m(1, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        m.at(0, c, y, x) = static_cast<float>(static_cast<unsigned char>(s[off + (y * w + x) * 3 + c])) / 255.f;
  return m;
}

// Writes every frame as <stem>_fNNN.ppm; returns the file names.
inline std::vector<std::string> write_media(const fs::path& dir, const std::string& stem,
                                            const PixelMedia<float>& m,
                                            const std::string& comment = {}) {
  std::vector<std::string> names;
  for (std::size_t f = 0; f < m.frames; ++f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "_f%03zu.ppm", f);
    names.push_back(stem + buf);
    write_ppm(dir / names.back(), m, f, comment);
  }
  return names;
}

inline PixelMedia<float> read_media(const fs::path& dir, const std::vector<std::string>& names) {
  if (names.empty()) throw io_error("read_media: no frames");
  PixelMedia<float> first = read_ppm(dir / names[0]);
  PixelMedia<float> m(names.size(), first.height, first.width);
  for (std::size_t f = 0; f < names.size(); ++f) {
    auto fr = f == 0 ? first : read_ppm(dir / names[f]);
    if (fr.height != m.height || fr.width != m.width) throw io_error("read_media: frame size mismatch");
    std::copy(fr.data.begin(), fr.data.end(), m.data.begin() + static_cast<long>(f * fr.data.size()));
  }
  return m;
}

// Named-tensor archive: "CFTA" u32 version, u64 count, then per tensor
// u64 name length, name bytes, u64 rows, u64 cols, u8 dtype bytes, raw data
// (little-endian host order).
template <typename T>
void write_archive(const fs::path& p, const std::vector<std::pair<std::string, const Tensor<T>*>>& items) {
  std::string buf = "CFTA";
  auto put = [&](const void* src, std::size_t n) { buf.append(static_cast<const char*>(src), n); };
  const std::uint32_t version = 1;
  put(&version, 4);
  const std::uint64_t count = items.size();
  put(&count, 8);
  for (const auto& [name, t] : items) {
    const std::uint64_t len = name.size(), r = t->rows(), c = t->cols();
    const std::uint8_t width = sizeof(T);
    put(&len, 8);
    put(name.data(), name.size());
    put(&r, 8);
    put(&c, 8);
    put(&width, 1);
    put(t->data(), t->size() * sizeof(T));
  }
  write_text(p, buf);
}

template <typename T>
std::map<std::string, Tensor<T>> read_archive(const fs::path& p) {
  const std::string s = read_text(p);
  std::size_t off = 0;
  auto take = [&](void* dst, std::size_t n) {
    if (off + n > s.size()) throw Error(ErrorKind::kCheckpoint, "truncated archive " + p.string());
    std::memcpy(dst, s.data() + off, n);
    off += n;
  };
  char magic[4];
  take(magic, 4);
  std::uint32_t version = 0;
  take(&version, 4);
  if (std::memcmp(magic, "CFTA", 4) != 0 || version != 1)
    throw Error(ErrorKind::kCheckpoint, "not a tensor archive: " + p.string());
  std::uint64_t count = 0;
  take(&count, 8);
  std::map<std::string, Tensor<T>> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t len = 0, r = 0, c = 0;
    std::uint8_t width = 0;
    take(&len, 8);
    std::string name(len, '\0');
    take(name.data(), len);
    take(&r, 8);
    take(&c, 8);
    take(&width, 1);
    if (width != sizeof(T))
      throw Error(ErrorKind::kCheckpoint, "archive dtype mismatch for " + name);
    Tensor<T> t(r, c);
    take(t.data(), t.size() * sizeof(T));
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

// Directory written under a temporary name and renamed into place.
class AtomicDir {
 public:
  explicit AtomicDir(fs::path final_path)
      : final_(std::move(final_path)), tmp_(final_.string() + ".tmp") {
    fs::remove_all(tmp_);
    fs::create_directories(tmp_);
  }
  ~AtomicDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(tmp_, ec);
    }
  }
  AtomicDir(const AtomicDir&) = delete;
  AtomicDir& operator=(const AtomicDir&) = delete;

  const fs::path& path() const { return tmp_; }
  void commit() {
    fs::path old = final_.string() + ".old";
    fs::remove_all(old);
    if (fs::exists(final_)) fs::rename(final_, old);
    fs::rename(tmp_, final_);
    fs::remove_all(old);
    committed_ = true;
  }

 private:
  fs::path final_, tmp_;
  bool committed_ = false;
};

// Exclusive per-directory lock; creation fails if the lock file exists.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".canvasflow.lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw Error(ErrorKind::kLocked, "output directory is locked: " + path_.string());
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

}  // namespace canvasflow::io
