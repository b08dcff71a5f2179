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

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "canvasflow/error.hpp"

namespace canvasflow {

// Closed caption vocabulary. Serialized as one symbol per line; the line
// number is the token id.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;

  static const Vocabulary& standard() {
    static const Vocabulary v(std::vector<std::string>{
        "<pad>", "<BoS>", "<EoS>", "<img>", "<vid>",
        "a", "the", "and", "to", "with", "of", "in",
        "one", "two", "three", "four",
        "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange",
        "circle", "square", "triangle", "circles", "squares", "triangles",
        "left_of", "right_of", "above", "below",
        "moving_left", "moving_right", "moving_up", "moving_down", "static",
        "recolor", "remove", "add", "move",
        "left", "right", "up", "down",
        "image", "video", "generate", "edit", "animate", "reference", "keep",
        "background", "black", "scene", "same", "frame", "into", "then", "it",
    });
    return v;
  }

  explicit Vocabulary(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (!ids_.emplace(symbols_[i], static_cast<int>(i)).second)
        throw config_error("vocabulary: duplicate symbol '" + symbols_[i] + "'");
    }
    if (symbols_.size() <= kEos || symbols_[kEos] != "<EoS>" || symbols_[kBos] != "<BoS>")
      throw config_error("vocabulary: <BoS>/<EoS> must sit at ids 1/2");
  }

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size())
      throw config_error("vocabulary: id out of range " + std::to_string(id));
    return symbols_[id];
  }
  int id(const std::string& s) const {
    auto it = ids_.find(s);
    if (it == ids_.end()) throw config_error("vocabulary: unknown symbol '" + s + "'");
    return it->second;
  }
  bool contains(const std::string& s) const { return ids_.count(s) != 0; }

  std::vector<int> encode(const std::string& text) const {
    std::istringstream in(text);
    std::vector<int> out;
    for (std::string w; in >> w;) out.push_back(id(w));
    return out;
  }
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += symbol(ids[i]);
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw io_error("cannot write " + path);
    for (const auto& s : symbols_) f << s << '\n';
  }
  static Vocabulary load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot read " + path);
    std::vector<std::string> syms;
    for (std::string line; std::getline(f, line);)
      if (!line.empty()) syms.push_back(line);
    return Vocabulary(std::move(syms));
  }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace canvasflow
