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

#include <stdexcept>
#include <string>

namespace canvasflow {

// Error classes double as CLI exit-code categories.
enum class ErrorKind : int {
  kInternal = 1,
  kConfig = 2,
  kShape = 3,
  kIo = 4,
  kCheckpoint = 5,
  kNumeric = 6,
  kLocked = 7,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error shape_error(const std::string& what) { return Error(ErrorKind::kShape, what); }
inline Error config_error(const std::string& what) { return Error(ErrorKind::kConfig, what); }
inline Error io_error(const std::string& what) { return Error(ErrorKind::kIo, what); }

}  // namespace canvasflow
