// Copyright (c) 2026 The OBR Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace obr {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem-level failures: missing files, short writes, unreadable paths.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Structural problems with inputs: bad container bytes, shape mismatches,
/// unsatisfiable pattern constraints, invalid configuration values.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Numerical failures: non-finite data, Cholesky breakdown after damping
/// escalation.
class NumericError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw FormatError(msg);
}

}  // namespace detail

}  // namespace obr
