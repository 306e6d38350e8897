/*
 * Copyright (c) 2026 The saintcpp Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace saint {

/// Error taxonomy. The CLI maps these onto its exit-code contract:
/// user/config errors exit 2, numeric failures exit 3, artifact
/// incompatibilities exit 4.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor extents disagree (matmul inner dims, concat off-axis, ...).
struct ShapeError : Error {
  using Error::Error;
};

/// An id or index is outside its valid range.
struct IndexError : Error {
  using Error::Error;
};

/// A scalar argument violates its contract (e.g. dropout p >= 1).
struct ParamError : Error {
  using Error::Error;
};

/// An API precondition was violated (non-scalar loss, empty index list, ...).
struct ContractError : Error {
  using Error::Error;
};

/// A forward op produced a NaN or Inf.
struct NumericError : Error {
  using Error::Error;
};

/// Malformed input file (CSV, JSON).
struct ParseError : Error {
  using Error::Error;
};

/// Schema is inconsistent with the data or with itself.
struct SchemaError : Error {
  using Error::Error;
};

/// Stored artifact (bundle, checkpoint) is missing or incompatible.
struct LoadError : Error {
  using Error::Error;
};

/// A metric is undefined for the given inputs (e.g. AUROC with one class).
struct MetricError : Error {
  using Error::Error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

/// Human logs go to stderr; stdout is reserved for machine-readable output.
inline void log_warn(std::string_view msg) {
  std::cerr << "[warn] " << msg << "\n";
}

inline void log_info(std::string_view msg) {
  std::cerr << "[info] " << msg << "\n";
}

/// FNV-1a, used for schema fingerprints in bundle/checkpoint manifests.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

}  // namespace saint
