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

#include <bit>
#include <cmath>
#include <cstdint>
#include <utility>

#include "obr/errors.hpp"
#include "obr/matrix.hpp"
#include "obr/rng.hpp"

namespace obr {

enum class RotationKind { none, hadamard };

/// Orthogonal rotation on the input-channel axis. Hadamard requires a
/// power-of-two dimension; the seed draws the random +-1 row signs.
struct RotationSpec {
  RotationKind kind = RotationKind::none;
  std::uint64_t seed = 0;
  std::size_t dim = 0;
};

/// Max-norm of q^T*q - I; small for orthogonal q.
inline double orthogonality_defect(const Matrix& q) {
  const Matrix g = matmul(q.transposed(), q);
  double m = 0.0;
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j)
      m = std::max(m, std::fabs(g(i, j) - (i == j ? 1.0 : 0.0)));
  return m;
}

/// Returns q = D * H_n / sqrt(n): the Sylvester-Hadamard matrix with
/// seed-derived random row signs, scaled to orthonormal. kind=none returns
/// the identity.
inline Matrix build_rotation(const RotationSpec& spec) {
  if (spec.kind == RotationKind::none) return Matrix::identity(spec.dim);
  detail::require(spec.dim >= 1 && std::has_single_bit(spec.dim),
                  "hadamard rotation requires a power-of-two dimension, got " +
                      std::to_string(spec.dim));
  const std::size_t n = spec.dim;
  Rng rng(spec.seed);
  const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(n));
  Matrix q(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double sign = rng.sign();
    for (std::size_t j = 0; j < n; ++j) {
      // Sylvester construction: H[i][j] = (-1)^popcount(i & j).
      const double h = (std::popcount(i & j) & 1u) ? -1.0 : 1.0;
      q(i, j) = sign * h * inv_sqrt_n;
    }
  }
  return q;
}

/// Applies the rotation pair: w -> w*q (input-channel axis of the weights),
/// x -> q^T*x. The layer function is preserved: (w*q)(q^T*x) = w*x.
inline std::pair<Matrix, Matrix> rotate_pair(const Matrix& w, const Matrix& x,
                                             const Matrix& q) {
  detail::require(q.rows() == q.cols(), "rotation matrix must be square");
  detail::require(w.cols() == q.rows(),
                  "rotate_pair: weight columns do not match rotation dim");
  detail::require(x.rows() == q.rows(),
                  "rotate_pair: activation rows do not match rotation dim");
  return {matmul(w, q), matmul(q.transposed(), x)};
}

}  // namespace obr
