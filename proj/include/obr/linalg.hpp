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

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "obr/errors.hpp"
#include "obr/matrix.hpp"

namespace obr {

/// Cholesky factorization a = l*l^T for symmetric positive-definite a.
/// Returns false (leaving l unspecified) when a pivot is non-positive or
/// non-finite, i.e. the matrix is not numerically PD.
inline bool cholesky_factor(const Matrix& a, Matrix& l) {
  const std::size_t n = a.rows();
  if (a.cols() != n) return false;
  l = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      if (i == j) {
        if (!(s > 0.0) || !std::isfinite(s)) return false;
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return true;
}

/// Solves (l*l^T) x = b given the lower Cholesky factor l.
inline std::vector<double> cholesky_solve(const Matrix& l,
                                          std::span<const double> b) {
  const std::size_t n = l.rows();
  std::vector<double> y(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    double s = y[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * y[k];
    y[ii] = s / l(ii, ii);
  }
  return y;
}

/// Inverse of a = l*l^T from its lower Cholesky factor.
inline Matrix cholesky_inverse(const Matrix& l) {
  const std::size_t n = l.rows();
  Matrix inv(n, n);
  std::vector<double> e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    std::vector<double> col = cholesky_solve(l, e);
    e[j] = 0.0;
    for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
  }
  // Symmetrize: the solve introduces last-bit asymmetry.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) {
      const double v = 0.5 * (inv(i, j) + inv(j, i));
      inv(i, j) = v;
      inv(j, i) = v;
    }
  return inv;
}

/// Inverse of a symmetric positive-definite matrix. Throws NumericError when
/// the factorization breaks down.
inline Matrix spd_inverse(const Matrix& a) {
  Matrix l;
  if (!cholesky_factor(a, l))
    throw NumericError("spd_inverse: matrix is not positive definite");
  return cholesky_inverse(l);
}

}  // namespace obr
