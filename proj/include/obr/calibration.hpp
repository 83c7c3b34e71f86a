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
#include <cstdint>
#include <vector>

#include "obr/errors.hpp"
#include "obr/linalg.hpp"
#include "obr/matrix.hpp"
#include "obr/rng.hpp"

namespace obr {

inline constexpr double kDefaultDampRatio = 0.01;

/// Curvature proxy for one layer: h = 2*x*x^T + lambda*I, built from
/// calibration activations x (c_in x samples). Symmetric PD after damping;
/// immutable once built and shared read-only by all row solvers.
struct Hessian {
  Matrix h;
  double damp_lambda = 0.0;
  std::size_t source_samples = 0;

  std::size_t dim() const { return h.rows(); }
};

/// Per-input-channel Euclidean norms of the calibration activations,
/// column_norms[j] = ||x[j, :]||_2. The activation factor of the
/// activation-aware pruning score.
struct ActivationStats {
  std::vector<double> column_norms;
};

/// Builds h = 2*x*x^T + lambda*I with lambda = damp_ratio * mean(diag(2xx^T))
/// (or damp_ratio itself when the mean diagonal is zero). If the damped
/// matrix fails Cholesky, the damping doubles, up to 10 retries, before
/// raising NumericError. The accumulation is exact two-pass at double
/// precision.
inline Hessian build_hessian(const Matrix& x, double damp_ratio) {
  detail::require(x.rows() >= 1 && x.cols() >= 1,
                  "build_hessian: empty activation matrix");
  detail::require(damp_ratio >= 0.0, "build_hessian: damp_ratio must be >= 0");
  x.require_finite("activations");

  const std::size_t n = x.rows();
  Matrix h0(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ri = x.row(i);
    for (std::size_t j = i; j < n; ++j) {
      const auto rj = x.row(j);
      double s = 0.0;
      for (std::size_t l = 0; l < x.cols(); ++l) s += ri[l] * rj[l];
      const double v = 2.0 * s;
      h0(i, j) = v;
      h0(j, i) = v;
    }
  }

  double mean_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_diag += h0(i, i);
  mean_diag /= static_cast<double>(n);

  double lambda = mean_diag > 0.0 ? damp_ratio * mean_diag : damp_ratio;
  Matrix l;
  for (int attempt = 0; attempt <= 10; ++attempt) {
    Matrix h = h0;
    for (std::size_t i = 0; i < n; ++i) h(i, i) += lambda;
    if (cholesky_factor(h, l))
      return Hessian{std::move(h), lambda, x.cols()};
    lambda = lambda > 0.0 ? 2.0 * lambda
                          : 1e-8 * std::max(mean_diag, 1.0);
  }
  throw NumericError(
      "build_hessian: Cholesky failed after damping escalation");
}

inline ActivationStats activation_stats(const Matrix& x) {
  x.require_finite("activations");
  ActivationStats s;
  s.column_norms.resize(x.rows());
  for (std::size_t j = 0; j < x.rows(); ++j) {
    double acc = 0.0;
    for (double v : x.row(j)) acc += v * v;
    s.column_norms[j] = std::sqrt(acc);
  }
  return s;
}

/// Synthetic calibration activations: columns are zero-mean Gaussian samples
/// with covariance (1-rho)*I + rho*1*1^T (unit variance per channel;
/// correlation=0 gives i.i.d. standard normals). Deterministic for a fixed
/// seed.
inline Matrix gen_calibration(std::size_t c_in, std::size_t samples,
                              double correlation, std::uint64_t seed) {
  detail::require(c_in >= 1 && samples >= 1,
                  "gen_calibration: dimensions must be >= 1");
  detail::require(correlation >= 0.0 && correlation < 1.0,
                  "gen_calibration: correlation must lie in [0, 1)");
  Rng rng(seed);
  const double a = std::sqrt(1.0 - correlation);
  const double b = std::sqrt(correlation);
  Matrix x(c_in, samples);
  for (std::size_t l = 0; l < samples; ++l) {
    const double shared = rng.normal();
    for (std::size_t j = 0; j < c_in; ++j)
      x(j, l) = a * rng.normal() + b * shared;
  }
  return x;
}

}  // namespace obr
