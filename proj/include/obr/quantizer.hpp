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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "obr/calibration.hpp"
#include "obr/errors.hpp"
#include "obr/linalg.hpp"
#include "obr/masking.hpp"
#include "obr/matrix.hpp"

namespace obr {

enum class QuantKind { rtn, gptq };

inline std::string to_string(QuantKind k) {
  return k == QuantKind::rtn ? "rtn" : "gptq";
}

inline QuantKind parse_quant_kind(const std::string& s) {
  if (s == "rtn") return QuantKind::rtn;
  if (s == "gptq") return QuantKind::gptq;
  throw FormatError("unknown quantizer '" + s + "'");
}

/// Symmetric per-row integer quantizer parameters. The grid is the restricted
/// range {-qmax..qmax} with qmax = 2^(bits-1)-1, so it stays sign-symmetric.
struct QuantizerSpec {
  int bits = 4;
  QuantKind kind = QuantKind::rtn;
  bool symmetric = true;  // fixed; asymmetric grids are out of scope

  int qmax() const { return (1 << (bits - 1)) - 1; }

  void validate() const {
    detail::require(bits >= 2 && bits <= 8,
                    "quantizer bits must lie in [2, 8], got " +
                        std::to_string(bits));
  }
};

/// Integer codes plus per-row scales; dequant(i,j) = codes[i,j] * scales[i].
struct QuantizedMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int8_t> codes;  // row-major
  std::vector<double> scales;      // length rows, all > 0

  std::int8_t code(std::size_t i, std::size_t j) const {
    return codes[i * cols + j];
  }
  double dequant(std::size_t i, std::size_t j) const {
    return static_cast<double>(code(i, j)) * scales[i];
  }
  Matrix dequantized() const {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) m(i, j) = dequant(i, j);
    return m;
  }
};

/// Per-row grid step: max|row| / qmax, or 1 for an all-zero row.
inline double rtn_row_scale(std::span<const double> row, int qmax) {
  double amax = 0.0;
  for (double v : row) amax = std::max(amax, std::fabs(v));
  return amax > 0.0 ? amax / static_cast<double>(qmax) : 1.0;
}

/// Snaps one value onto the row grid. Ties round half away from zero.
inline std::int8_t rtn_code(double v, double scale, int qmax) {
  const double q = std::round(v / scale);
  const double c = std::clamp(q, -static_cast<double>(qmax),
                              static_cast<double>(qmax));
  return static_cast<std::int8_t>(c);
}

inline QuantizedMatrix rtn_quantize(const Matrix& w,
                                    const QuantizerSpec& spec) {
  spec.validate();
  w.require_finite("weights");
  const int qmax = spec.qmax();
  QuantizedMatrix q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.codes.resize(w.size());
  q.scales.resize(w.rows());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const auto row = w.row(i);
    const double scale = rtn_row_scale(row, qmax);
    q.scales[i] = scale;
    for (std::size_t j = 0; j < w.cols(); ++j)
      q.codes[i * q.cols + j] = rtn_code(row[j], scale, qmax);
  }
  return q;
}

/// Round-to-nearest residual w - dequant(rtn(w)). Always the RTN grid: this
/// is the per-row error a compensation step can see before any sequential
/// quantizer has run.
inline Matrix quant_error(const Matrix& w, const QuantizerSpec& spec) {
  const QuantizedMatrix q = rtn_quantize(w, spec);
  Matrix e(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j)
      e(i, j) = w(i, j) - q.dequant(i, j);
  return e;
}

/// Sequential column-wise quantizer. Columns are visited in ascending index
/// order; each column is snapped onto the fixed per-row RTN grid (scales from
/// w before any updates) and its error is propagated into the not-yet-visited
/// columns through the upper-triangular factor u of H^-1 = u^T*u:
///
///   err_i = (w[i,j] - dq[i,j]) / u[j,j]
///   w[i,k] -= err_i * u[j,k]          for k > j
///
/// which equals the exact single-eviction compensation over the remaining
/// columns. With `frozen` given, mask-zero slots quantize to code 0 and are
/// never touched by updates, so sparsity survives.
inline QuantizedMatrix gptq_quantize(const Matrix& w, const Hessian& hessian,
                                     const QuantizerSpec& spec,
                                     const PruneMask* frozen = nullptr) {
  spec.validate();
  w.require_finite("weights");
  detail::require(hessian.dim() == w.cols(),
                  "gptq_quantize: Hessian dim does not match weight columns");
  if (frozen != nullptr)
    detail::require(frozen->m.rows() == w.rows() &&
                        frozen->m.cols() == w.cols(),
                    "gptq_quantize: frozen mask shape mismatch");

  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  const int qmax = spec.qmax();

  QuantizedMatrix q;
  q.rows = rows;
  q.cols = cols;
  q.codes.resize(rows * cols);
  q.scales.resize(rows);
  for (std::size_t i = 0; i < rows; ++i)
    q.scales[i] = rtn_row_scale(w.row(i), qmax);

  Matrix l;
  if (!cholesky_factor(hessian.h, l))
    throw NumericError("gptq_quantize: Hessian is not positive definite");
  const Matrix hinv = cholesky_inverse(l);
  Matrix lf;
  if (!cholesky_factor(hinv, lf))
    throw NumericError("gptq_quantize: inverse Hessian lost definiteness");
  const Matrix u = lf.transposed();

  Matrix work = w;
  std::vector<double> err(rows);
  for (std::size_t j = 0; j < cols; ++j) {
    const double d = u(j, j);
    for (std::size_t i = 0; i < rows; ++i) {
      const bool live = frozen == nullptr || frozen->m(i, j) != 0.0;
      std::int8_t code = 0;
      if (live) code = rtn_code(work(i, j), q.scales[i], qmax);
      q.codes[i * cols + j] = code;
      const double dq = static_cast<double>(code) * q.scales[i];
      err[i] = (work(i, j) - dq) / d;
    }
    for (std::size_t i = 0; i < rows; ++i) {
      if (err[i] == 0.0) continue;
      double* wrow = work.row(i).data();
      const double* urow = u.row(j).data();
      if (frozen == nullptr) {
        for (std::size_t k = j + 1; k < cols; ++k)
          wrow[k] -= err[i] * urow[k];
      } else {
        const double* mrow = frozen->m.row(i).data();
        for (std::size_t k = j + 1; k < cols; ++k)
          if (mrow[k] != 0.0) wrow[k] -= err[i] * urow[k];
      }
    }
  }
  return q;
}

}  // namespace obr
