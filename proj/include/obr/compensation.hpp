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

// Group error compensation. Each weight row is an independent quadratic
// sub-problem J(dw) = 1/2 * dw * H * dw^T. Given a perturbation e on an
// eviction index set E, the retained set R absorbs it:
//
//   delta_R = -H_RR^{-1} H_RE e_E
//
// which minimizes J over all adjustments supported on R. Rows may be solved
// in parallel; the Hessian is shared read-only.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "obr/calibration.hpp"
#include "obr/errors.hpp"
#include "obr/linalg.hpp"
#include "obr/matrix.hpp"
#include "obr/quantizer.hpp"

namespace obr {

/// Index split of (a subset of) one row. Both lists ascending and disjoint.
/// Pruning partitions cover every column; quantization partitions live inside
/// the retained set of the pruning stage.
struct RowPartition {
  std::vector<std::size_t> retain;
  std::vector<std::size_t> evict;

  void validate(std::size_t c_in) const {
    auto check = [&](const std::vector<std::size_t>& v, const char* which) {
      for (std::size_t k = 0; k < v.size(); ++k) {
        detail::require(v[k] < c_in,
                        std::string(which) + " index out of range");
        if (k > 0)
          detail::require(v[k - 1] < v[k],
                          std::string(which) + " indices must be ascending");
      }
    };
    check(retain, "retain");
    check(evict, "evict");
    // Disjointness: both sorted, walk once.
    std::size_t a = 0, b = 0;
    while (a < retain.size() && b < evict.size()) {
      if (retain[a] == evict[b])
        throw FormatError("retain and evict sets overlap");
      retain[a] < evict[b] ? ++a : ++b;
    }
  }
};

/// Solver output: the adjustment (full row width, nonzero only on the retain
/// set) and the objective value before/after. objective_after never exceeds
/// objective_before: the zero adjustment is always feasible.
struct RowCompensation {
  std::vector<double> delta;
  double objective_before = 0.0;
  double objective_after = 0.0;
};

/// Closed-form group error compensation. `e_evict` is the perturbation
/// actually applied on the evicted slots (for pruning: -w_E, the value lost;
/// for quantization: quant(w)_E - w_E). Solves H_RR * delta = -H_RE * e via
/// Cholesky of the already-damped Hessian. Degenerate contracts: empty E
/// returns zero delta and zero objectives; empty R returns zero delta with
/// the objective unchanged.
inline RowCompensation solve_compensation(const Hessian& hessian,
                                          const RowPartition& part,
                                          std::span<const double> e_evict) {
  const std::size_t c_in = hessian.dim();
  part.validate(c_in);
  detail::require(e_evict.size() == part.evict.size(),
                  "solve_compensation: e_evict length != |evict|");

  RowCompensation out;
  out.delta.assign(c_in, 0.0);

  const std::size_t ne = part.evict.size();
  const std::size_t nr = part.retain.size();
  if (ne == 0) return out;

  const Matrix& h = hessian.h;

  // objective_before = 1/2 e^T H_EE e
  double before = 0.0;
  for (std::size_t a = 0; a < ne; ++a)
    for (std::size_t b = 0; b < ne; ++b)
      before += e_evict[a] * h(part.evict[a], part.evict[b]) * e_evict[b];
  before *= 0.5;
  out.objective_before = before;
  out.objective_after = before;
  if (nr == 0) return out;

  // b = H_RE * e
  std::vector<double> rhs(nr, 0.0);
  for (std::size_t a = 0; a < nr; ++a) {
    double s = 0.0;
    const auto hrow = h.row(part.retain[a]);
    for (std::size_t b = 0; b < ne; ++b)
      s += hrow[part.evict[b]] * e_evict[b];
    rhs[a] = s;
  }

  Matrix hrr(nr, nr);
  for (std::size_t a = 0; a < nr; ++a)
    for (std::size_t b = 0; b < nr; ++b)
      hrr(a, b) = h(part.retain[a], part.retain[b]);

  Matrix l;
  if (!cholesky_factor(hrr, l))
    throw NumericError("solve_compensation: H_RR is not positive definite");
  std::vector<double> neg_rhs(nr);
  for (std::size_t a = 0; a < nr; ++a) neg_rhs[a] = -rhs[a];
  const std::vector<double> delta_r = cholesky_solve(l, neg_rhs);

  for (std::size_t a = 0; a < nr; ++a) out.delta[part.retain[a]] = delta_r[a];

  // after = before + 1/2 d^T H_RR d + d^T (H_RE e), from the actual solution.
  double quad = 0.0;
  for (std::size_t a = 0; a < nr; ++a) {
    double s = 0.0;
    for (std::size_t b = 0; b < nr; ++b) s += hrr(a, b) * delta_r[b];
    quad += delta_r[a] * s;
  }
  double cross = 0.0;
  for (std::size_t a = 0; a < nr; ++a) cross += delta_r[a] * rhs[a];
  out.objective_after = before + 0.5 * quad + cross;
  return out;
}

/// Pruning stage: retained set = mask-one slots, evicted = mask-zero slots,
/// whose values are removed outright. The compensated sparse row is
/// w_bar = [w_R + delta_R, 0 on E]. An all-pruned row yields zero
/// compensation and w_bar = 0.
inline RowCompensation prune_compensation(std::span<const double> w_row,
                                          std::span<const double> mask_row,
                                          const Hessian& hessian) {
  detail::require(w_row.size() == mask_row.size() &&
                      w_row.size() == hessian.dim(),
                  "prune_compensation: dimension mismatch");
  RowPartition part;
  std::vector<double> e;
  for (std::size_t j = 0; j < w_row.size(); ++j) {
    if (mask_row[j] != 0.0) {
      part.retain.push_back(j);
    } else {
      part.evict.push_back(j);
      e.push_back(-w_row[j]);  // pruning removes the value
    }
  }
  return solve_compensation(hessian, part, e);
}

/// RTN perturbation (dequant - value) of the chosen slots, on the grid of the
/// full row.
inline std::vector<double> quant_eviction_error(
    std::span<const double> w_bar_row, std::span<const std::size_t> evict,
    const QuantizerSpec& spec) {
  const int qmax = spec.qmax();
  const double scale = rtn_row_scale(w_bar_row, qmax);
  std::vector<double> e(evict.size());
  for (std::size_t k = 0; k < evict.size(); ++k) {
    const double v = w_bar_row[evict[k]];
    const double dq = static_cast<double>(rtn_code(v, scale, qmax)) * scale;
    e[k] = dq - v;
  }
  return e;
}

/// Quantization stage over the surviving slots. The first floor(alpha*|R1|)
/// retained indices (ascending column order) become the eviction set E2 and
/// are charged their RTN grid error; the rest (R2) absorb it. The grid step
/// comes from the whole compensated row so this stage and the final quantizer
/// share one grid. alpha=0 or an empty R2 yields zero compensation; the
/// objective fields still report the irreducible error of E2.
inline RowCompensation quant_compensation(
    std::span<const double> w_bar_row,
    std::span<const std::size_t> retained, double alpha,
    const Hessian& hessian, const QuantizerSpec& spec) {
  detail::require(w_bar_row.size() == hessian.dim(),
                  "quant_compensation: dimension mismatch");
  detail::require(alpha >= 0.0 && alpha <= 1.0,
                  "quant_compensation: alpha must lie in [0, 1]");
  spec.validate();

  const std::size_t t = static_cast<std::size_t>(
      std::floor(alpha * static_cast<double>(retained.size())));

  RowPartition part;
  part.evict.assign(retained.begin(), retained.begin() + t);
  part.retain.assign(retained.begin() + t, retained.end());
  return solve_compensation(
      hessian, part, quant_eviction_error(w_bar_row, part.evict, spec));
}

}  // namespace obr
