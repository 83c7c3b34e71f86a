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
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "obr/calibration.hpp"
#include "obr/errors.hpp"
#include "obr/linalg.hpp"
#include "obr/matrix.hpp"
#include "obr/rng.hpp"

namespace obr {

enum class ScoreMetric { magnitude, wanda, sparsegpt, random };

inline std::string to_string(ScoreMetric m) {
  switch (m) {
    case ScoreMetric::magnitude: return "magnitude";
    case ScoreMetric::wanda: return "wanda";
    case ScoreMetric::sparsegpt: return "sparsegpt";
    case ScoreMetric::random: return "random";
  }
  return "?";
}

inline ScoreMetric parse_metric(const std::string& s) {
  if (s == "magnitude") return ScoreMetric::magnitude;
  if (s == "wanda") return ScoreMetric::wanda;
  if (s == "sparsegpt") return ScoreMetric::sparsegpt;
  if (s == "random") return ScoreMetric::random;
  throw FormatError("unknown mask metric '" + s + "'");
}

/// Sparsity pattern: unstructured with a per-row ratio, or n:m semi-structured
/// (n zeros in every aligned group of m consecutive columns).
struct MaskPattern {
  enum class Kind { unstructured, nm };

  Kind kind = Kind::unstructured;
  double ratio = 0.0;     // unstructured only
  std::size_t n = 0;      // nm only
  std::size_t m = 0;      // nm only

  static MaskPattern unstructured(double ratio) {
    detail::require(ratio >= 0.0 && ratio <= 1.0,
                    "unstructured sparsity ratio must lie in [0, 1]");
    MaskPattern p;
    p.kind = Kind::unstructured;
    p.ratio = ratio;
    return p;
  }

  static MaskPattern nm(std::size_t n, std::size_t m) {
    detail::require(m >= 1 && n <= m, "n:m pattern requires n <= m, m >= 1");
    MaskPattern p;
    p.kind = Kind::nm;
    p.n = n;
    p.m = m;
    return p;
  }

  /// Accepts "unstructured:<ratio>", "2:4", "4:8" and the like.
  static MaskPattern parse(const std::string& s) {
    const auto colon = s.find(':');
    detail::require(colon != std::string::npos,
                    "cannot parse pattern '" + s + "'");
    const std::string head = s.substr(0, colon);
    const std::string tail = s.substr(colon + 1);
    try {
      if (head == "unstructured") return unstructured(std::stod(tail));
      return nm(static_cast<std::size_t>(std::stoul(head)),
                static_cast<std::size_t>(std::stoul(tail)));
    } catch (const std::logic_error&) {
      throw FormatError("cannot parse pattern '" + s + "'");
    }
  }

  std::string str() const {
    if (kind == Kind::unstructured) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "unstructured:%.17g", ratio);
      return buf;
    }
    return std::to_string(n) + ":" + std::to_string(m);
  }

  /// Zeros this pattern demands in one row of width c_in.
  std::size_t zeros_per_row(std::size_t c_in) const {
    if (kind == Kind::unstructured)
      return static_cast<std::size_t>(
          std::floor(ratio * static_cast<double>(c_in)));
    return c_in / m * n;
  }
};

/// Binary keep-mask (1 = keep, 0 = prune) with the pattern it satisfies and
/// the metric that scored it.
struct PruneMask {
  Matrix m;
  MaskPattern pattern;
  ScoreMetric metric = ScoreMetric::magnitude;
};

/// Saliency scores, higher = keep. magnitude: |w|. wanda: |w|*||x_j||.
/// sparsegpt: w^2 / diag(H^-1) (uses the damped Hessian, inverted once).
/// random: seed-derived uniforms.
inline Matrix prune_scores(const Matrix& w, const Hessian* hessian,
                           const ActivationStats* stats, ScoreMetric metric,
                           std::uint64_t seed = 0) {
  w.require_finite("weights");
  Matrix scores(w.rows(), w.cols());
  switch (metric) {
    case ScoreMetric::magnitude: {
      for (std::size_t i = 0; i < w.size(); ++i)
        scores.data()[i] = std::fabs(w.data()[i]);
      break;
    }
    case ScoreMetric::wanda: {
      detail::require(stats != nullptr,
                      "wanda metric requires activation stats");
      detail::require(stats->column_norms.size() == w.cols(),
                      "activation stats length does not match weight columns");
      for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j)
          scores(i, j) = std::fabs(w(i, j)) * stats->column_norms[j];
      break;
    }
    case ScoreMetric::sparsegpt: {
      detail::require(hessian != nullptr,
                      "sparsegpt metric requires a Hessian");
      detail::require(hessian->dim() == w.cols(),
                      "Hessian dim does not match weight columns");
      const Matrix inv = spd_inverse(hessian->h);
      for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j)
          scores(i, j) = w(i, j) * w(i, j) / inv(j, j);
      break;
    }
    case ScoreMetric::random: {
      Rng rng(seed);
      for (double& v : scores.data()) v = rng.uniform();
      break;
    }
  }
  return scores;
}

namespace detail {

// Keeps the `keep` highest-scoring indices of scores[lo, lo+width); ties keep
// the lower column index. Writes zeros into mask_row for the rest.
inline void keep_top(std::span<const double> scores_row, double* mask_row,
                     std::size_t lo, std::size_t width, std::size_t keep) {
  std::vector<std::size_t> idx(width);
  std::iota(idx.begin(), idx.end(), lo);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) {
                     return scores_row[a] > scores_row[b];
                   });
  for (std::size_t k = keep; k < width; ++k) mask_row[idx[k]] = 0.0;
}

}  // namespace detail

/// Builds the binary mask by per-row top-score retention. Unstructured
/// patterns zero exactly floor(ratio*c_in) entries per row; n:m patterns zero
/// exactly n entries in every aligned m-group (c_in must be divisible by m).
inline PruneMask build_mask(const Matrix& scores, const MaskPattern& pattern,
                            ScoreMetric metric = ScoreMetric::magnitude) {
  const std::size_t c_in = scores.cols();
  if (pattern.kind == MaskPattern::Kind::nm)
    detail::require(c_in % pattern.m == 0,
                    "n:m pattern needs C_in divisible by " +
                        std::to_string(pattern.m) + ", got C_in = " +
                        std::to_string(c_in));

  Matrix m(scores.rows(), c_in);
  for (double& v : m.data()) v = 1.0;

  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const auto srow = scores.row(i);
    double* mrow = m.row(i).data();
    if (pattern.kind == MaskPattern::Kind::unstructured) {
      const std::size_t zeros = pattern.zeros_per_row(c_in);
      detail::keep_top(srow, mrow, 0, c_in, c_in - zeros);
    } else {
      for (std::size_t g = 0; g < c_in; g += pattern.m)
        detail::keep_top(srow, mrow, g, pattern.m, pattern.m - pattern.n);
    }
  }
  return PruneMask{std::move(m), pattern, metric};
}

}  // namespace obr
