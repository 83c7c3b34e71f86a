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
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "obr/errors.hpp"
#include "obr/masking.hpp"
#include "obr/matrix.hpp"
#include "obr/quantizer.hpp"

namespace obr {

/// Quantitative summary of one compression run. Serialized with a fixed key
/// order so reports are stable byte-for-byte across reruns.
struct EvalReport {
  double rel_recon_error = 0.0;
  double frob_output_error = 0.0;
  double achieved_sparsity = 0.0;
  bool pattern_valid = true;
  double natural_zero_fraction = 0.0;
  std::vector<double> per_row_objectives;  // residual 1/2 dw H dw^T per row
  std::vector<std::pair<std::string, double>> baseline_deltas;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["rel_recon_error"] = rel_recon_error;
    j["frob_output_error"] = frob_output_error;
    j["achieved_sparsity"] = achieved_sparsity;
    j["pattern_valid"] = pattern_valid;
    j["natural_zero_fraction"] = natural_zero_fraction;
    j["per_row_objectives"] = per_row_objectives;
    nlohmann::ordered_json deltas = nlohmann::ordered_json::object();
    for (const auto& [name, ratio] : baseline_deltas) deltas[name] = ratio;
    j["baseline_deltas"] = std::move(deltas);
    return j;
  }

  std::string to_json_string() const { return to_json().dump(2) + "\n"; }
};

/// ||(w_hat - w_ref) x||_F / max(||w_ref x||_F, eps). Invariant under a
/// simultaneous orthogonal rotation of both weight arguments and x.
inline double reconstruction_error(const Matrix& w_ref,
                                   const Matrix& w_hat_dequant,
                                   const Matrix& x) {
  detail::require(w_ref.rows() == w_hat_dequant.rows() &&
                      w_ref.cols() == w_hat_dequant.cols(),
                  "reconstruction_error: weight shapes disagree");
  detail::require(w_ref.cols() == x.rows(),
                  "reconstruction_error: activation shape disagrees");
  const Matrix err = matmul(w_hat_dequant - w_ref, x);
  const Matrix ref = matmul(w_ref, x);
  return err.frobenius_norm() / std::max(ref.frobenius_norm(), 1e-30);
}

/// Exact-zero census. With an n:m pattern, every aligned group must hold at
/// least n zeros to stay hardware-valid (at most m-n nonzeros per group);
/// unstructured patterns require floor(ratio*c_in) zeros per row. Without a
/// pattern only the zero fraction is reported and validity is vacuous.
inline std::pair<double, bool> sparsity_audit(
    const Matrix& w, const std::optional<MaskPattern>& pattern) {
  std::size_t zeros = 0;
  for (double v : w.data()) zeros += (v == 0.0);
  const double achieved =
      w.size() == 0 ? 0.0
                    : static_cast<double>(zeros) / static_cast<double>(w.size());

  bool valid = true;
  if (pattern.has_value()) {
    if (pattern->kind == MaskPattern::Kind::nm) {
      if (w.cols() % pattern->m != 0) {
        valid = false;
      } else {
        for (std::size_t i = 0; i < w.rows() && valid; ++i) {
          const auto row = w.row(i);
          for (std::size_t g = 0; g < w.cols(); g += pattern->m) {
            std::size_t z = 0;
            for (std::size_t k = 0; k < pattern->m; ++k)
              z += (row[g + k] == 0.0);
            if (z < pattern->n) {
              valid = false;
              break;
            }
          }
        }
      }
    } else {
      const std::size_t need = pattern->zeros_per_row(w.cols());
      for (std::size_t i = 0; i < w.rows() && valid; ++i) {
        std::size_t z = 0;
        for (double v : w.row(i)) z += (v == 0.0);
        if (z < need) valid = false;
      }
    }
  }
  return {achieved, valid};
}

/// Fraction of quantized codes equal to zero: sparsity that appears without
/// any pruning step.
inline double natural_sparsity(const QuantizedMatrix& q) {
  if (q.codes.empty()) return 0.0;
  std::size_t zeros = 0;
  for (std::int8_t c : q.codes) zeros += (c == 0);
  return static_cast<double>(zeros) / static_cast<double>(q.codes.size());
}

}  // namespace obr
