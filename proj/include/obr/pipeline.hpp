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

// End-to-end compression of one weight matrix:
//
//   rotate -> score/mask -> per-row prune compensation
//          -> per-row quant compensation -> final quantize
//
// plus the pruning-only and quantization-only variants and a stacked-layer
// driver that propagates calibration activations. Row compensations run in
// parallel; the Hessian is shared read-only and rows write disjoint slots, so
// results are bitwise identical for any thread count.

#include <atomic>
#include <cstdio>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "obr/calibration.hpp"
#include "obr/compensation.hpp"
#include "obr/container.hpp"
#include "obr/errors.hpp"
#include "obr/evaluation.hpp"
#include "obr/masking.hpp"
#include "obr/matrix.hpp"
#include "obr/quantizer.hpp"
#include "obr/rotation.hpp"

namespace obr {

enum class PipelineMode { joint, prune_only, quant_only };
enum class Propagation { compressed, original };

inline std::string to_string(PipelineMode m) {
  switch (m) {
    case PipelineMode::joint: return "joint";
    case PipelineMode::prune_only: return "prune_only";
    case PipelineMode::quant_only: return "quant_only";
  }
  return "?";
}

inline PipelineMode parse_mode(const std::string& s) {
  if (s == "joint") return PipelineMode::joint;
  if (s == "prune_only") return PipelineMode::prune_only;
  if (s == "quant_only") return PipelineMode::quant_only;
  throw FormatError("unknown pipeline mode '" + s + "'");
}

inline std::string to_string(Propagation p) {
  return p == Propagation::compressed ? "compressed" : "original";
}

inline Propagation parse_propagation(const std::string& s) {
  if (s == "compressed") return Propagation::compressed;
  if (s == "original") return Propagation::original;
  throw FormatError("unknown propagation '" + s + "'");
}

inline std::string to_string(RotationKind k) {
  return k == RotationKind::none ? "none" : "hadamard";
}

inline RotationKind parse_rotation_kind(const std::string& s) {
  if (s == "none") return RotationKind::none;
  if (s == "hadamard") return RotationKind::hadamard;
  throw FormatError("unknown rotation kind '" + s + "'");
}

struct MaskConfig {
  ScoreMetric metric = ScoreMetric::wanda;
  MaskPattern pattern = MaskPattern::unstructured(0.5);
};

struct PipelineConfig {
  RotationSpec rotation;  // dim is filled from the weight matrix at run time
  MaskConfig mask;
  QuantizerSpec quantizer;
  double alpha = 0.5;
  double damp_ratio = kDefaultDampRatio;
  PipelineMode mode = PipelineMode::joint;
  Propagation propagate = Propagation::compressed;
  std::uint64_t seed = 0;

  /// When set, used verbatim instead of build_rotation (callers validate
  /// orthogonality on load). Not part of the JSON schema.
  std::optional<Matrix> custom_rotation;

  void validate() const {
    detail::require(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
    detail::require(damp_ratio >= 0.0, "damp_ratio must be >= 0");
    quantizer.validate();
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["rotation"]["kind"] = to_string(rotation.kind);
    j["rotation"]["seed"] = rotation.seed;
    j["mask"]["metric"] = to_string(mask.metric);
    j["mask"]["pattern"] = mask.pattern.str();
    j["quantizer"]["kind"] = to_string(quantizer.kind);
    j["quantizer"]["bits"] = quantizer.bits;
    j["alpha"] = alpha;
    j["damp_ratio"] = damp_ratio;
    j["mode"] = to_string(mode);
    j["propagate"] = to_string(propagate);
    j["seed"] = seed;
    return j;
  }

  static PipelineConfig from_json(const nlohmann::json& j) {
    PipelineConfig c;
    try {
      if (j.contains("rotation")) {
        c.rotation.kind = parse_rotation_kind(
            j["rotation"].value("kind", to_string(c.rotation.kind)));
        c.rotation.seed = j["rotation"].value("seed", c.rotation.seed);
      }
      if (j.contains("mask")) {
        c.mask.metric =
            parse_metric(j["mask"].value("metric", to_string(c.mask.metric)));
        if (j["mask"].contains("pattern"))
          c.mask.pattern =
              MaskPattern::parse(j["mask"]["pattern"].get<std::string>());
      }
      if (j.contains("quantizer")) {
        c.quantizer.kind = parse_quant_kind(
            j["quantizer"].value("kind", to_string(c.quantizer.kind)));
        c.quantizer.bits = j["quantizer"].value("bits", c.quantizer.bits);
      }
      c.alpha = j.value("alpha", c.alpha);
      c.damp_ratio = j.value("damp_ratio", c.damp_ratio);
      c.mode = parse_mode(j.value("mode", to_string(c.mode)));
      c.propagate =
          parse_propagation(j.value("propagate", to_string(c.propagate)));
      c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad pipeline config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

/// Output of one compression run. All weight-like members live in the rotated
/// basis; `rotation` holds the Q that was applied so callers can return to
/// the original basis.
struct CompressionResult {
  bool quantized = true;      // false in prune_only mode
  QuantizedMatrix w_hat;      // valid when quantized
  Matrix dense_weights;       // valid when !quantized (compensated sparse w)
  PruneMask mask;
  Matrix delta_prune;
  Matrix delta_quant;
  Matrix delta_obr;           // delta_prune + delta_quant
  std::vector<std::pair<double, double>> objectives;  // per row (before, after)
  Matrix rotation;
  EvalReport report;

  Matrix output_weights() const {
    return quantized ? w_hat.dequantized() : dense_weights;
  }
};

namespace detail {

template <typename F>
void parallel_rows(std::size_t n, std::size_t threads, F&& fn) {
  if (threads == 0) threads = std::thread::hardware_concurrency();
  if (threads == 0) threads = 1;
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

[[noreturn]] inline void rethrow_with_row(std::size_t row, const char* stage) {
  const std::string where =
      "row " + std::to_string(row) + ", stage " + stage + ": ";
  try {
    throw;
  } catch (const NumericError& e) {
    throw NumericError(where + e.what());
  } catch (const FormatError& e) {
    throw FormatError(where + e.what());
  } catch (const std::exception& e) {
    throw Error(where + e.what());
  }
}

inline Matrix resolve_rotation(const PipelineConfig& config, std::size_t dim) {
  if (config.custom_rotation.has_value()) {
    const Matrix& q = *config.custom_rotation;
    require(q.rows() == dim && q.cols() == dim,
            "custom rotation dim does not match weight columns");
    return q;
  }
  RotationSpec spec = config.rotation;
  spec.dim = dim;
  return build_rotation(spec);
}

inline double row_objective(const Hessian& hessian,
                            std::span<const double> dw) {
  const std::size_t n = hessian.dim();
  double acc = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    if (dw[a] == 0.0) continue;
    const auto hrow = hessian.h.row(a);
    double s = 0.0;
    for (std::size_t b = 0; b < n; ++b) s += hrow[b] * dw[b];
    acc += dw[a] * s;
  }
  return 0.5 * acc;
}

// Fills report fields common to every mode. `output` is the compressed
// weights in the rotated basis. rel_recon_error is measured in the rotated
// basis; frob_output_error against the unrotated reference product w*x (the
// two agree through the exact cancellation (wq)(q^T x) = w x).
inline EvalReport build_report(const Matrix& w, const Matrix& x,
                               const Matrix& w_rot, const Matrix& x_rot,
                               const Matrix& output, const Hessian& hessian,
                               const std::optional<MaskPattern>& pattern,
                               double natural_zero_fraction) {
  EvalReport rep;
  rep.rel_recon_error = reconstruction_error(w_rot, output, x_rot);
  rep.frob_output_error =
      (matmul(output, x_rot) - matmul(w, x)).frobenius_norm();
  const auto [achieved, valid] = sparsity_audit(output, pattern);
  rep.achieved_sparsity = achieved;
  rep.pattern_valid = valid;
  rep.natural_zero_fraction = natural_zero_fraction;
  rep.per_row_objectives.resize(w.rows());
  std::vector<double> dw(w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j)
      dw[j] = output(i, j) - w_rot(i, j);
    rep.per_row_objectives[i] = row_objective(hessian, dw);
  }
  return rep;
}

}  // namespace detail

/// Joint pruning + quantization with group error compensation. See the file
/// header for the stage order. The returned weights are in the rotated basis.
inline CompressionResult compress_matrix(const Matrix& w, const Matrix& x,
                                         const PipelineConfig& config,
                                         std::size_t threads = 0);

inline CompressionResult compress_prune_only(const Matrix& w, const Matrix& x,
                                             const PipelineConfig& config,
                                             std::size_t threads = 0);

inline CompressionResult compress_quant_only(const Matrix& w, const Matrix& x,
                                             const PipelineConfig& config,
                                             std::size_t threads = 0);

namespace detail {

inline CompressionResult compress_impl(const Matrix& w, const Matrix& x,
                                       const PipelineConfig& config,
                                       std::size_t threads) {
  config.validate();
  w.require_finite("weights");
  x.require_finite("activations");
  require(w.rows() >= 1 && w.cols() >= 1, "empty weight matrix");
  require(w.cols() == x.rows(),
          "weight columns (" + std::to_string(w.cols()) +
              ") do not match activation rows (" + std::to_string(x.rows()) +
              ")");

  const std::size_t c_out = w.rows();
  const std::size_t c_in = w.cols();
  const bool prune_stage = config.mode != PipelineMode::quant_only;
  const bool quant_stage = config.mode != PipelineMode::prune_only;

  CompressionResult res;
  res.rotation = resolve_rotation(config, c_in);
  auto [w_rot, x_rot] = rotate_pair(w, x, res.rotation);

  const Hessian hessian = build_hessian(x_rot, config.damp_ratio);
  const ActivationStats stats = activation_stats(x_rot);

  if (prune_stage) {
    const Matrix scores = prune_scores(w_rot, &hessian, &stats,
                                       config.mask.metric, config.seed);
    res.mask = build_mask(scores, config.mask.pattern, config.mask.metric);
  } else {
    Matrix ones(c_out, c_in);
    for (double& v : ones.data()) v = 1.0;
    res.mask = PruneMask{std::move(ones), MaskPattern::unstructured(0.0),
                         config.mask.metric};
  }

  res.delta_prune = Matrix(c_out, c_in);
  res.delta_quant = Matrix(c_out, c_in);
  res.objectives.assign(c_out, {0.0, 0.0});
  Matrix w_comp(c_out, c_in);  // compensated weights entering Step 3

  parallel_rows(c_out, threads, [&](std::size_t i) {
    const auto wrow = w_rot.row(i);
    const auto mrow = res.mask.m.row(i);
    std::vector<double> wbar(c_in, 0.0);
    std::vector<std::size_t> retained;
    retained.reserve(c_in);
    double before = 0.0, after = 0.0;

    if (prune_stage) {
      RowCompensation pc;
      try {
        pc = prune_compensation(wrow, mrow, hessian);
      } catch (...) {
        rethrow_with_row(i, "prune_compensation");
      }
      for (std::size_t j = 0; j < c_in; ++j) {
        if (mrow[j] != 0.0) {
          wbar[j] = wrow[j] + pc.delta[j];
          retained.push_back(j);
        }
        res.delta_prune(i, j) = pc.delta[j];
      }
      before += pc.objective_before;
      after += pc.objective_after;
    } else {
      for (std::size_t j = 0; j < c_in; ++j) {
        wbar[j] = wrow[j];
        retained.push_back(j);
      }
    }

    if (quant_stage) {
      RowCompensation qc;
      try {
        qc = quant_compensation(wbar, retained, config.alpha, hessian,
                                config.quantizer);
      } catch (...) {
        rethrow_with_row(i, "quant_compensation");
      }
      for (std::size_t j = 0; j < c_in; ++j) {
        wbar[j] += qc.delta[j];
        res.delta_quant(i, j) = qc.delta[j];
      }
      before += qc.objective_before;
      after += qc.objective_after;
    }

    for (std::size_t j = 0; j < c_in; ++j) w_comp(i, j) = wbar[j];
    res.objectives[i] = {before, after};
  });

  res.delta_obr = res.delta_prune + res.delta_quant;

  std::optional<MaskPattern> audit_pattern;
  if (prune_stage) audit_pattern = config.mask.pattern;

  if (quant_stage) {
    res.quantized = true;
    if (config.quantizer.kind == QuantKind::rtn) {
      res.w_hat = rtn_quantize(w_comp, config.quantizer);
    } else {
      res.w_hat = gptq_quantize(w_comp, hessian, config.quantizer,
                                prune_stage ? &res.mask : nullptr);
    }
    const Matrix output = res.w_hat.dequantized();
    res.report = build_report(w, x, w_rot, x_rot, output, hessian,
                              audit_pattern, natural_sparsity(res.w_hat));
  } else {
    res.quantized = false;
    res.dense_weights = w_comp;
    std::size_t zeros = 0;
    for (double v : w_comp.data()) zeros += (v == 0.0);
    const double zero_frac =
        static_cast<double>(zeros) / static_cast<double>(w_comp.size());
    res.report = build_report(w, x, w_rot, x_rot, w_comp, hessian,
                              audit_pattern, zero_frac);
  }
  return res;
}

}  // namespace detail

inline CompressionResult compress_matrix(const Matrix& w, const Matrix& x,
                                         const PipelineConfig& config,
                                         std::size_t threads) {
  switch (config.mode) {
    case PipelineMode::prune_only:
      return compress_prune_only(w, x, config, threads);
    case PipelineMode::quant_only:
      return compress_quant_only(w, x, config, threads);
    case PipelineMode::joint:
      break;
  }
  return detail::compress_impl(w, x, config, threads);
}

inline CompressionResult compress_prune_only(const Matrix& w, const Matrix& x,
                                             const PipelineConfig& config,
                                             std::size_t threads) {
  PipelineConfig c = config;
  c.mode = PipelineMode::prune_only;
  return detail::compress_impl(w, x, c, threads);
}

inline CompressionResult compress_quant_only(const Matrix& w, const Matrix& x,
                                             const PipelineConfig& config,
                                             std::size_t threads) {
  PipelineConfig c = config;
  c.mode = PipelineMode::quant_only;
  return detail::compress_impl(w, x, c, threads);
}

/// Compresses a stack of linear layers, feeding each layer the calibration
/// activations produced by the previous one: the compressed outputs
/// (propagate=compressed, the default) or the uncompressed ones
/// (propagate=original). Outputs are taken in the unrotated basis: each layer
/// applies and removes its own rotation pair. Layer rotations draw distinct
/// seeds (base seed + layer index).
inline std::vector<CompressionResult> compress_stack(
    const std::vector<Matrix>& layers, const Matrix& x0,
    const PipelineConfig& config, std::size_t threads = 0) {
  std::vector<CompressionResult> results;
  results.reserve(layers.size());
  Matrix x_cur = x0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Matrix& w = layers[i];
    detail::require(w.cols() == x_cur.rows(),
                    "layer " + std::to_string(i) +
                        ": input dim does not match previous layer output");
    PipelineConfig cfg = config;
    cfg.rotation.seed = config.rotation.seed + i;
    CompressionResult r = compress_matrix(w, x_cur, cfg, threads);

    if (i + 1 < layers.size()) {
      if (config.propagate == Propagation::compressed) {
        const Matrix d = r.output_weights();
        x_cur = matmul(d, matmul(r.rotation.transposed(), x_cur));
      } else {
        x_cur = matmul(w, x_cur);
      }
    }
    results.push_back(std::move(r));
  }
  return results;
}

/// Packs a result into the container layout consumed by the CLI: codes+scales
/// (or dense weights for prune-only), mask, both compensation matrices, and
/// the rotation that was applied.
inline TensorContainer result_to_container(const CompressionResult& r) {
  TensorContainer c;
  if (r.quantized) {
    c.add_i8_matrix("codes", r.w_hat.codes, r.w_hat.rows, r.w_hat.cols);
    c.add_vector("scales", r.w_hat.scales);
  } else {
    c.add_matrix("weights", r.dense_weights);
  }
  c.add_matrix("mask", r.mask.m, DType::i8);
  c.add_matrix("delta_prune", r.delta_prune);
  c.add_matrix("delta_quant", r.delta_quant);
  c.add_matrix("rotation", r.rotation);
  return c;
}

/// Report for an already-compressed output (rotated basis) against original
/// weights and calibration activations. Used by the eval CLI command.
inline EvalReport evaluate_output(const Matrix& w, const Matrix& x,
                                  const Matrix& rotation,
                                  const Matrix& output_rot, double damp_ratio,
                                  const std::optional<MaskPattern>& pattern,
                                  double natural_zero_fraction) {
  auto [w_rot, x_rot] = rotate_pair(w, x, rotation);
  const Hessian hessian = build_hessian(x_rot, damp_ratio);
  return detail::build_report(w, x, w_rot, x_rot, output_rot, hessian, pattern,
                              natural_zero_fraction);
}

/// Runs {no-compensation prune+quantize, OBR+RTN, OBR+GPTQ} on identical
/// inputs and seeds, and reports each variant's reconstruction error as a
/// ratio against the no-compensation baseline. Scalar report fields come from
/// the OBR+RTN run.
inline EvalReport compare_baselines(const Matrix& w, const Matrix& x,
                                    const PipelineConfig& config,
                                    std::size_t threads = 0) {
  PipelineConfig cfg = config;
  cfg.mode = PipelineMode::joint;

  // No-compensation baseline: identical rotation/mask, masked weights
  // straight into RTN.
  const Matrix q = detail::resolve_rotation(cfg, w.cols());
  auto [w_rot, x_rot] = rotate_pair(w, x, q);
  const Hessian hessian = build_hessian(x_rot, cfg.damp_ratio);
  const ActivationStats stats = activation_stats(x_rot);
  const Matrix scores =
      prune_scores(w_rot, &hessian, &stats, cfg.mask.metric, cfg.seed);
  const PruneMask mask = build_mask(scores, cfg.mask.pattern, cfg.mask.metric);
  Matrix w_masked = w_rot;
  for (std::size_t i = 0; i < w_masked.size(); ++i)
    w_masked.data()[i] *= mask.m.data()[i];
  QuantizerSpec rtn_spec = cfg.quantizer;
  rtn_spec.kind = QuantKind::rtn;
  const double base_err = reconstruction_error(
      w_rot, rtn_quantize(w_masked, rtn_spec).dequantized(), x_rot);

  PipelineConfig cfg_rtn = cfg;
  cfg_rtn.quantizer.kind = QuantKind::rtn;
  PipelineConfig cfg_gptq = cfg;
  cfg_gptq.quantizer.kind = QuantKind::gptq;
  const CompressionResult r_rtn = compress_matrix(w, x, cfg_rtn, threads);
  const CompressionResult r_gptq = compress_matrix(w, x, cfg_gptq, threads);

  const double denom = std::max(base_err, 1e-30);
  EvalReport rep = r_rtn.report;
  rep.baseline_deltas = {
      {"no_compensation", 1.0},
      {"obr_rtn", r_rtn.report.rel_recon_error / denom},
      {"obr_gptq", r_gptq.report.rel_recon_error / denom},
  };
  return rep;
}

}  // namespace obr
