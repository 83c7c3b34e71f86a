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

// obr: joint pruning + quantization of dense weight matrices with
// Hessian-based error compensation.
//
// Exit codes: 0 success, 2 bad flags, 3 I/O or format errors, 4 numerical
// failures.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "obr/obr.hpp"

namespace {

constexpr double kRotationLoadTolerance = 1e-6;

struct CompressArgs {
  std::string weights_path;
  std::string calib_path;
  std::string output_path;
  std::string report_path;
  std::string config_path;
  double sparsity = 0.5;
  std::string pattern;
  std::string mask_metric = "wanda";
  std::string quantizer = "rtn";
  int bits = 4;
  double alpha = 0.5;
  std::string rotate = "hadamard";
  double damp = obr::kDefaultDampRatio;
  std::string mode = "joint";
  std::uint64_t seed = 0;
  std::size_t threads = 0;
};

struct EvalArgs {
  std::string weights_path;
  std::string compressed_path;
  std::string calib_path;
  std::string output_path;
  std::string pattern;
  double damp = obr::kDefaultDampRatio;
};

struct GenCalibArgs {
  std::size_t cin = 0;
  std::size_t samples = 0;
  double correlation = 0.0;
  std::uint64_t seed = 0;
  std::string output_path;
};

obr::Matrix load_entry_matrix(const std::string& path,
                              const std::string& entry) {
  const obr::TensorContainer c = obr::read_container(path);
  if (!c.has(entry)) {
    std::string names;
    for (const auto& e : c.entries()) names += " '" + e.name + "'";
    throw obr::FormatError("'" + path + "' has no entry named '" + entry +
                           "' (found:" + names + ")");
  }
  return c.matrix_at(entry);
}

// Picks up a user-supplied rotation stored next to the weights, if any.
std::optional<obr::Matrix> load_custom_rotation(const std::string& path) {
  const obr::TensorContainer c = obr::read_container(path);
  if (!c.has("rotation")) return std::nullopt;
  obr::Matrix q = c.matrix_at("rotation");
  const double defect = obr::orthogonality_defect(q);
  if (defect > kRotationLoadTolerance)
    throw obr::FormatError("entry 'rotation' in '" + path +
                           "' is not orthogonal (defect " +
                           std::to_string(defect) + ")");
  return q;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw obr::IoError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw obr::IoError("short write to '" + path + "'");
}

obr::PipelineConfig config_from_args(const CompressArgs& a,
                                     bool any_flag_set) {
  obr::PipelineConfig cfg;
  if (!a.config_path.empty()) {
    if (any_flag_set)
      std::cerr << "warning: --config overrides individual compression flags"
                << std::endl;
    std::ifstream f(a.config_path);
    if (!f)
      throw obr::IoError("cannot open config '" + a.config_path + "'");
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw obr::FormatError("config '" + a.config_path +
                             "' is not valid JSON: " + e.what());
    }
    cfg = obr::PipelineConfig::from_json(j);
  } else {
    cfg.rotation.kind = obr::parse_rotation_kind(a.rotate);
    cfg.rotation.seed = a.seed;
    cfg.mask.metric = obr::parse_metric(a.mask_metric);
    cfg.mask.pattern = a.pattern.empty()
                           ? obr::MaskPattern::unstructured(a.sparsity)
                           : obr::MaskPattern::parse(a.pattern);
    cfg.quantizer.kind = obr::parse_quant_kind(a.quantizer);
    cfg.quantizer.bits = a.bits;
    cfg.alpha = a.alpha;
    cfg.damp_ratio = a.damp;
    cfg.mode = obr::parse_mode(a.mode);
    cfg.seed = a.seed;
    cfg.validate();
  }
  return cfg;
}

int run_compress(const CompressArgs& a, bool any_flag_set) {
  obr::PipelineConfig cfg = config_from_args(a, any_flag_set);
  const obr::Matrix w = load_entry_matrix(a.weights_path, "weights");
  const obr::Matrix x = load_entry_matrix(a.calib_path, "calib");
  cfg.custom_rotation = load_custom_rotation(a.weights_path);

  const obr::CompressionResult res =
      obr::compress_matrix(w, x, cfg, a.threads);

  obr::write_container(obr::result_to_container(res), a.output_path);
  if (!a.report_path.empty())
    write_text_file(a.report_path, res.report.to_json_string());
  return 0;
}

int run_eval(const EvalArgs& a) {
  const obr::Matrix w = load_entry_matrix(a.weights_path, "weights");
  const obr::Matrix x = load_entry_matrix(a.calib_path, "calib");
  const obr::TensorContainer comp = obr::read_container(a.compressed_path);

  obr::Matrix output;
  double natural = 0.0;
  if (comp.has("codes")) {
    const obr::TensorEntry& ce = comp.at("codes");
    obr::detail::require(ce.shape.size() == 2, "entry 'codes' is not 2-D");
    obr::QuantizedMatrix q;
    q.rows = static_cast<std::size_t>(ce.shape[0]);
    q.cols = static_cast<std::size_t>(ce.shape[1]);
    q.codes = comp.i8_at("codes");
    q.scales = comp.vector_at("scales");
    obr::detail::require(q.scales.size() == q.rows,
                         "'scales' length does not match codes rows");
    output = q.dequantized();
    natural = obr::natural_sparsity(q);
  } else if (comp.has("weights")) {
    output = comp.matrix_at("weights");
    std::size_t zeros = 0;
    for (double v : output.data()) zeros += (v == 0.0);
    natural = output.empty() ? 0.0
                             : static_cast<double>(zeros) /
                                   static_cast<double>(output.size());
  } else {
    throw obr::FormatError("'" + a.compressed_path +
                           "' has neither 'codes' nor 'weights'");
  }

  obr::Matrix rotation = comp.has("rotation")
                             ? comp.matrix_at("rotation")
                             : obr::Matrix::identity(w.cols());
  std::optional<obr::MaskPattern> pattern;
  if (!a.pattern.empty()) pattern = obr::MaskPattern::parse(a.pattern);

  const obr::EvalReport rep = obr::evaluate_output(
      w, x, rotation, output, a.damp, pattern, natural);
  const std::string text = rep.to_json_string();
  if (a.output_path.empty())
    std::cout << text;
  else
    write_text_file(a.output_path, text);
  return 0;
}

int run_gen_calib(const GenCalibArgs& a) {
  const obr::Matrix x =
      obr::gen_calibration(a.cin, a.samples, a.correlation, a.seed);
  obr::TensorContainer c;
  c.add_matrix("calib", x);
  obr::write_container(c, a.output_path);
  return 0;
}

int run_inspect(const std::string& path) {
  const obr::TensorContainer c = obr::read_container(path);
  std::printf("%s: %zu entries\n", path.c_str(), c.entries().size());
  for (const auto& e : c.entries()) {
    std::string shape = "[";
    for (std::size_t i = 0; i < e.shape.size(); ++i)
      shape += (i ? ", " : "") + std::to_string(e.shape[i]);
    shape += "]";
    std::size_t zeros = 0;
    const std::uint64_t n = e.element_count();
    if (e.dtype == obr::DType::i8) {
      for (std::uint8_t b : e.payload)
        zeros += (static_cast<std::int8_t>(b) == 0);
    } else {
      const std::size_t step = obr::dtype_size(e.dtype);
      for (std::size_t i = 0; i + step <= e.payload.size(); i += step) {
        if (e.dtype == obr::DType::f64) {
          double v;
          std::memcpy(&v, e.payload.data() + i, 8);
          zeros += (v == 0.0);
        } else {
          float v;
          std::memcpy(&v, e.payload.data() + i, 4);
          zeros += (v == 0.0f);
        }
      }
    }
    const double frac = n == 0 ? 0.0
                               : 100.0 * static_cast<double>(zeros) /
                                     static_cast<double>(n);
    std::printf("  %-14s %-4s %-16s zeros %.1f%%\n", e.name.c_str(),
                obr::dtype_name(e.dtype).c_str(), shape.c_str(), frac);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"joint pruning + quantization with Hessian error compensation"};
  app.require_subcommand(1);

  CompressArgs ca;
  EvalArgs ea;
  GenCalibArgs ga;
  std::string inspect_path;

  CLI::App* compress = app.add_subcommand(
      "compress", "compress a weight matrix (rotate, prune, compensate, "
                  "quantize) and write an OBRT container");
  compress->add_option("--weights", ca.weights_path,
                       "OBRT container with entry 'weights'")
      ->required();
  compress->add_option("--calib", ca.calib_path,
                       "OBRT container with entry 'calib'")
      ->required();
  compress->add_option("--output", ca.output_path, "output container path")
      ->required();
  compress->add_option("--report", ca.report_path, "write a JSON report here");
  compress->add_option("--config", ca.config_path,
                       "JSON pipeline config; overrides individual flags");
  auto* f_sparsity =
      compress->add_option("--sparsity", ca.sparsity,
                           "unstructured sparsity ratio in [0, 1]")
          ->check(CLI::Range(0.0, 1.0));
  auto* f_pattern =
      compress->add_option("--pattern", ca.pattern,
                           "sparsity pattern: unstructured:<ratio>, 2:4, 4:8")
          ->check([](const std::string& s) -> std::string {
            try {
              obr::MaskPattern::parse(s);
              return {};
            } catch (const obr::Error& e) {
              return e.what();
            }
          });
  auto* f_metric =
      compress->add_option("--mask-metric", ca.mask_metric, "pruning score")
          ->check(CLI::IsMember({"magnitude", "wanda", "sparsegpt", "random"}));
  auto* f_quant =
      compress->add_option("--quantizer", ca.quantizer, "weight quantizer")
          ->check(CLI::IsMember({"rtn", "gptq"}));
  auto* f_bits = compress->add_option("--bits", ca.bits, "quantizer bits")
                     ->check(CLI::Range(2, 8));
  auto* f_alpha =
      compress->add_option("--alpha", ca.alpha,
                           "fraction of retained slots whose quant error is "
                           "evicted onto the rest")
          ->check(CLI::Range(0.0, 1.0));
  auto* f_rotate = compress->add_option("--rotate", ca.rotate, "rotation kind")
                       ->check(CLI::IsMember({"none", "hadamard"}));
  auto* f_damp = compress->add_option("--damp", ca.damp,
                                      "Hessian damping ratio (of mean diag)");
  auto* f_mode =
      compress->add_option("--mode", ca.mode, "pipeline mode")
          ->check(CLI::IsMember({"joint", "prune_only", "quant_only"}));
  auto* f_seed = compress->add_option("--seed", ca.seed, "global random seed");
  compress->add_option("--threads", ca.threads,
                       "worker cap for per-row solves (0 = auto)");

  CLI::App* eval = app.add_subcommand(
      "eval", "report reconstruction metrics for a compressed container");
  eval->add_option("--weights", ea.weights_path, "original weights container")
      ->required();
  eval->add_option("--compressed", ea.compressed_path,
                   "compressed container from `compress`")
      ->required();
  eval->add_option("--calib", ea.calib_path, "calibration container")
      ->required();
  eval->add_option("--output", ea.output_path,
                   "write the JSON report here instead of stdout");
  eval->add_option("--pattern", ea.pattern,
                   "validate this sparsity pattern in the audit");
  eval->add_option("--damp", ea.damp, "Hessian damping ratio");

  CLI::App* gen = app.add_subcommand(
      "gen-calib", "generate synthetic correlated calibration activations");
  gen->add_option("--cin", ga.cin, "number of input channels")->required();
  gen->add_option("--samples", ga.samples, "number of samples")->required();
  gen->add_option("--correlation", ga.correlation,
                  "pairwise channel correlation in [0, 1)");
  gen->add_option("--seed", ga.seed, "random seed");
  gen->add_option("--output", ga.output_path, "output container path")
      ->required();

  CLI::App* inspect =
      app.add_subcommand("inspect", "list the entries of an OBRT container");
  inspect->add_option("--input", inspect_path, "container path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 2;
  }

  const bool any_flag_set =
      f_sparsity->count() || f_pattern->count() || f_metric->count() ||
      f_quant->count() || f_bits->count() || f_alpha->count() ||
      f_rotate->count() || f_damp->count() || f_mode->count() ||
      f_seed->count();

  try {
    if (compress->parsed()) return run_compress(ca, any_flag_set);
    if (eval->parsed()) return run_eval(ea);
    if (gen->parsed()) return run_gen_calib(ga);
    if (inspect->parsed()) return run_inspect(inspect_path);
  } catch (const obr::NumericError& e) {
    std::cerr << "numerical error: " << e.what() << std::endl;
    return 4;
  } catch (const obr::Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  }
  return 0;
}
