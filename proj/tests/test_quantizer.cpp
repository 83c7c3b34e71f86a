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

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "obr/quantizer.hpp"
#include "oracle.hpp"

using Catch::Approx;

namespace {

const obr::QuantizerSpec kRtn4{4, obr::QuantKind::rtn, true};

double gptq_objective(const obr::Matrix& w, const obr::QuantizedMatrix& q,
                      const obr::Hessian& h) {
  double total = 0.0;
  std::vector<double> dw(w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j)
      dw[j] = q.dequant(i, j) - w(i, j);
    total += oracle::quadratic_objective(h.h, dw);
  }
  return total;
}

}  // namespace

TEST_CASE("rtn leaves on-grid rows untouched") {
  const obr::Matrix w(1, 3, {7.0, -7.0, 1.0});
  const obr::QuantizedMatrix q = obr::rtn_quantize(w, kRtn4);
  CHECK(q.scales[0] == 1.0);
  CHECK(q.code(0, 0) == 7);
  CHECK(q.code(0, 1) == -7);
  CHECK(q.code(0, 2) == 1);
}

TEST_CASE("rtn rounds half away from zero") {
  const obr::Matrix w(1, 3, {1.0, 0.5, 0.0});
  const obr::QuantizedMatrix q = obr::rtn_quantize(w, kRtn4);
  CHECK(q.scales[0] == Approx(1.0 / 7.0));
  CHECK(q.code(0, 0) == 7);
  CHECK(q.code(0, 1) == 4);  // 0.5/(1/7) = 3.5 rounds away from zero
  CHECK(q.code(0, 2) == 0);
}

TEST_CASE("all-zero rows quantize to zero with unit scale") {
  const obr::Matrix w(2, 3);
  const obr::QuantizedMatrix q = obr::rtn_quantize(w, kRtn4);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(q.scales[i] == 1.0);
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(q.code(i, j) == 0);
      CHECK(q.dequant(i, j) == 0.0);
    }
  }
}

TEST_CASE("quant_error of on-grid input is zero") {
  const obr::Matrix w(1, 3, {7.0, -7.0, 1.0});
  const obr::Matrix e = obr::quant_error(w, kRtn4);
  for (double v : e.data()) CHECK(v == 0.0);
}

TEST_CASE("quant_error matches the hand computation") {
  const obr::Matrix w(1, 3, {1.0, 0.5, 0.0});
  const obr::Matrix e = obr::quant_error(w, kRtn4);
  CHECK(e(0, 0) == Approx(0.0).margin(1e-15));
  CHECK(e(0, 1) == Approx(0.5 - 4.0 / 7.0));
  CHECK(e(0, 2) == 0.0);
}

TEST_CASE("rtn error is bounded by half a grid step") {
  obr::Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    obr::Matrix w(4, 16);
    for (double& v : w.data()) v = 3.0 * rng.normal();
    const obr::QuantizedMatrix q = obr::rtn_quantize(w, kRtn4);
    const obr::Matrix e = obr::quant_error(w, kRtn4);
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = 0; j < w.cols(); ++j)
        CHECK(std::fabs(e(i, j)) <= q.scales[i] / 2.0 + 1e-15);
  }
}

TEST_CASE("codes stay inside the restricted range for every bit width") {
  obr::Rng rng(3);
  obr::Matrix w(4, 32);
  for (double& v : w.data()) v = 10.0 * rng.normal();
  for (int bits = 2; bits <= 8; ++bits) {
    const obr::QuantizerSpec spec{bits, obr::QuantKind::rtn, true};
    const obr::QuantizedMatrix q = obr::rtn_quantize(w, spec);
    const int qmax = spec.qmax();
    for (std::int8_t c : q.codes) {
      CHECK(c >= -qmax);
      CHECK(c <= qmax);
    }
  }
}

TEST_CASE("rtn is scale equivariant") {
  obr::Rng rng(4);
  obr::Matrix w(3, 8);
  for (double& v : w.data()) v = rng.normal();
  const obr::QuantizedMatrix q1 = obr::rtn_quantize(w, kRtn4);
  const obr::QuantizedMatrix q2 = obr::rtn_quantize(4.0 * w, kRtn4);
  CHECK(q1.codes == q2.codes);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(q2.scales[i] == Approx(4.0 * q1.scales[i]));
}

TEST_CASE("gptq with a diagonal Hessian is bitwise rtn") {
  obr::Rng rng(5);
  obr::Matrix w(6, 12);
  for (double& v : w.data()) v = rng.normal();
  obr::Matrix h(12, 12);
  for (std::size_t j = 0; j < 12; ++j) h(j, j) = 0.5 + rng.uniform();
  const obr::Hessian hess{h, 0.0, 12};

  const obr::QuantizedMatrix qg = obr::gptq_quantize(w, hess, kRtn4);
  const obr::QuantizedMatrix qr = obr::rtn_quantize(w, kRtn4);
  CHECK(qg.codes == qr.codes);
  CHECK(qg.scales == qr.scales);
}

TEST_CASE("gptq with the identity Hessian is bitwise rtn") {
  obr::Rng rng(6);
  obr::Matrix w(4, 8);
  for (double& v : w.data()) v = rng.normal();
  const obr::Hessian hess{obr::Matrix::identity(8), 0.0, 8};
  const obr::QuantizedMatrix qg = obr::gptq_quantize(w, hess, kRtn4);
  const obr::QuantizedMatrix qr = obr::rtn_quantize(w, kRtn4);
  CHECK(qg.codes == qr.codes);
  CHECK(qg.scales == qr.scales);
}

TEST_CASE("each gptq step matches the closed-form compensation") {
  // Quantizing column j and updating the not-yet-visited columns must equal
  // solve_compensation with eviction {j} over the remaining index set.
  const std::size_t n = 6;
  const obr::Hessian hess = oracle::random_hessian(n, 77);
  obr::Rng rng(8);
  obr::Matrix w(1, n);
  for (double& v : w.data()) v = rng.normal();

  const obr::QuantizerSpec spec = kRtn4;
  const double scale = obr::rtn_row_scale(w.row(0), spec.qmax());

  // Reference: sequential single-eviction compensations on the trailing sets.
  std::vector<double> ref(w.row(0).begin(), w.row(0).end());
  for (std::size_t j = 0; j < n; ++j) {
    const double dq =
        static_cast<double>(obr::rtn_code(ref[j], scale, spec.qmax())) * scale;
    obr::RowPartition part;
    part.evict = {j};
    for (std::size_t k = j + 1; k < n; ++k) part.retain.push_back(k);
    const std::vector<double> e = {dq - ref[j]};
    const obr::RowCompensation comp =
        obr::solve_compensation(hess, part, e);
    ref[j] = dq;
    for (std::size_t k = j + 1; k < n; ++k) ref[k] += comp.delta[k];
  }

  const obr::QuantizedMatrix q = obr::gptq_quantize(w, hess, spec);
  for (std::size_t j = 0; j < n; ++j)
    CHECK(q.dequant(0, j) == Approx(ref[j]).margin(1e-9));
}

TEST_CASE("gptq beats rtn on the row objective for correlated Hessians") {
  std::size_t wins = 0;
  std::vector<double> ratios;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const obr::Hessian hess = oracle::random_hessian(8, 300 + seed);
    obr::Rng rng(900 + seed);
    obr::Matrix w(8, 8);
    for (double& v : w.data()) v = rng.normal();

    const double og = gptq_objective(w, obr::gptq_quantize(w, hess, kRtn4),
                                     hess);
    const double orr = gptq_objective(w, obr::rtn_quantize(w, kRtn4), hess);
    if (og <= orr) ++wins;
    ratios.push_back(og / orr);
  }
  std::sort(ratios.begin(), ratios.end());
  CHECK(wins >= 40);                 // >= 80% of 50 trials
  CHECK(ratios[25] <= 1.0);          // and in the median
}

TEST_CASE("gptq freezes masked entries to code zero") {
  obr::Rng rng(10);
  const std::size_t n = 8;
  obr::Matrix w(4, n);
  for (double& v : w.data()) v = rng.normal();
  // Zero out column 3 and freeze it.
  obr::Matrix mask(4, n);
  for (double& v : mask.data()) v = 1.0;
  for (std::size_t i = 0; i < 4; ++i) {
    w(i, 3) = 0.0;
    mask(i, 3) = 0.0;
  }
  const obr::PruneMask frozen{mask, obr::MaskPattern::unstructured(0.0),
                              obr::ScoreMetric::magnitude};
  const obr::Hessian hess = oracle::random_hessian(n, 55);
  const obr::QuantizedMatrix q = obr::gptq_quantize(w, hess, kRtn4, &frozen);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(q.code(i, 3) == 0);
    CHECK(q.dequant(i, 3) == 0.0);
  }
}

TEST_CASE("dequantized values lie on the row grid") {
  obr::Rng rng(11);
  obr::Matrix w(3, 10);
  for (double& v : w.data()) v = rng.normal();
  const obr::QuantizedMatrix q = obr::rtn_quantize(w, kRtn4);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 10; ++j) {
      const int k = q.code(i, j);
      CHECK(std::abs(k) <= 7);
      CHECK(q.dequant(i, j) == static_cast<double>(k) * q.scales[i]);
    }
}

TEST_CASE("quantizer spec validation") {
  CHECK_THROWS_AS(obr::rtn_quantize(obr::Matrix(1, 1),
                                    obr::QuantizerSpec{1, obr::QuantKind::rtn,
                                                       true}),
                  obr::FormatError);
  CHECK_THROWS_AS(obr::rtn_quantize(obr::Matrix(1, 1),
                                    obr::QuantizerSpec{9, obr::QuantKind::rtn,
                                                       true}),
                  obr::FormatError);
}
