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

#include "obr/calibration.hpp"
#include "obr/linalg.hpp"
#include "oracle.hpp"

using Catch::Approx;

TEST_CASE("hessian of the identity activations") {
  const obr::Hessian h = obr::build_hessian(obr::Matrix::identity(2), 0.0);
  CHECK(h.h(0, 0) == Approx(2.0));
  CHECK(h.h(1, 1) == Approx(2.0));
  CHECK(h.h(0, 1) == 0.0);
  CHECK(h.damp_lambda == 0.0);
  CHECK(h.source_samples == 2);
}

TEST_CASE("hessian damping uses the mean diagonal") {
  // x = [[1],[1]]: 2xx^T = [[2,2],[2,2]], lambda = 0.01 * 2 = 0.02.
  const obr::Matrix x(2, 1, {1.0, 1.0});
  const obr::Hessian h = obr::build_hessian(x, 0.01);
  CHECK(h.damp_lambda == Approx(0.02));
  CHECK(h.h(0, 0) == Approx(2.02));
  CHECK(h.h(0, 1) == Approx(2.0));
  CHECK(h.h(1, 0) == Approx(2.0));
  CHECK(h.h(1, 1) == Approx(2.02));
  obr::Matrix l;
  CHECK(obr::cholesky_factor(h.h, l));
}

TEST_CASE("rank deficient activations escalate damping until PD") {
  // Channel 1 duplicates channel 0 and channel 2 is silent: 2xx^T is
  // singular, so damp_ratio 0 must take the escalation path.
  obr::Matrix x(3, 8);
  obr::Rng rng(3);
  for (std::size_t l = 0; l < 8; ++l) {
    const double v = rng.normal();
    x(0, l) = v;
    x(1, l) = v;
    x(2, l) = 0.0;
  }
  const obr::Hessian h = obr::build_hessian(x, 0.0);
  CHECK(h.damp_lambda > 0.0);
  obr::Matrix l;
  CHECK(obr::cholesky_factor(h.h, l));
}

TEST_CASE("build_hessian rejects non-finite input") {
  obr::Matrix x(1, 2, {1.0, std::nan("")});
  CHECK_THROWS_AS(obr::build_hessian(x, 0.01), obr::NumericError);
}

TEST_CASE("hessian is exactly symmetric") {
  const obr::Matrix x = obr::gen_calibration(12, 64, 0.4, 11);
  const obr::Hessian h = obr::build_hessian(x, 0.01);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 12; ++j)
      CHECK(h.h(i, j) == h.h(j, i));
}

TEST_CASE("activation stats basics") {
  const obr::ActivationStats s1 =
      obr::activation_stats(obr::Matrix::identity(3));
  CHECK(s1.column_norms == std::vector<double>{1.0, 1.0, 1.0});

  const obr::ActivationStats s2 =
      obr::activation_stats(obr::Matrix(2, 2, {3.0, 4.0, 0.0, 0.0}));
  CHECK(s2.column_norms[0] == Approx(5.0));
  CHECK(s2.column_norms[1] == 0.0);
}

TEST_CASE("squared norms equal the Gram diagonal") {
  const obr::Matrix x = obr::gen_calibration(6, 40, 0.2, 5);
  const obr::ActivationStats s = obr::activation_stats(x);
  const obr::Matrix gram = matmul(x, x.transposed());
  for (std::size_t j = 0; j < 6; ++j)
    CHECK(s.column_norms[j] * s.column_norms[j] ==
          Approx(gram(j, j)).epsilon(1e-12));
}

TEST_CASE("gen_calibration uncorrelated channels") {
  const std::size_t n = 4, L = 1000;
  const obr::Matrix x = obr::gen_calibration(n, L, 0.0, 99);
  const obr::Matrix cov = (1.0 / static_cast<double>(L)) *
                          matmul(x, x.transposed());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) CHECK(std::fabs(cov(i, j)) < 0.1);
}

TEST_CASE("gen_calibration correlated channels") {
  const std::size_t n = 4, L = 1000;
  const obr::Matrix x = obr::gen_calibration(n, L, 0.8, 99);
  const obr::Matrix cov = (1.0 / static_cast<double>(L)) *
                          matmul(x, x.transposed());
  double mean_corr = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      mean_corr += cov(i, j) / std::sqrt(cov(i, i) * cov(j, j));
      ++pairs;
    }
  mean_corr /= static_cast<double>(pairs);
  CHECK(mean_corr > 0.7);
  CHECK(mean_corr < 0.9);
}

TEST_CASE("gen_calibration is deterministic in the seed") {
  const obr::Matrix a = obr::gen_calibration(5, 17, 0.3, 123);
  const obr::Matrix b = obr::gen_calibration(5, 17, 0.3, 123);
  const obr::Matrix c = obr::gen_calibration(5, 17, 0.3, 124);
  CHECK(a == b);
  CHECK_FALSE(a == c);
}

TEST_CASE("undamped quadratic form equals squared output error") {
  // 1/2 dw (2xx^T) dw^T == ||dw x||^2 for any dw.
  obr::Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3 + rng.next_u64() % 10;
    const obr::Matrix x = obr::gen_calibration(n, 4 * n, 0.5, 100 + trial);
    const obr::Hessian h = obr::build_hessian(x, 0.0);
    const std::vector<double> dw = oracle::random_vector(n, rng);

    const double lhs = oracle::quadratic_objective(h.h, dw);
    double rhs = 0.0;
    for (std::size_t l = 0; l < x.cols(); ++l) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += dw[j] * x(j, l);
      rhs += s * s;
    }
    CHECK(lhs == Approx(rhs).epsilon(1e-9));
  }
}
