#include <cmath>
#include <random>

#include "doctest.h"
#include "dtq/balance.hpp"
#include "dtq/quant.hpp"

using namespace dtq;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                     double scale = 1.0) {
  Matrix m(rows, cols);
  std::normal_distribution<double> dist(0.0, scale);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

double rel_deviation(const Matrix& a, const Matrix& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a.data()[i] - b.data()[i]));
    den = std::max(den, std::abs(b.data()[i]));
  }
  return num / (1.0 + den);
}

} // namespace

TEST_CASE("scaling mask follows the alpha formula") {
  const ScalingMask m = compute_scaling_mask({4.0}, {1.0}, 0.5);
  CHECK(m.s[0] == doctest::Approx(2.0));

  // alpha = 0 ignores the activation statistic entirely
  const ScalingMask m0 = compute_scaling_mask({123.0}, {1.0}, 0.0);
  CHECK(m0.s[0] == doctest::Approx(1.0));

  const ScalingMask m8 = compute_scaling_mask({10.0, 0.1}, {1.0, 1.0}, 0.8);
  CHECK(m8.s[0] == doctest::Approx(std::pow(10.0, 0.8)));
  CHECK(m8.s[1] == doctest::Approx(std::pow(0.1, 0.8)));
}

TEST_CASE("scaling mask handles zero statistics and clamps extremes") {
  const ScalingMask m = compute_scaling_mask({0.0, 1e30}, {1.0, 1e-30}, 0.5);
  CHECK(m.s[0] == 1.0);   // dead channel left alone
  CHECK(m.s[1] == 1e5);   // clamped
  CHECK_THROWS(compute_scaling_mask({1.0}, {1.0, 2.0}, 0.5));
  CHECK_THROWS(compute_scaling_mask({1.0}, {1.0}, 1.5));
}

TEST_CASE("identity mask leaves X and W unchanged") {
  std::mt19937_64 rng(1);
  const Matrix x = random_matrix(3, 4, rng);
  const Matrix w = random_matrix(2, 4, rng);
  ScalingMask m{{1.0, 1.0, 1.0, 1.0}, 0.5};
  const auto [xs, ws] = apply_scaling(x, w, m);
  CHECK(xs == x);
  CHECK(ws == w);
}

TEST_CASE("uniform scale halves X and doubles W, preserving the product") {
  std::mt19937_64 rng(2);
  const Matrix x = random_matrix(4, 4, rng);
  const Matrix w = random_matrix(4, 4, rng);
  ScalingMask m{{2.0, 2.0, 2.0, 2.0}, 0.5};
  const auto [xs, ws] = apply_scaling(x, w, m);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(xs.data()[i] == doctest::Approx(x.data()[i] / 2.0));
    CHECK(ws.data()[i] == doctest::Approx(w.data()[i] * 2.0));
  }
  CHECK(rel_deviation(matmul_nt(xs, ws), matmul_nt(x, w)) <= 1e-5);
}

TEST_CASE("scaling invariance on random inputs") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix x = random_matrix(5, 8, rng, 2.0);
    const Matrix w = random_matrix(3, 8, rng);
    std::vector<double> act = col_absmax(x), wmax = col_absmax(w);
    const ScalingMask m = compute_scaling_mask(act, wmax, 0.5);
    const auto [xs, ws] = apply_scaling(x, w, m);
    CHECK(rel_deviation(matmul_nt(xs, ws), matmul_nt(x, w)) <= 1e-5);
  }
}

TEST_CASE("n=2 Hadamard is the normalized Sylvester block") {
  const RotationMatrix h = hadamard_matrix(2, false, 0);
  const Matrix d = h.dense();
  const double r = 1.0 / std::sqrt(2.0);
  CHECK(d(0, 0) == doctest::Approx(r));
  CHECK(d(0, 1) == doctest::Approx(r));
  CHECK(d(1, 0) == doctest::Approx(r));
  CHECK(d(1, 1) == doctest::Approx(-r));
}

TEST_CASE("Hadamard rejects non-power-of-two sizes") {
  CHECK_THROWS(hadamard_matrix(3, false, 0));
  CHECK_THROWS(hadamard_matrix(0, false, 0));
  CHECK_THROWS(hadamard_matrix(1, false, 0));
}

TEST_CASE("Hadamard orthonormality at n=64") {
  for (bool randomize : {false, true}) {
    const RotationMatrix h = hadamard_matrix(64, randomize, 42);
    const Matrix d = h.dense();
    const Matrix hht = matmul_nt(d, d); // H H^T since H rows == H
    double worst = 0.0;
    for (std::size_t i = 0; i < 64; ++i)
      for (std::size_t j = 0; j < 64; ++j)
        worst = std::max(worst, std::abs(hht(i, j) - (i == j ? 1.0 : 0.0)));
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("one-hot rows spread to equal magnitudes") {
  const RotationMatrix h = hadamard_matrix(16, false, 0);
  Matrix e1(1, 16);
  e1(0, 0) = 1.0;
  const Matrix r = rotate_channels(e1, h);
  for (std::size_t c = 0; c < 16; ++c)
    CHECK(std::abs(r(0, c)) == doctest::Approx(0.25));
}

TEST_CASE("normalized Sylvester Hadamard is involutive") {
  std::mt19937_64 rng(4);
  const Matrix x = random_matrix(3, 2, rng);
  const RotationMatrix h = hadamard_matrix(2, false, 0);
  const Matrix back = rotate_channels(rotate_channels(x, h), h);
  CHECK(rel_deviation(back, x) < 1e-6);
}

TEST_CASE("rotation invariance on random inputs") {
  std::mt19937_64 rng(5);
  const Matrix x = random_matrix(8, 16, rng, 2.0);
  const Matrix w = random_matrix(4, 16, rng);
  const RotationMatrix h = hadamard_matrix(16, true, 9);
  const auto [xr, wr] = apply_rotation(x, w, h);
  CHECK(rel_deviation(matmul_nt(xr, wr), matmul_nt(x, w)) <= 1e-5);
}

TEST_CASE("rotation reduces the incoherence of an outlier channel") {
  std::mt19937_64 rng(6);
  Matrix x = random_matrix(8, 64, rng);
  for (std::size_t r = 0; r < x.rows(); ++r) x(r, 13) = 100.0;
  const RotationMatrix h = hadamard_matrix(64, true, 77);
  const Matrix xr = rotate_channels(x, h);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::vector<double> before(x.row_ptr(r), x.row_ptr(r) + 64);
    std::vector<double> after(xr.row_ptr(r), xr.row_ptr(r) + 64);
    CHECK(incoherence(after) < incoherence(before));
  }
}

TEST_CASE("static-dynamic composition preserves the layer output") {
  std::mt19937_64 rng(7);
  const Matrix base = random_matrix(6, 32, rng, 3.0);
  const Matrix x = random_matrix(10, 32, rng, 2.0);
  const Matrix w = random_matrix(8, 32, rng);
  const BalanceTransform t = static_dynamic_balance(base, w, 0.5, 123);
  const auto [xb, wb] = apply_balance(x, w, t);
  CHECK(rel_deviation(matmul_nt(xb, wb), matmul_nt(x, w)) <= 1e-5);
}

TEST_CASE("uniform static base gives a flat mask") {
  Matrix base(4, 16, std::vector<double>(64, 1.5));
  std::mt19937_64 rng(8);
  Matrix w(4, 16);
  std::normal_distribution<double> dist;
  for (double& v : w.data()) v = dist(rng);
  // equalize weight columns too so the mask has nothing to correct
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) w(r, c) = (r == 0) ? 0.7 : 0.1;
  const BalanceTransform t = static_dynamic_balance(base, w, 0.3, 1);
  const double first = t.mask->s[0];
  for (double s : t.mask->s) CHECK(s == doctest::Approx(first));
}

TEST_CASE("alpha grid search lands inside the grid") {
  std::mt19937_64 rng(9);
  Matrix x = random_matrix(16, 32, rng);
  for (std::size_t r = 0; r < x.rows(); ++r) x(r, 3) *= 50.0; // outlier channel
  const Matrix w = random_matrix(8, 32, rng);
  const double alpha = choose_alpha(x, w, 8, 4);
  CHECK(alpha >= 0.1 - 1e-12);
  CHECK(alpha <= 0.9 + 1e-12);
}

TEST_CASE("fwht matches the dense Hadamard product") {
  std::mt19937_64 rng(10);
  std::vector<double> v(32);
  std::normal_distribution<double> dist;
  for (double& x : v) x = dist(rng);
  Matrix row(1, 32, v);
  const RotationMatrix h = hadamard_matrix(32, false, 0);
  const Matrix fast = rotate_channels(row, h);
  const Matrix slow = matmul_nt(row, h.dense()); // H^T == H for sign_diag = 1
  CHECK(rel_deviation(fast, slow) < 1e-9);
}
