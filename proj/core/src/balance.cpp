#include "dtq/balance.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "dtq/quant.hpp"

namespace dtq {

namespace {

constexpr double kMaskFloor = 1e-5;
constexpr double kMaskCeil = 1e5;

bool is_pow2(std::size_t n) { return n >= 2 && (n & (n - 1)) == 0; }

} // namespace

void fwht(double* data, std::size_t n) {
  for (std::size_t h = 1; h < n; h <<= 1) {
    for (std::size_t i = 0; i < n; i += h << 1) {
      for (std::size_t j = i; j < i + h; ++j) {
        const double a = data[j];
        const double b = data[j + h];
        data[j] = a + b;
        data[j + h] = a - b;
      }
    }
  }
}

ScalingMask compute_scaling_mask(const std::vector<double>& act_absmax,
                                 const std::vector<double>& weight_absmax,
                                 double alpha) {
  if (act_absmax.size() != weight_absmax.size())
    throw std::invalid_argument("compute_scaling_mask: vector length mismatch");
  if (alpha < 0.0 || alpha > 1.0)
    throw std::invalid_argument("compute_scaling_mask: alpha must be in [0,1]");
  ScalingMask mask;
  mask.alpha = alpha;
  mask.s.resize(act_absmax.size());
  for (std::size_t i = 0; i < act_absmax.size(); ++i) {
    const double a = act_absmax[i], w = weight_absmax[i];
    if (a <= 0.0 || w <= 0.0 || !std::isfinite(a) || !std::isfinite(w)) {
      mask.s[i] = 1.0; // dead channel, leave it alone
      continue;
    }
    const double s = std::pow(a, alpha) / std::pow(w, 1.0 - alpha);
    mask.s[i] = std::clamp(s, kMaskFloor, kMaskCeil);
  }
  return mask;
}

std::pair<Matrix, Matrix> apply_scaling(const Matrix& x, const Matrix& w,
                                        const ScalingMask& mask) {
  if (x.cols() != mask.s.size() || w.cols() != mask.s.size())
    throw std::invalid_argument("apply_scaling: dimension mismatch");
  Matrix xs = x, ws = w;
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) xs(r, c) /= mask.s[c];
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) ws(r, c) *= mask.s[c];
  return {std::move(xs), std::move(ws)};
}

RotationMatrix hadamard_matrix(std::size_t n, bool randomize, uint64_t seed) {
  if (!is_pow2(n))
    throw std::invalid_argument("hadamard_matrix: n must be a power of two >= 2");
  RotationMatrix h;
  h.n = n;
  h.sign_diag.assign(n, int8_t{1});
  if (randomize) {
    std::mt19937_64 rng(seed);
    for (auto& d : h.sign_diag) d = (rng() & 1) ? int8_t{1} : int8_t{-1};
  }
  return h;
}

Matrix RotationMatrix::dense() const {
  Matrix m(n, n);
  const double norm = 1.0 / std::sqrt(static_cast<double>(n));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      // Sylvester entry: (-1)^popcount(r & c)
      const int sign = (std::popcount(r & c) & 1) ? -1 : 1;
      m(r, c) = sign_diag[r] * sign * norm;
    }
  return m;
}

Matrix rotate_channels(const Matrix& m, const RotationMatrix& h) {
  if (m.cols() != h.n)
    throw std::invalid_argument("rotate_channels: channel count != rotation size");
  Matrix out = m;
  const double norm = 1.0 / std::sqrt(static_cast<double>(h.n));
  std::vector<double> buf(h.n);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double* row = out.row_ptr(r);
    for (std::size_t c = 0; c < h.n; ++c) row[c] *= h.sign_diag[c];
    fwht(row, h.n);
    for (std::size_t c = 0; c < h.n; ++c) row[c] *= norm;
  }
  return out;
}

std::pair<Matrix, Matrix> apply_rotation(const Matrix& x, const Matrix& w,
                                         const RotationMatrix& h) {
  if (x.cols() != h.n || w.cols() != h.n)
    throw std::invalid_argument("apply_rotation: dimension mismatch");
  return {rotate_channels(x, h), rotate_channels(w, h)};
}

BalanceTransform static_dynamic_balance(const Matrix& static_base, const Matrix& w,
                                        double alpha, uint64_t seed) {
  if (static_base.cols() != w.cols())
    throw std::invalid_argument("static_dynamic_balance: channel mismatch");
  BalanceTransform t;
  t.mask = compute_scaling_mask(col_absmax(static_base), col_absmax(w), alpha);
  t.rotation = hadamard_matrix(w.cols(), /*randomize=*/true, seed);
  return t;
}

std::pair<Matrix, Matrix> apply_balance(const Matrix& x, const Matrix& w,
                                        const BalanceTransform& t) {
  Matrix xb = x, wb = w;
  if (t.mask) {
    auto [xs, ws] = apply_scaling(xb, wb, *t.mask);
    xb = std::move(xs);
    wb = std::move(ws);
  }
  if (t.rotation) {
    auto [xr, wr] = apply_rotation(xb, wb, *t.rotation);
    xb = std::move(xr);
    wb = std::move(wr);
  }
  return {std::move(xb), std::move(wb)};
}

double choose_alpha(const Matrix& calib_x, const Matrix& w, int act_bits,
                    int weight_bits) {
  const Matrix ref = matmul_nt(calib_x, w);
  double best_alpha = 0.5;
  double best_mse = std::numeric_limits<double>::infinity();
  const auto act_amax = col_absmax(calib_x);
  const auto w_amax = col_absmax(w);
  for (int step = 1; step <= 9; ++step) {
    const double alpha = 0.1 * step;
    const auto mask = compute_scaling_mask(act_amax, w_amax, alpha);
    auto [xs, ws] = apply_scaling(calib_x, w, mask);
    const Matrix xq = fake_quantize(xs, GroupingScheme::per_token(), act_bits,
                                    QuantMode::Dynamic);
    const Matrix wq = fake_quantize(ws, GroupingScheme::per_output_channel(),
                                    weight_bits, QuantMode::Dynamic, nullptr,
                                    /*symmetric=*/true);
    const double err = mse(matmul_nt(xq, wq), ref);
    if (err < best_mse) {
      best_mse = err;
      best_alpha = alpha;
    }
  }
  return best_alpha;
}

} // namespace dtq
