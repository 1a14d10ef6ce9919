// Channel-balancing transforms for linear layers: a per-channel scaling mask,
// an orthonormal Hadamard rotation, and their static-dynamic composition.
// Every transform preserves X * W^T up to floating-point error.

#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "dtq/matrix.hpp"

namespace dtq {

struct ScalingMask {
  std::vector<double> s; // one positive entry per input channel
  double alpha = 0.5;
};

// Normalized Sylvester Hadamard of size n (power of two), optionally
// left-multiplied by a seeded random +-1 diagonal. Stored implicitly; rows
// are applied with the fast Walsh-Hadamard transform.
struct RotationMatrix {
  std::size_t n = 0;
  std::vector<int8_t> sign_diag; // +-1 per channel; all +1 when not randomized

  Matrix dense() const; // materialized n x n, for tests and small n
};

struct BalanceTransform {
  std::optional<ScalingMask> mask;
  std::optional<RotationMatrix> rotation; // applied after scaling
};

// In-place unnormalized fast Walsh-Hadamard transform of a length-n buffer
// (n a power of two). Multiply by 1/sqrt(n) afterwards for orthonormality.
void fwht(double* data, std::size_t n);

// s_i = max|X_i|^alpha / max|W_i|^(1-alpha), clamped to [1e-5, 1e5].
// Channels with a zero statistic fall back to s_i = 1.
ScalingMask compute_scaling_mask(const std::vector<double>& act_absmax,
                                 const std::vector<double>& weight_absmax,
                                 double alpha);

// X' = X diag(s)^-1, W'[o,c] = W[o,c] * s[c]; X' W'^T == X W^T.
std::pair<Matrix, Matrix> apply_scaling(const Matrix& x, const Matrix& w,
                                        const ScalingMask& mask);

RotationMatrix hadamard_matrix(std::size_t n, bool randomize, uint64_t seed);

// Rotate a matrix along its channel (column) axis: M' = M * H.
Matrix rotate_channels(const Matrix& m, const RotationMatrix& h);

// X' = X H, W' = W H; X' W'^T == X W^T by orthonormality.
std::pair<Matrix, Matrix> apply_rotation(const Matrix& x, const Matrix& w,
                                         const RotationMatrix& h);

// Scaling mask fitted to the static (time-invariant) activation base,
// composed with a seeded randomized rotation.
BalanceTransform static_dynamic_balance(const Matrix& static_base, const Matrix& w,
                                        double alpha, uint64_t seed);

// Applies mask then rotation to the (X, W) pair.
std::pair<Matrix, Matrix> apply_balance(const Matrix& x, const Matrix& w,
                                        const BalanceTransform& t);

// Grid search over alpha in {0.1, ..., 0.9} minimizing post-balance
// fake-quant MSE of the layer output on calibration data.
double choose_alpha(const Matrix& calib_x, const Matrix& w, int act_bits,
                    int weight_bits);

} // namespace dtq
