#include "dtq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dtq {

double round_even(double v) {
  const double fl = std::floor(v);
  const double frac = v - fl;
  if (frac < 0.5) return fl;
  if (frac > 0.5) return fl + 1.0;
  // exact tie: pick the even neighbour
  return (std::fmod(fl, 2.0) == 0.0) ? fl : fl + 1.0;
}

bool bits_supported(int bits) {
  return bits == 2 || bits == 4 || bits == 6 || bits == 8;
}

std::size_t GroupingScheme::group_count(std::size_t rows, std::size_t cols) const {
  switch (kind) {
    case Grouping::PerTensor: return 1;
    case Grouping::PerToken:
    case Grouping::PerOutputChannel: return rows;
    case Grouping::PerChannel: return cols;
    case Grouping::PerGroup:
      if (group_size == 0 || cols % group_size != 0)
        throw std::invalid_argument("GroupingScheme: group_size must divide cols");
      return rows * (cols / group_size);
  }
  throw std::logic_error("GroupingScheme: bad kind");
}

std::size_t GroupingScheme::group_of(std::size_t r, std::size_t c, std::size_t cols) const {
  switch (kind) {
    case Grouping::PerTensor: return 0;
    case Grouping::PerToken:
    case Grouping::PerOutputChannel: return r;
    case Grouping::PerChannel: return c;
    case Grouping::PerGroup: return r * (cols / group_size) + c / group_size;
  }
  throw std::logic_error("GroupingScheme: bad kind");
}

namespace {

int32_t code_max(int bits) { return (1 << bits) - 1; }

void check_group(std::span<const double> group, int bits) {
  if (group.empty())
    throw std::invalid_argument("quant: empty group");
  if (!bits_supported(bits))
    throw std::invalid_argument("quant: bits must be one of {2,4,6,8}");
  for (double v : group)
    if (!std::isfinite(v))
      throw std::invalid_argument("quant: non-finite value in group");
}

// Gathers the elements of group g into a scratch vector.
void gather_group(const Matrix& x, const GroupingScheme& scheme, std::size_t g,
                  std::vector<double>& out) {
  out.clear();
  const std::size_t rows = x.rows(), cols = x.cols();
  switch (scheme.kind) {
    case Grouping::PerTensor:
      out.assign(x.data().begin(), x.data().end());
      return;
    case Grouping::PerToken:
    case Grouping::PerOutputChannel:
      out.assign(x.row_ptr(g), x.row_ptr(g) + cols);
      return;
    case Grouping::PerChannel:
      out.reserve(rows);
      for (std::size_t r = 0; r < rows; ++r) out.push_back(x(r, g));
      return;
    case Grouping::PerGroup: {
      const std::size_t per_row = cols / scheme.group_size;
      const std::size_t r = g / per_row;
      const std::size_t c0 = (g % per_row) * scheme.group_size;
      out.assign(x.row_ptr(r) + c0, x.row_ptr(r) + c0 + scheme.group_size);
      return;
    }
  }
}

} // namespace

QuantParams compute_minmax_params(std::span<const double> group, int bits) {
  check_group(group, bits);
  const auto [mn_it, mx_it] = std::minmax_element(group.begin(), group.end());
  const double mn = *mn_it, mx = *mx_it;
  QuantParams p;
  p.bits = bits;
  const int32_t qmax = code_max(bits);
  if (mx == mn) {
    // degenerate constant group: unit scale, zero point chosen so the value
    // round-trips exactly whenever -min lands on a representable code
    p.scale = 1.0;
    p.zero_point = static_cast<int32_t>(
        std::clamp(round_even(-mn), 0.0, static_cast<double>(qmax)));
    return p;
  }
  // widen the range to include zero so the zero point always lands inside the
  // code range; otherwise one-sided groups clip at the far end
  const double lo = std::min(mn, 0.0);
  const double hi = std::max(mx, 0.0);
  p.scale = (hi - lo) / static_cast<double>(qmax);
  p.zero_point = static_cast<int32_t>(
      std::clamp(round_even(-lo / p.scale), 0.0, static_cast<double>(qmax)));
  return p;
}

QuantParams compute_symmetric_params(std::span<const double> group, int bits) {
  check_group(group, bits);
  double amax = 0.0;
  for (double v : group) amax = std::max(amax, std::abs(v));
  QuantParams p;
  p.bits = bits;
  p.zero_point = 1 << (bits - 1);
  p.scale = amax > 0.0 ? amax / static_cast<double>((1 << (bits - 1)) - 1) : 1.0;
  return p;
}

std::vector<QuantParams> compute_params(const Matrix& x, const GroupingScheme& scheme,
                                        int bits, bool symmetric) {
  const std::size_t n = scheme.group_count(x.rows(), x.cols());
  std::vector<QuantParams> params;
  params.reserve(n);
  std::vector<double> scratch;
  for (std::size_t g = 0; g < n; ++g) {
    gather_group(x, scheme, g, scratch);
    params.push_back(symmetric ? compute_symmetric_params(scratch, bits)
                               : compute_minmax_params(scratch, bits));
  }
  return params;
}

QuantizedTensor quantize(const Matrix& x, const GroupingScheme& scheme, int bits,
                         QuantMode mode, const std::vector<QuantParams>* frozen_params,
                         bool symmetric) {
  if (!bits_supported(bits))
    throw std::invalid_argument("quantize: bits must be one of {2,4,6,8}");
  if (!x.all_finite())
    throw std::invalid_argument("quantize: non-finite input");
  const std::size_t ngroups = scheme.group_count(x.rows(), x.cols());

  QuantizedTensor q;
  q.rows = x.rows();
  q.cols = x.cols();
  q.scheme = scheme;
  q.symmetric = symmetric;
  if (mode == QuantMode::Static) {
    if (frozen_params == nullptr)
      throw std::invalid_argument("quantize: Static mode requires frozen params");
    if (frozen_params->size() != ngroups)
      throw std::invalid_argument("quantize: frozen params group count mismatch");
    for (const auto& p : *frozen_params)
      if (p.bits != bits)
        throw std::invalid_argument("quantize: frozen params bit width mismatch");
    q.params = *frozen_params;
  } else {
    q.params = compute_params(x, scheme, bits, symmetric);
  }

  const double qmax = static_cast<double>(code_max(bits));
  q.ints.resize(x.size());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const QuantParams& p = q.params[scheme.group_of(r, c, x.cols())];
      const double k = round_even(x(r, c) / p.scale) + p.zero_point;
      q.ints[r * x.cols() + c] = static_cast<uint8_t>(std::clamp(k, 0.0, qmax));
    }
  }
  return q;
}

Matrix dequantize(const QuantizedTensor& q) {
  Matrix out(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r)
    for (std::size_t c = 0; c < q.cols; ++c) {
      const QuantParams& p = q.params_of(r, c);
      out(r, c) = p.scale * (static_cast<int32_t>(q.code(r, c)) - p.zero_point);
    }
  return out;
}

Matrix fake_quantize(const Matrix& x, const GroupingScheme& scheme, int bits,
                     QuantMode mode, const std::vector<QuantParams>* frozen_params,
                     bool symmetric) {
  return dequantize(quantize(x, scheme, bits, mode, frozen_params, symmetric));
}

QuantErrorReport error_report(const Matrix& x, const QuantizedTensor& q) {
  if (x.rows() != q.rows || x.cols() != q.cols)
    throw std::invalid_argument("error_report: shape mismatch");
  QuantErrorReport rep;
  double round_acc = 0.0, clamp_acc = 0.0;
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t c = 0; c < q.cols; ++c) {
      const QuantParams& p = q.params_of(r, c);
      const double pre = round_even(x(r, c) / p.scale) + p.zero_point;
      const double deq = p.scale * (static_cast<int32_t>(q.code(r, c)) - p.zero_point);
      const double err = x(r, c) - deq;
      rep.max_abs_err = std::max(rep.max_abs_err, std::abs(err));
      if (pre < 0.0 || pre > static_cast<double>(code_max(p.bits)))
        clamp_acc += err * err;
      else
        round_acc += err * err;
    }
  }
  const double n = static_cast<double>(x.size());
  rep.rounding_mse = round_acc / n;
  rep.clamping_mse = clamp_acc / n;
  rep.total_mse = (round_acc + clamp_acc) / n;
  return rep;
}

double incoherence(std::span<const double> group) {
  if (group.empty())
    throw std::invalid_argument("incoherence: empty group");
  double amax = 0.0, sq = 0.0;
  for (double v : group) {
    amax = std::max(amax, std::abs(v));
    sq += v * v;
  }
  if (sq == 0.0)
    throw std::invalid_argument("incoherence: all-zero group");
  return amax * std::sqrt(static_cast<double>(group.size())) / std::sqrt(sq);
}

} // namespace dtq
