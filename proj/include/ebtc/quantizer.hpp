#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ebtc/series.hpp"

namespace ebtc {

/// Quantized residuals. Invariants: |r - r_q| <= eps and r_q == 2*eps*k element-wise.
struct ResidualBlock {
  double eps = 0.0;
  std::vector<double> r;
  std::vector<std::int64_t> k;
  std::vector<double> r_q;
};

/// sign(x) * floor(|x| + 0.5). Part of the container format: decoders must agree on it.
double round_half_away(double x);

/// Index of the uniform bin of width 2*eps that contains `r`. Throws OverflowError past 2^62.
std::int64_t quantize_index(double r, double eps);
inline double dequantize_index(std::int64_t k, double eps) { return 2.0 * eps * static_cast<double>(k); }

ResidualBlock quantize(std::span<const double> r, double eps);
std::vector<double> dequantize(std::span<const std::int64_t> k, double eps);

struct MaaeReport {
  double max_abs_err = 0.0;
  std::size_t worst_index = 0;
  bool pass = true;
};

/// Per-element slack allowed on top of eps for double round-off in x_hat + r_q.
double maae_slack(double eps, double magnitude);

MaaeReport verify_maae(std::span<const double> x, std::span<const double> x_recon, double eps);
MaaeReport verify_maae(const TimeSeries& x, const TimeSeries& x_recon, double eps);

}  // namespace ebtc
