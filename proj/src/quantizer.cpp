#include "ebtc/quantizer.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "ebtc/error.hpp"

namespace ebtc {

namespace {

void check_eps(double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw ArgumentError("eps must be a positive finite number");
}

}  // namespace

double round_half_away(double x) { return std::copysign(std::floor(std::fabs(x) + 0.5), x); }

std::int64_t quantize_index(double r, double eps) {
  constexpr double kLimit = 0x1.0p62;
  const double scaled = r / (2.0 * eps);
  if (!std::isfinite(scaled) || std::fabs(scaled) > kLimit)
    throw OverflowError("residual " + std::to_string(r) + " is too large for eps " + std::to_string(eps));
  auto k = static_cast<std::int64_t>(round_half_away(scaled));
  // r / 2eps can land on the wrong side of a half-way point by one ulp; keep the bound exact.
  const double err = r - dequantize_index(k, eps);
  if (std::fabs(err) > eps) {
    const auto alt = k + (err > 0 ? 1 : -1);
    if (std::fabs(r - dequantize_index(alt, eps)) < std::fabs(err)) k = alt;
  }
  return k;
}

ResidualBlock quantize(std::span<const double> r, double eps) {
  check_eps(eps);
  ResidualBlock block;
  block.eps = eps;
  block.r.assign(r.begin(), r.end());
  block.k.resize(r.size());
  block.r_q.resize(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!std::isfinite(r[i])) throw ValidationError("non-finite residual at index " + std::to_string(i));
    block.k[i] = quantize_index(r[i], eps);
    block.r_q[i] = dequantize_index(block.k[i], eps);
  }
  return block;
}

std::vector<double> dequantize(std::span<const std::int64_t> k, double eps) {
  check_eps(eps);
  std::vector<double> out(k.size());
  for (std::size_t i = 0; i < k.size(); ++i) out[i] = dequantize_index(k[i], eps);
  return out;
}

double maae_slack(double eps, double magnitude) {
  const double m = std::max(std::fabs(eps), std::fabs(magnitude));
  const double ulp = std::nextafter(m, std::numeric_limits<double>::infinity()) - m;
  return 4.0 * ulp;
}

MaaeReport verify_maae(std::span<const double> x, std::span<const double> x_recon, double eps) {
  check_eps(eps);
  if (x.size() != x_recon.size())
    throw ArgumentError("shape mismatch: " + std::to_string(x.size()) + " vs " + std::to_string(x_recon.size()));
  MaaeReport report;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double err = std::fabs(x[i] - x_recon[i]);
    if (!(err <= eps + maae_slack(eps, std::max(std::fabs(x[i]), std::fabs(x_recon[i]))))) report.pass = false;
    if (err > report.max_abs_err || std::isnan(err)) {
      report.max_abs_err = err;
      report.worst_index = i;
    }
  }
  return report;
}

MaaeReport verify_maae(const TimeSeries& x, const TimeSeries& x_recon, double eps) {
  if (x.length() != x_recon.length() || x.channels() != x_recon.channels())
    throw ArgumentError("shape mismatch: " + std::to_string(x.length()) + "x" + std::to_string(x.channels()) +
                        " vs " + std::to_string(x_recon.length()) + "x" + std::to_string(x_recon.channels()));
  return verify_maae(x.values(), x_recon.values(), eps);
}

}  // namespace ebtc
