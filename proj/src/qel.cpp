#include "ebtc/qel.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ebtc/error.hpp"
#include "ebtc/quantizer.hpp"

namespace ebtc {

void QelParams::validate() const {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw ArgumentError("qel: eps must be positive");
  if (b < 1) throw ArgumentError("qel: b must be >= 1");
  if (!(clamp_u > 0.0)) throw ArgumentError("qel: clamp_u must be positive");
}

QelState qel_prepare(std::span<const double> r, const QelParams& params) {
  params.validate();
  if (r.empty()) throw ArgumentError("qel: empty residual tensor");
  std::vector<std::int64_t> k(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!std::isfinite(r[i])) throw ValidationError("qel: non-finite residual at index " + std::to_string(i));
    k[i] = quantize_index(r[i], params.eps);
  }
  QelState state;
  state.model = build_entropy_model(k);
  state.weights.resize(state.model.symbols.size());
  for (std::size_t j = 0; j < state.weights.size(); ++j) {
    const double p = state.model.probabilities[j];
    state.weights[j] = 1.0 + std::log(p);
    state.entropy -= p * std::log(p);
  }
  return state;
}

double qel_forward(std::span<const double> r, const QelParams& params) { return qel_prepare(r, params).entropy; }

namespace {

double ipow(double x, int n) {
  double result = 1.0;
  while (n > 0) {
    if (n & 1) result *= x;
    x *= x;
    n >>= 1;
  }
  return result;
}

}  // namespace

double qel_kernel(double d, double eps, int b, std::size_t n, double clamp_u) {
  const double u = d / eps;
  const double a = std::fabs(u);
  if (a > clamp_u || a == 0.0) return 0.0;
  const double ub1 = ipow(a, b - 1);
  const double denom = ub1 * a + 1.0;
  const double mag = static_cast<double>(b) / (static_cast<double>(n) * eps) * ub1 / (denom * denom);
  return u < 0.0 ? -mag : mag;
}

std::vector<double> qel_backward(std::span<const double> r, const QelParams& params, const QelState& state) {
  params.validate();
  const auto& ks = state.model.symbols;
  std::vector<double> grad(r.size(), 0.0);
  const double reach = params.clamp_u / 2.0;  // in units of the 2 eps grid
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double centre = r[i] / (2.0 * params.eps);
    const auto lo_k = static_cast<std::int64_t>(std::floor(centre - reach));
    const auto hi_k = static_cast<std::int64_t>(std::ceil(centre + reach));
    auto j = static_cast<std::size_t>(std::lower_bound(ks.begin(), ks.end(), lo_k) - ks.begin());
    double g = 0.0;
    for (; j < ks.size() && ks[j] <= hi_k; ++j) {
      const double d = r[i] - dequantize_index(ks[j], params.eps);
      g += state.weights[j] * qel_kernel(d, params.eps, params.b, r.size(), params.clamp_u);
    }
    grad[i] = g;
  }
  return grad;
}

std::vector<double> qel_backward(std::span<const double> r, const QelParams& params) {
  return qel_backward(r, params, qel_prepare(r, params));
}

namespace {

void check_shapes(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size())
    throw ArgumentError("shape mismatch: " + std::to_string(pred.size()) + " vs " + std::to_string(target.size()));
  if (pred.empty()) throw ArgumentError("regression loss of empty tensors");
}

}  // namespace

double regression_loss(std::span<const double> pred, std::span<const double> target, RegressionKind kind) {
  check_shapes(pred, target);
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    sum += kind == RegressionKind::L1 ? std::fabs(e) : e * e;
  }
  return sum / static_cast<double>(pred.size());
}

std::vector<double> regression_grad(std::span<const double> pred, std::span<const double> target, RegressionKind kind) {
  check_shapes(pred, target);
  const double n = static_cast<double>(pred.size());
  std::vector<double> g(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    g[i] = kind == RegressionKind::L1 ? (e > 0 ? 1.0 : (e < 0 ? -1.0 : 0.0)) / n : 2.0 * e / n;
  }
  return g;
}

}  // namespace ebtc
