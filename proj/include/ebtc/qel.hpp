#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ebtc/codec.hpp"

namespace ebtc {

struct QelParams {
  double eps = 0.1;
  int b = 10;
  // Contributions with |r_i - s_j| > clamp_u * eps are dropped.
  double clamp_u = 50.0;

  void validate() const;
};

/// Quantized-residual statistics cached by the forward pass for the backward pass.
struct QelState {
  EntropyModel model;           // over quantization indices k (s_j = 2 eps k_j)
  std::vector<double> weights;  // 1 + ln p(s_j), aligned with model.symbols
  double entropy = 0.0;         // nats
};

QelState qel_prepare(std::span<const double> r, const QelParams& params);

/// Shannon entropy (nats) of the quantized residual distribution.
double qel_forward(std::span<const double> r, const QelParams& params);

/// Surrogate kernel R(d) for one residual/symbol distance, in normalized form
/// (b / (n eps)) * sign(u) |u|^(b-1) / (|u|^b + 1)^2 with u = d / eps.
double qel_kernel(double d, double eps, int b, std::size_t n, double clamp_u = 50.0);

/// dH/dr_i = sum_j (1 + ln p(s_j)) R(r_i - s_j), using `state` from the same residuals.
std::vector<double> qel_backward(std::span<const double> r, const QelParams& params, const QelState& state);
std::vector<double> qel_backward(std::span<const double> r, const QelParams& params);

enum class RegressionKind { L1, L2 };

double regression_loss(std::span<const double> pred, std::span<const double> target, RegressionKind kind);
/// Gradient of the mean-reduced loss with respect to `pred`.
std::vector<double> regression_grad(std::span<const double> pred, std::span<const double> target, RegressionKind kind);

}  // namespace ebtc
