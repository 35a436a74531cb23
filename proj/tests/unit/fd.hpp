#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>

// Fourth-order central-difference check of an analytic gradient for a float-valued scalar function.
struct FdResult {
  double worst = 0.0;  // max |fd - analytic| / (|fd| + |analytic| + floor)
  std::size_t checked = 0;
};

inline FdResult fd_check(std::span<float> x, std::span<const float> analytic, const std::function<double()>& f,
                         double h = 3e-3, double floor = 1e-3) {
  FdResult res;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float saved = x[i];
    auto at = [&](double dx) {
      x[i] = saved + static_cast<float>(dx);
      const double v = f();
      x[i] = saved;
      return v;
    };
    const double fd = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
    const double err = std::abs(fd - analytic[i]) / (std::abs(fd) + std::abs(analytic[i]) + floor);
    res.worst = std::max(res.worst, err);
    ++res.checked;
  }
  return res;
}
