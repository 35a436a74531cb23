#include <cmath>
#include <limits>

#include "ebtc/compressor.hpp"
#include "ebtc/error.hpp"
#include "ebtc/quantizer.hpp"

namespace ebtc {

namespace {

struct Knot {
  std::size_t index;
  std::int64_t k;
};

double interpolate(double va, double vb, std::size_t a, std::size_t b, std::size_t i) {
  return va + (vb - va) * static_cast<double>(i - a) / static_cast<double>(b - a);
}

// Segment a -> b with grid values ka, kb reproduces every sample within eps.
bool segment_ok(std::span<const double> x, std::size_t a, std::int64_t ka, std::size_t b, std::int64_t kb,
                double eps) {
  const double va = dequantize_index(ka, eps), vb = dequantize_index(kb, eps);
  if (std::abs(x[b] - vb) > eps) return false;
  for (std::size_t i = a + 1; i < b; ++i)
    if (std::abs(x[i] - interpolate(va, vb, a, b, i)) > eps) return false;
  return true;
}

std::int64_t clamp_index(double v, double lo, double hi) {
  return static_cast<std::int64_t>(std::min(std::max(v, lo), hi));
}

// Slope-interval aperture over one channel. Knots sit on the 2*eps grid so each one costs an
// integer; every candidate endpoint is re-checked with the exact reconstruction arithmetic.
std::vector<Knot> aperture_channel(std::span<const double> x, double eps) {
  std::vector<Knot> knots;
  if (x.empty()) return knots;
  const double step = 2.0 * eps;
  knots.push_back({0, quantize_index(x[0], eps)});
  std::size_t a = 0;
  std::vector<Knot> candidates;
  while (a + 1 < x.size()) {
    const double va = dequantize_index(knots.back().k, eps);
    double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
    candidates.clear();
    candidates.push_back({a + 1, quantize_index(x[a + 1], eps)});
    for (std::size_t i = a + 1; i < x.size(); ++i) {
      const double dt = static_cast<double>(i - a);
      lo = std::max(lo, (x[i] - eps - va) / dt);
      hi = std::min(hi, (x[i] + eps - va) / dt);
      if (lo > hi) break;
      if (i == a + 1) continue;
      const double kmin = std::ceil((va + lo * dt) / step), kmax = std::floor((va + hi * dt) / step);
      if (kmin > kmax) continue;
      const double target = round_half_away(x[i] / step);
      candidates.push_back({i, clamp_index(target, kmin, kmax)});
    }
    Knot next = candidates.front();
    for (auto it = candidates.rbegin(); it != candidates.rend(); ++it)
      if (segment_ok(x, a, knots.back().k, it->index, it->k, eps)) {
        next = *it;
        break;
      }
    knots.push_back(next);
    a = next.index;
  }
  return knots;
}

std::vector<double> channel(const TimeSeries& s, std::size_t c) {
  std::vector<double> out(s.length());
  for (std::size_t t = 0; t < s.length(); ++t) out[t] = s.at(t, c);
  return out;
}

void check_eps(double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw ArgumentError("eps must be a positive finite number");
}

}  // namespace

std::vector<std::size_t> ca_retained_points(const TimeSeries& series, double eps) {
  check_eps(eps);
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < series.channels(); ++c) out.push_back(aperture_channel(channel(series, c), eps).size());
  return out;
}

Container ca_compress(const TimeSeries& series, double eps) {
  check_eps(eps);
  Container out;
  out.header.kind = ContainerKind::CriticalAperture;
  out.header.eps = eps;
  out.header.window = 0;
  out.header.channels = static_cast<std::uint16_t>(series.channels());
  out.header.length = series.length();
  // Per channel: knot count, then (index delta, grid delta) pairs.
  std::vector<std::int64_t> symbols;
  for (std::size_t c = 0; c < series.channels(); ++c) {
    const auto knots = aperture_channel(channel(series, c), eps);
    symbols.push_back(static_cast<std::int64_t>(knots.size()));
    std::size_t prev_i = 0;
    std::int64_t prev_k = 0;
    for (const auto& kn : knots) {
      symbols.push_back(static_cast<std::int64_t>(kn.index - prev_i));
      symbols.push_back(kn.k - prev_k);
      prev_i = kn.index;
      prev_k = kn.k;
    }
  }
  out.residuals = encode_symbols(symbols);
  return out;
}

TimeSeries ca_decompress(const Container& container) {
  const auto& h = container.header;
  if (h.kind != ContainerKind::CriticalAperture) throw FormatError("not a critical-aperture container");
  const auto symbols = decode_symbols(container.residuals);
  const std::size_t n = h.length, d = h.channels;
  std::vector<double> values(n * d);
  std::size_t pos = 0;
  auto next = [&]() {
    if (pos >= symbols.size()) throw FormatError("critical-aperture stream ended early");
    return symbols[pos++];
  };
  for (std::size_t c = 0; c < d; ++c) {
    const auto count = next();
    if (count < (n > 0 ? 1 : 0) || static_cast<std::uint64_t>(count) > n)
      throw FormatError("bad knot count in critical-aperture stream");
    std::vector<Knot> knots;
    std::size_t idx = 0;
    std::int64_t k = 0;
    for (std::int64_t j = 0; j < count; ++j) {
      const auto di = next();
      k += next();
      if (di < 0 || (j > 0 && di == 0)) throw FormatError("non-increasing knot index");
      idx += static_cast<std::size_t>(di);
      if (idx >= n) throw FormatError("knot index past the series end");
      knots.push_back({idx, k});
    }
    if (n > 0 && (knots.front().index != 0 || knots.back().index != n - 1))
      throw FormatError("knots do not span the series");
    values[knots.front().index * d + c] = dequantize_index(knots.front().k, h.eps);
    for (std::size_t j = 1; j < knots.size(); ++j) {
      const auto& ka = knots[j - 1];
      const auto& kb = knots[j];
      const double va = dequantize_index(ka.k, h.eps), vb = dequantize_index(kb.k, h.eps);
      for (std::size_t i = ka.index + 1; i < kb.index; ++i) values[i * d + c] = interpolate(va, vb, ka.index, kb.index, i);
      values[kb.index * d + c] = vb;
    }
  }
  if (pos != symbols.size()) throw FormatError("trailing symbols in critical-aperture stream");
  return TimeSeries(n, d, std::move(values));
}

QuantizeOnlyResult quantize_only(const TimeSeries& series, double eps) {
  check_eps(eps);
  std::vector<std::int64_t> k(series.values().size());
  std::vector<double> recon(k.size());
  for (std::size_t i = 0; i < k.size(); ++i) {
    k[i] = quantize_index(series.values()[i], eps);
    recon[i] = dequantize_index(k[i], eps);
  }
  // Sized as a container with empty decoder, latents and tail around the coded indices.
  Container shell;
  shell.header.eps = eps;
  shell.header.channels = static_cast<std::uint16_t>(series.channels());
  shell.header.length = series.length();
  shell.residuals = encode_symbols(k);
  return {shell.serialized_size(), TimeSeries(series.length(), series.channels(), std::move(recon))};
}

}  // namespace ebtc
