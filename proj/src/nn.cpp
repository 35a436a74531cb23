#include "ebtc/nn.hpp"

#include <algorithm>
#include <cmath>

namespace ebtc::nn {

std::size_t Layout::add(std::string name, std::size_t size, Group group, Init init, float bound) {
  const std::size_t offset = total_;
  tensors_.push_back({std::move(name), offset, size, group, init, bound});
  total_ += size;
  return offset;
}

Linear Linear::create(Layout& layout, const std::string& name, std::size_t in, std::size_t out, Group group) {
  Linear l;
  l.in = in;
  l.out = out;
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  l.w = layout.add(name + ".weight", in * out, group, Init::Uniform, bound);
  l.b = layout.add(name + ".bias", out, group, Init::Uniform, bound);
  return l;
}

LayerNorm LayerNorm::create(Layout& layout, const std::string& name, std::size_t dim, Group group) {
  LayerNorm ln;
  ln.dim = dim;
  ln.gamma = layout.add(name + ".gamma", dim, group, Init::Ones);
  ln.beta = layout.add(name + ".beta", dim, group, Init::Zeros);
  return ln;
}

void linear_forward(const Linear& l, const float* p, const float* x, std::size_t rows, float* y) {
  const float* w = p + l.w;
  const float* b = p + l.b;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * l.in;
    float* yr = y + r * l.out;
    std::copy(b, b + l.out, yr);
    for (std::size_t i = 0; i < l.in; ++i) {
      const float xi = xr[i];
      const float* wi = w + i * l.out;
      for (std::size_t o = 0; o < l.out; ++o) yr[o] += xi * wi[o];
    }
  }
}

void linear_backward(const Linear& l, const float* p, const float* x, const float* dy, std::size_t rows, float* dx,
                     float* g) {
  const float* w = p + l.w;
  float* gw = g + l.w;
  float* gb = g + l.b;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * l.in;
    const float* dyr = dy + r * l.out;
    for (std::size_t o = 0; o < l.out; ++o) gb[o] += dyr[o];
    for (std::size_t i = 0; i < l.in; ++i) {
      const float xi = xr[i];
      float* gwi = gw + i * l.out;
      for (std::size_t o = 0; o < l.out; ++o) gwi[o] += xi * dyr[o];
    }
    if (dx != nullptr) {
      float* dxr = dx + r * l.in;
      for (std::size_t i = 0; i < l.in; ++i) {
        const float* wi = w + i * l.out;
        float acc = 0.0f;
        for (std::size_t o = 0; o < l.out; ++o) acc += wi[o] * dyr[o];
        dxr[i] = acc;
      }
    }
  }
}

namespace {
constexpr float kInvSqrt2 = 0.70710678118654752f;
constexpr float kInvSqrt2Pi = 0.39894228040143268f;
}  // namespace

float gelu(float x) { return 0.5f * x * (1.0f + std::erf(x * kInvSqrt2)); }

float gelu_grad(float x) {
  return 0.5f * (1.0f + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5f * x * x);
}

void gelu_forward(const float* x, std::size_t n, float* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = gelu(x[i]);
}

void gelu_backward(const float* x, const float* dy, std::size_t n, float* dx) {
  for (std::size_t i = 0; i < n; ++i) dx[i] = dy[i] * gelu_grad(x[i]);
}

void layernorm_forward(const LayerNorm& ln, const float* p, const float* x, std::size_t rows, float* y, float* xhat,
                       float* rstd) {
  constexpr float kEps = 1e-5f;
  const float* gamma = p + ln.gamma;
  const float* beta = p + ln.beta;
  const auto n = static_cast<float>(ln.dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * ln.dim;
    float mean = 0.0f;
    for (std::size_t i = 0; i < ln.dim; ++i) mean += xr[i];
    mean /= n;
    float var = 0.0f;
    for (std::size_t i = 0; i < ln.dim; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= n;
    const float rs = 1.0f / std::sqrt(var + kEps);
    rstd[r] = rs;
    for (std::size_t i = 0; i < ln.dim; ++i) {
      const float h = (xr[i] - mean) * rs;
      xhat[r * ln.dim + i] = h;
      y[r * ln.dim + i] = gamma[i] * h + beta[i];
    }
  }
}

void layernorm_backward(const LayerNorm& ln, const float* p, const float* xhat, const float* rstd, const float* dy,
                        std::size_t rows, float* dx, float* g) {
  const float* gamma = p + ln.gamma;
  float* ggamma = g + ln.gamma;
  float* gbeta = g + ln.beta;
  const auto n = static_cast<float>(ln.dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* hr = xhat + r * ln.dim;
    const float* dyr = dy + r * ln.dim;
    float mean_dh = 0.0f;
    float mean_dh_h = 0.0f;
    for (std::size_t i = 0; i < ln.dim; ++i) {
      ggamma[i] += dyr[i] * hr[i];
      gbeta[i] += dyr[i];
      const float dh = dyr[i] * gamma[i];
      mean_dh += dh;
      mean_dh_h += dh * hr[i];
    }
    mean_dh /= n;
    mean_dh_h /= n;
    for (std::size_t i = 0; i < ln.dim; ++i)
      dx[r * ln.dim + i] = rstd[r] * (dyr[i] * gamma[i] - mean_dh - hr[i] * mean_dh_h);
  }
}

void softmax_row(float* row, std::size_t n) {
  float mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  float sum = 0.0f;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const float inv = 1.0f / sum;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

float uniform_symmetric(std::uint64_t& state, float bound) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  z ^= z >> 31;
  const double u = static_cast<double>(z >> 11) * 0x1.0p-53;
  return static_cast<float>((2.0 * u - 1.0) * bound);
}

}  // namespace ebtc::nn
