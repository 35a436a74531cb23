#pragma once

// Minimal single-precision building blocks with hand-written backward passes. Every kernel runs
// loops in a fixed order so results are reproducible run to run.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ebtc::nn {

enum class Group : std::uint8_t { Encoder, DecoderCore, DecoderOutput };

enum class Init : std::uint8_t { Uniform, Ones, Zeros };

struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
  Group group = Group::Encoder;
  Init init = Init::Uniform;
  float bound = 0.0f;  // half-width of the uniform initializer
};

/// Flat parameter layout. Layers hold offsets into one float buffer.
class Layout {
 public:
  std::size_t add(std::string name, std::size_t size, Group group, Init init = Init::Uniform, float bound = 0.0f);
  std::size_t total() const { return total_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }

 private:
  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

struct Linear {
  std::size_t in = 0, out = 0;
  std::size_t w = 0, b = 0;  // w is in x out, row-major

  static Linear create(Layout& layout, const std::string& name, std::size_t in, std::size_t out, Group group);
};

struct LayerNorm {
  std::size_t dim = 0;
  std::size_t gamma = 0, beta = 0;

  static LayerNorm create(Layout& layout, const std::string& name, std::size_t dim, Group group);
};

// y[rows x out] = x[rows x in] W + b
void linear_forward(const Linear& l, const float* p, const float* x, std::size_t rows, float* y);
// dx (overwritten, may be null); dW, db accumulated into g.
void linear_backward(const Linear& l, const float* p, const float* x, const float* dy, std::size_t rows, float* dx,
                     float* g);

float gelu(float x);
float gelu_grad(float x);
void gelu_forward(const float* x, std::size_t n, float* y);
// dx = dy * gelu'(x), in place on dy allowed.
void gelu_backward(const float* x, const float* dy, std::size_t n, float* dx);

// Caches normalized rows and per-row reciprocal std for the backward pass.
void layernorm_forward(const LayerNorm& ln, const float* p, const float* x, std::size_t rows, float* y, float* xhat,
                       float* rstd);
void layernorm_backward(const LayerNorm& ln, const float* p, const float* xhat, const float* rstd, const float* dy,
                        std::size_t rows, float* dx, float* g);

void softmax_row(float* row, std::size_t n);

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

/// splitmix64-driven uniform in [-bound, bound); keeps initialization independent of <random>.
float uniform_symmetric(std::uint64_t& state, float bound);

}  // namespace ebtc::nn
