#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ebtc/bytes.hpp"
#include "ebtc/nn.hpp"

namespace ebtc {

enum class Activation : std::uint8_t { GeLU = 0 };
enum class DecoderKind : std::uint8_t { Transformer = 0, Ffn = 1, Rnn = 2 };
// Off: plain attention. Literal: additive (j - i) term in the logits. Learned: per-distance
// embedding dotted with the query (shared across heads).
enum class RpeMode : std::uint8_t { Off = 0, Literal = 1, Learned = 2 };

DecoderKind decoder_kind_from_string(const std::string& s);
std::string to_string(DecoderKind kind);

struct ModelConfig {
  std::uint32_t latent_bits = 32;
  std::uint32_t window = 128;
  std::uint16_t channels = 1;
  std::uint16_t d_model = 32;
  std::uint16_t n_heads = 8;
  std::uint16_t n_encoder_layers = 3;
  std::uint16_t n_decoder_blocks = 2;
  std::uint16_t ffn_hidden = 64;
  Activation activation = Activation::GeLU;
  DecoderKind decoder_kind = DecoderKind::Transformer;
  RpeMode rpe = RpeMode::Off;
  std::uint64_t seed = 0;

  bool use_rpe() const { return rpe != RpeMode::Off; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Bernoulli latent: pre-binarization reals and their signs.
struct LatentCode {
  std::vector<float> y;
  std::vector<std::int8_t> c;
};

/// +1 when y >= 0, else -1.
std::int8_t binarize(float y);
/// Training surrogate: d binarize / dy := 1 - tanh^2(y).
float binarize_grad(float y);

struct PositionalEncodings {
  std::size_t window = 0;
  std::size_t d_model = 0;
  std::vector<float> ape;  // window x d_model sinusoidal
  std::vector<float> rpe;  // window x window, rpe[i][j] = j - i

  float ape_at(std::size_t pos, std::size_t i) const { return ape[pos * d_model + i]; }
  float rpe_at(std::size_t i, std::size_t j) const { return rpe[i * window + j]; }
};

PositionalEncodings build_positional(std::size_t window, std::size_t d_model);

/// Per-window activations cached by the training forward pass.
struct Trace;
struct TraceDeleter {
  void operator()(Trace* t) const;
};
using TracePtr = std::unique_ptr<Trace, TraceDeleter>;

/// Encoder + binarization + decoder (transformer, feed-forward or recurrent).
class Btae {
 public:
  explicit Btae(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const nn::Layout& layout() const { return layout_; }
  std::span<float> parameters() { return params_; }
  std::span<const float> parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::size_t parameter_count(nn::Group group) const;
  /// Parameters stored with the decoder, in serialization order.
  std::size_t decoder_parameter_count() const;

  /// Draws every tensor of `group` from the seeded initializer again.
  void reinitialize(nn::Group group, std::uint64_t seed);
  /// Copies every tensor of `group` from a model with the same tensor names and sizes.
  void copy_group_from(const Btae& other, nn::Group group);
  /// Rounds decoder parameters through IEEE half precision (what serialization stores).
  void round_decoder_to_half();

  LatentCode encode(std::span<const float> window) const;
  std::vector<float> decode(std::span<const std::int8_t> c) const;
  /// Same as decode() but reuses a trace from make_trace(); the result lives in the trace.
  std::span<const float> decode(std::span<const std::int8_t> c, Trace& trace) const;
  /// Attention probabilities of decoder block `block` for one latent (heads x window x window).
  std::vector<float> attention_probabilities(std::span<const std::int8_t> c, std::size_t block) const;

  TracePtr make_trace() const;
  /// Runs encoder, binarization and decoder, caching activations. Returns x_hat (window*channels).
  std::span<const float> forward(std::span<const float> window, Trace& trace) const;
  /// Latent of the last forward call on `trace`.
  const LatentCode& latent(const Trace& trace) const;
  /// Accumulates parameter gradients for d loss / d x_hat into `grad`; optionally writes the
  /// gradient with respect to the encoder input.
  void backward(Trace& trace, std::span<const float> dxhat, std::span<float> grad,
                std::span<float> dinput = {}) const;
  /// Decoder-only training path used by tests: forward from a fixed latent vector (as floats).
  std::span<const float> forward_from_latent(std::span<const float> c, Trace& trace) const;
  /// Backward of forward_from_latent; writes d loss / d c.
  void backward_to_latent(Trace& trace, std::span<const float> dxhat, std::span<float> grad,
                          std::span<float> dlatent) const;

  Bytes serialize_decoder() const;
  static Btae load_decoder(std::span<const std::uint8_t> bytes);
  /// Full float32 model (encoder included) for transfer.
  Bytes serialize_full() const;
  static Btae load_full(std::span<const std::uint8_t> bytes);

 private:
  struct EncoderNet {
    std::vector<nn::Linear> hidden;
    nn::Linear out;
  };
  struct Block {
    nn::LayerNorm ln1, ln2;
    nn::Linear q, k, v, o;
    nn::Linear ff1, ff2;
    std::size_t rel_embed = 0;  // (2 window - 1) x head_dim, learned RPE only
  };
  struct TransformerDecoder {
    nn::Linear lift1, lift2;
    std::vector<Block> blocks;
    nn::Linear out1, out2;
  };
  struct FfnDecoder {
    nn::Linear l1, l2, l3;
  };
  struct RnnDecoder {
    std::size_t input = 0, hidden = 0;
    nn::Linear wi, wh;  // input/hidden to the stacked (r, z, n) gates
    nn::Linear out;
  };

  void build_layout();
  void initialize(std::uint64_t seed, const nn::Group* only = nullptr);
  void decode_forward(const float* c, Trace& t) const;
  void decode_backward(Trace& t, const float* dxhat, float* g, float* dc) const;
  void block_forward(const Block& blk, const float* p, Trace& t, std::size_t index) const;
  void block_backward(const Block& blk, const float* p, Trace& t, std::size_t index, float* dz, float* g) const;

  ModelConfig config_;
  nn::Layout layout_;
  EncoderNet encoder_;
  TransformerDecoder transformer_;
  FfnDecoder ffn_;
  RnnDecoder rnn_;
  PositionalEncodings positional_;
  std::vector<float> params_;
};

}  // namespace ebtc
