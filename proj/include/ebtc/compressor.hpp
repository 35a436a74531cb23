#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebtc/btae.hpp"
#include "ebtc/codec.hpp"
#include "ebtc/qel.hpp"
#include "ebtc/series.hpp"

namespace ebtc {

enum class LossKind : std::uint8_t { L1, L2, Qel };
enum class Mode : std::uint8_t { Univariate, Multivariate };
enum class ContainerKind : std::uint8_t { Learned = 0, CriticalAperture = 1 };

LossKind loss_from_string(const std::string& s);
std::string to_string(LossKind loss);
std::string to_string(Mode mode);

struct TrainConfig {
  LossKind loss = LossKind::Qel;
  QelParams qel;  // qel.eps is overwritten with the compression eps
  std::size_t batch_size = 64;
  double lr = 1e-4;
  double weight_decay = 0.01;
  // true: decay applied to the weights directly (AdamW). false: added to the gradient as L2.
  bool decoupled_decay = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // 0 skips training: the initial weights are used as-is.
  std::size_t max_epochs = 150;
  std::size_t patience = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;      // 0 is the untrained model
  double train_loss = 0.0;    // mean batch loss (nats for QEL)
  double estimated_bits = 0;  // latent + decoder + residual entropy bound
  double residual_bits = 0;
  bool improved = false;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_estimated_bits = 0.0;
  double seconds = 0.0;
};

/// Windowed view of a series as the model sees it, plus the affine pre-scale.
struct PreparedData {
  Mode mode = Mode::Multivariate;
  std::size_t original_channels = 1;
  std::size_t model_channels = 1;
  std::size_t window = 1;
  std::size_t count = 0;
  std::vector<double> targets;    // count * window * model_channels, original units
  std::vector<float> inputs;      // same layout, pre-scaled
  std::vector<double> tail;       // leftover samples, original units
  std::vector<double> offset;     // per original channel; flat index i belongs to channel i % d
  std::vector<double> scale;      // per original channel
  bool prescaled = false;

  std::size_t window_values() const { return window * model_channels; }
  double prediction(float xhat, std::size_t channel) const {
    return static_cast<double>(xhat) * scale[channel] + offset[channel];
  }
};

PreparedData prepare(const TimeSeries& series, std::size_t window_len, Mode mode, bool prescale);

struct TrainResult {
  Btae model;
  TrainHistory history;
};

/// Which parameter groups the optimizer may change.
struct TrainableGroups {
  bool encoder = true;
  bool decoder_core = true;
  bool decoder_output = true;
};

/// Estimated container payload in bits for the current weights, using half-precision decoder
/// inference exactly as compression does.
struct SizeEstimate {
  double latent_bits = 0;
  double decoder_bits = 0;
  double residual_bits = 0;
  double total() const { return latent_bits + decoder_bits + residual_bits; }
};
SizeEstimate estimate_size(const Btae& model, const PreparedData& data, double eps);

/// Per-epoch callback (e.g. progress output). Not called for epoch 0.
using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(const PreparedData& data, const ModelConfig& model_config, const TrainConfig& train_config,
                  double eps, const EpochCallback& on_epoch = {});
/// Trains starting from `initial`, updating only the enabled groups.
TrainResult train_from(Btae initial, const PreparedData& data, const TrainConfig& train_config, double eps,
                       const TrainableGroups& trainable, const EpochCallback& on_epoch = {});

struct ContainerHeader {
  static constexpr std::uint16_t kVersion = 1;
  static constexpr std::uint16_t kFlagMultivariate = 1u << 0;
  static constexpr std::uint16_t kFlagRpe = 1u << 1;
  static constexpr std::uint16_t kFlagLatentCoded = 1u << 2;
  static constexpr std::uint16_t kFlagPrescale = 1u << 3;

  std::uint16_t version = kVersion;
  ContainerKind kind = ContainerKind::Learned;
  double eps = 0.0;
  std::uint32_t window = 0;
  std::uint16_t channels = 0;
  std::uint64_t length = 0;
  std::uint16_t flags = 0;
  std::uint64_t seed = 0;
  // Present iff kFlagPrescale: (offset, scale) per channel.
  std::vector<double> prescale;

  bool has(std::uint16_t flag) const { return (flags & flag) != 0; }
};

struct Container {
  ContainerHeader header;
  Bytes decoder;
  Bytes latents;
  EncodedStream residuals;
  std::vector<double> tail;

  /// "DDC1" | version u16 | kind u8 | eps f64 | l u32 | d u16 | l_total u64 | flags u16 | seed u64
  /// | [prescale f64 pairs] | decoder_len u64 + bytes | latent_len u64 + bytes | residual stream
  /// | tail_len u32 + f64s | crc32 of everything before it.
  Bytes serialize() const;
  static Container parse(std::span<const std::uint8_t> bytes);

  std::size_t serialized_size() const;
  /// Everything that is not decoder, latents, residual stream or tail: fixed fields, length
  /// prefixes, prescale block and checksum.
  std::size_t overhead_bytes() const;
  std::size_t tail_bytes() const { return tail.size() * 8; }
};

struct CompressionReport {
  std::uint64_t original_bytes = 0;  // float32 source size
  std::uint64_t compressed_bytes = 0;
  double ratio = 0.0;
  std::uint64_t decoder_bytes = 0;
  std::uint64_t latent_bytes = 0;
  std::uint64_t residual_bytes = 0;
  std::uint64_t tail_bytes = 0;
  std::uint64_t header_bytes = 0;
  double max_abs_err = 0.0;
  double train_seconds = 0.0;
  double entropy_bound_bits = 0.0;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double eps = 0.0;
  std::string method = "btae";
  std::string loss;
  int qel_b = 0;
  std::string mode;
  std::string decoder_kind;
  bool rpe = false;
  bool latent_coded = false;
  bool transfer = false;
  std::string transfer_mode;  // "", "fine-tune", "frozen-core"
  std::uint64_t seed = 0;
};

std::string report_to_json(const CompressionReport& report);
double compression_ratio(const CompressionReport& report);

struct CompressOptions {
  double eps = 0.1;
  Mode mode = Mode::Multivariate;
  ModelConfig model;  // window/channels are filled in from the data and mode
  TrainConfig train;
  bool prescale = false;
  EpochCallback on_epoch;
};

struct CompressResult {
  Container container;
  CompressionReport report;
  Btae model;
  TrainHistory history;
};

CompressResult compress(const TimeSeries& series, const CompressOptions& options);
/// Builds the container for an already trained model (no training).
CompressResult compress_with_model(const TimeSeries& series, const Btae& model, const CompressOptions& options);
TimeSeries decompress(const Container& container);
TimeSeries decompress(std::span<const std::uint8_t> bytes);

struct TransferOptions {
  // Same channel count: fine-tune every group when true, otherwise train the encoder only.
  bool fine_tune = true;
};

/// Reuses a trained model. Same channel count: whole-model reuse. Different channel count:
/// decoder core is copied and frozen, encoder and output projection are trained from scratch.
CompressResult transfer_compress(const TimeSeries& series, const Btae& pretrained, const CompressOptions& options,
                                 const TransferOptions& transfer = {});

/// Critical-aperture baseline: per channel, keep a point only when linear interpolation from the
/// last kept point would break eps; kept values are snapped to the 2*eps grid.
Container ca_compress(const TimeSeries& series, double eps);
TimeSeries ca_decompress(const Container& container);
/// Number of retained points per channel (for tests and reports).
std::vector<std::size_t> ca_retained_points(const TimeSeries& series, double eps);

/// Floor baseline: quantize samples directly and entropy-code the indices. Returns the coded
/// size in bytes (fixed header + stream) and the reconstruction.
struct QuantizeOnlyResult {
  std::uint64_t bytes = 0;
  TimeSeries reconstruction;
};
QuantizeOnlyResult quantize_only(const TimeSeries& series, double eps);

}  // namespace ebtc
