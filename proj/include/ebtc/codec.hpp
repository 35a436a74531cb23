#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ebtc/bytes.hpp"

namespace ebtc {

/// Empirical distribution of a symbol sequence. `symbols` is sorted ascending.
struct EntropyModel {
  std::vector<std::int64_t> symbols;
  std::vector<std::uint64_t> counts;
  std::vector<double> probabilities;
  std::uint64_t total = 0;
};

EntropyModel build_entropy_model(std::span<const std::int64_t> symbols);

/// Lower bound -sum n(s) log2 p(s) on the coded size of the sequence the model describes, in bits.
double entropy_bound_bits(const EntropyModel& model);
inline double entropy_bound_bits(std::span<const std::int64_t> symbols) {
  return symbols.empty() ? 0.0 : entropy_bound_bits(build_entropy_model(symbols));
}

enum class CodecId : std::uint8_t { AdaptiveOrder0 = 0, Raw64 = 1 };

struct EncodedStream {
  CodecId codec = CodecId::AdaptiveOrder0;
  std::uint64_t n_symbols = 0;
  Bytes payload;
  std::uint32_t crc = 0;  // crc32 of payload

  /// codec_id u8 | n_symbols u64 | payload_len u64 | payload | crc32 u32, all little-endian.
  void write(ByteWriter& out) const;
  Bytes serialize() const;
  static EncodedStream read(ByteReader& in);
  static EncodedStream parse(std::span<const std::uint8_t> bytes);

  std::size_t serialized_size() const { return 1 + 8 + 8 + payload.size() + 4; }
};

/// Adaptive order-0 arithmetic coding with escape for unseen symbols; falls back to raw 64-bit
/// storage when that is not larger.
EncodedStream encode_symbols(std::span<const std::int64_t> symbols);
/// Forces one codec, skipping the size comparison.
EncodedStream encode_symbols(std::span<const std::int64_t> symbols, CodecId codec);
std::vector<std::int64_t> decode_symbols(const EncodedStream& stream);

/// One bit per latent element: +1 -> 1, -1 -> 0, least-significant bit first, zero padded.
Bytes pack_bits(std::span<const std::int8_t> signs);
std::vector<std::int8_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t n);

}  // namespace ebtc
