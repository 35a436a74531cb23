#include <json.hpp>

#include "ebtc/compressor.hpp"
#include "ebtc/error.hpp"

namespace ebtc {

namespace {
constexpr std::string_view kMagic = "DDC1";
constexpr std::size_t kFixedHeader = 4 + 2 + 1 + 8 + 4 + 2 + 8 + 2 + 8;
}  // namespace

Bytes Container::serialize() const {
  if (header.has(ContainerHeader::kFlagPrescale) != !header.prescale.empty())
    throw ArgumentError("prescale flag and prescale block disagree");
  ByteWriter w;
  w.magic(kMagic);
  w.u16(header.version);
  w.u8(static_cast<std::uint8_t>(header.kind));
  w.f64(header.eps);
  w.u32(header.window);
  w.u16(header.channels);
  w.u64(header.length);
  w.u16(header.flags);
  w.u64(header.seed);
  for (double v : header.prescale) w.f64(v);
  w.u64(decoder.size());
  w.bytes(decoder);
  w.u64(latents.size());
  w.bytes(latents);
  residuals.write(w);
  w.u32(static_cast<std::uint32_t>(tail.size()));
  for (double v : tail) w.f64(v);
  const auto crc = crc32(w.data());
  w.u32(crc);
  return std::move(w).take();
}

Container Container::parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFixedHeader + 4) throw DecodeError("container too short");
  ByteReader r(bytes);
  r.expect_magic(kMagic, "container");
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader crc_reader(bytes.subspan(bytes.size() - 4));
  if (crc_reader.u32() != crc32(body)) throw DecodeError("container checksum mismatch");

  Container c;
  c.header.version = r.u16();
  if (c.header.version != ContainerHeader::kVersion)
    throw FormatError("unsupported container version " + std::to_string(c.header.version));
  const auto kind = r.u8();
  if (kind > 1) throw FormatError("unknown container kind " + std::to_string(kind));
  c.header.kind = static_cast<ContainerKind>(kind);
  c.header.eps = r.f64();
  c.header.window = r.u32();
  c.header.channels = r.u16();
  c.header.length = r.u64();
  c.header.flags = r.u16();
  c.header.seed = r.u64();
  if (c.header.has(ContainerHeader::kFlagPrescale)) {
    c.header.prescale.resize(2 * std::size_t{c.header.channels});
    for (auto& v : c.header.prescale) v = r.f64();
  }
  const auto dec_len = r.u64();
  if (dec_len > r.remaining()) throw DecodeError("decoder length exceeds container");
  auto dec = r.take(dec_len);
  c.decoder.assign(dec.begin(), dec.end());
  const auto lat_len = r.u64();
  if (lat_len > r.remaining()) throw DecodeError("latent length exceeds container");
  auto lat = r.take(lat_len);
  c.latents.assign(lat.begin(), lat.end());
  c.residuals = EncodedStream::read(r);
  const auto tail_len = r.u32();
  if (std::uint64_t{tail_len} * 8 > r.remaining()) throw DecodeError("tail length exceeds container");
  c.tail.resize(tail_len);
  for (auto& v : c.tail) v = r.f64();
  if (r.remaining() != 4) throw FormatError("trailing bytes after container tail");
  if (!(c.header.eps > 0.0)) throw FormatError("container eps must be positive");
  if (c.header.channels == 0) throw FormatError("container declares zero channels");
  return c;
}

std::size_t Container::serialized_size() const {
  return kFixedHeader + header.prescale.size() * 8 + 8 + decoder.size() + 8 + latents.size() +
         residuals.serialized_size() + 4 + tail_bytes() + 4;
}

std::size_t Container::overhead_bytes() const {
  return serialized_size() - decoder.size() - latents.size() - residuals.serialized_size() - tail_bytes();
}

double compression_ratio(const CompressionReport& report) {
  if (report.compressed_bytes == 0) throw ArgumentError("compressed size is zero");
  return static_cast<double>(report.original_bytes) / static_cast<double>(report.compressed_bytes);
}

std::string report_to_json(const CompressionReport& r) {
  nlohmann::ordered_json j;
  j["schema"] = 1;
  j["method"] = r.method;
  j["original_bytes"] = r.original_bytes;
  j["compressed_bytes"] = r.compressed_bytes;
  j["ratio"] = r.ratio;
  j["decoder_bytes"] = r.decoder_bytes;
  j["latent_bytes"] = r.latent_bytes;
  j["residual_bytes"] = r.residual_bytes;
  j["tail_bytes"] = r.tail_bytes;
  j["header_bytes"] = r.header_bytes;
  j["max_abs_err"] = r.max_abs_err;
  j["eps"] = r.eps;
  j["train_time"] = r.train_seconds;
  j["entropy_bound_bits"] = r.entropy_bound_bits;
  j["epochs_run"] = r.epochs_run;
  j["best_epoch"] = r.best_epoch;
  j["loss"] = r.loss;
  j["b"] = r.qel_b;
  j["mode"] = r.mode;
  j["decoder"] = r.decoder_kind;
  j["rpe"] = r.rpe;
  j["latent_coded"] = r.latent_coded;
  j["transfer"] = r.transfer;
  j["transfer_mode"] = r.transfer_mode;
  j["seed"] = r.seed;
  return j.dump(2);
}

}  // namespace ebtc
