#include "ebtc/codec.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <map>
#include <unordered_map>

#include "ebtc/error.hpp"

namespace ebtc {

EntropyModel build_entropy_model(std::span<const std::int64_t> symbols) {
  std::map<std::int64_t, std::uint64_t> counts;
  for (auto s : symbols) ++counts[s];
  EntropyModel model;
  model.total = symbols.size();
  for (const auto& [s, n] : counts) {
    model.symbols.push_back(s);
    model.counts.push_back(n);
    model.probabilities.push_back(static_cast<double>(n) / static_cast<double>(model.total));
  }
  return model;
}

double entropy_bound_bits(const EntropyModel& model) {
  if (model.total == 0) throw ArgumentError("entropy bound of an empty model");
  double bits = 0.0;
  for (std::size_t j = 0; j < model.counts.size(); ++j)
    bits -= static_cast<double>(model.counts[j]) * std::log2(model.probabilities[j]);
  return bits;
}

namespace {

constexpr std::uint32_t kTop = 1u << 24;
constexpr std::uint32_t kMaxTotal = 1u << 16;

// LZMA-style range coder: 32-bit range, 64-bit low with deferred carry.
class RangeEncoder {
 public:
  void encode(std::uint32_t start, std::uint32_t size, std::uint32_t total) {
    const std::uint32_t r = range_ / total;
    low_ += static_cast<std::uint64_t>(r) * start;
    range_ = r * size;
    while (range_ < kTop) {
      range_ <<= 8;
      shift_low();
    }
  }
  // Low `bits` bits of value, 16 at a time.
  void encode_bits(std::uint64_t value, int bits) {
    for (int done = 0; done < bits; done += 16) {
      const int w = std::min(16, bits - done);
      encode(static_cast<std::uint32_t>((value >> done) & ((1u << w) - 1)), 1, 1u << w);
    }
  }
  Bytes finish() && {
    for (int i = 0; i < 5; ++i) shift_low();
    return std::move(out_);
  }

 private:
  void shift_low() {
    if (static_cast<std::uint32_t>(low_) < 0xff000000u || (low_ >> 32) != 0) {
      const auto carry = static_cast<std::uint8_t>(low_ >> 32);
      std::uint8_t temp = cache_;
      do {
        out_.push_back(static_cast<std::uint8_t>(temp + carry));
        temp = 0xff;
      } while (--cache_size_ != 0);
      cache_ = static_cast<std::uint8_t>(low_ >> 24);
    }
    ++cache_size_;
    low_ = (low_ & 0x00ffffffu) << 8;
  }

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xffffffffu;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
  Bytes out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> in) : in_(in) {
    for (int i = 0; i < 5; ++i) code_ = (code_ << 8) | next();
  }
  std::uint32_t decode_freq(std::uint32_t total) {
    step_ = range_ / total;
    const std::uint32_t v = code_ / step_;
    if (v >= total) throw DecodeError("corrupt arithmetic-coded payload");
    return v;
  }
  void update(std::uint32_t start, std::uint32_t size) {
    code_ -= step_ * start;
    range_ = step_ * size;
    while (range_ < kTop) {
      code_ = (code_ << 8) | next();
      range_ <<= 8;
    }
  }
  std::uint64_t decode_bits(int bits) {
    std::uint64_t value = 0;
    for (int done = 0; done < bits; done += 16) {
      const int w = std::min(16, bits - done);
      const auto v = decode_freq(1u << w);
      update(v, 1);
      value |= static_cast<std::uint64_t>(v) << done;
    }
    return value;
  }

 private:
  std::uint32_t next() {
    if (pos_ < in_.size()) return in_[pos_++];
    // The encoder flush emits enough bytes that a well-formed stream never reads past its end.
    if (++overrun_ > 4) throw DecodeError("arithmetic-coded payload is truncated");
    return 0;
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  int overrun_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t range_ = 0xffffffffu;
  std::uint32_t step_ = 1;
};

// Adaptive frequency table over slots; slot 0 is the escape symbol, counted like any other slot.
// Fenwick tree for cumulative counts, rebuilt on growth and on halving.
class AdaptiveModel {
 public:
  AdaptiveModel() {
    freq_.push_back(1);  // escape
    rebuild(16);
  }

  std::uint32_t total() const { return total_; }
  std::uint32_t freq(std::size_t slot) const { return freq_[slot]; }
  std::size_t slots() const { return freq_.size(); }

  std::uint32_t cumulative(std::size_t slot) const {  // sum of freq_[0..slot)
    std::uint32_t sum = 0;
    for (std::size_t i = slot; i > 0; i -= i & (~i + 1)) sum += tree_[i];
    return sum;
  }

  // Largest slot whose cumulative start is <= target.
  std::size_t find(std::uint32_t target) const {
    std::size_t pos = 0;
    for (std::size_t step = capacity_; step > 0; step >>= 1) {
      const std::size_t next = pos + step;
      if (next <= capacity_ && tree_[next] <= target) {
        pos = next;
        target -= tree_[next];
      }
    }
    return pos;  // zero-based slot
  }

  std::size_t add_slot() {
    freq_.push_back(1);
    ++total_;
    if (freq_.size() > capacity_) rebuild(capacity_ * 2);
    else add(freq_.size() - 1, 1);
    maybe_halve();
    return freq_.size() - 1;
  }

  void bump(std::size_t slot) {
    ++freq_[slot];
    ++total_;
    add(slot, 1);
    maybe_halve();
  }

 private:
  void add(std::size_t slot, std::uint32_t delta) {
    for (std::size_t i = slot + 1; i <= capacity_; i += i & (~i + 1)) tree_[i] += delta;
  }
  void maybe_halve() {
    if (total_ <= kMaxTotal) return;
    for (auto& f : freq_) f = (f + 1) / 2;
    rebuild(capacity_);
  }
  void rebuild(std::size_t capacity) {
    capacity_ = capacity;
    tree_.assign(capacity_ + 1, 0);
    total_ = 0;
    for (std::size_t s = 0; s < freq_.size(); ++s) {
      total_ += freq_[s];
      for (std::size_t i = s + 1; i <= capacity_; i += i & (~i + 1)) tree_[i] += freq_[s];
    }
  }

  std::vector<std::uint32_t> freq_;
  std::vector<std::uint32_t> tree_;
  std::size_t capacity_ = 0;
  std::uint32_t total_ = 0;
};

// New symbols: zigzag value as an adaptive bit-length bucket followed by the bits below its
// leading one.
class LiteralModel {
 public:
  LiteralModel() { freq_.fill(1); }

  void encode(RangeEncoder& enc, std::int64_t s) {
    const std::uint64_t u = (static_cast<std::uint64_t>(s) << 1) ^ static_cast<std::uint64_t>(s >> 63);
    const int len = std::bit_width(u);
    enc.encode(cumulative(len), freq_[len], total_);
    bump(len);
    if (len > 1) enc.encode_bits(u, len - 1);
  }

  std::int64_t decode(RangeDecoder& dec) {
    const auto target = dec.decode_freq(total_);
    int len = 0;
    std::uint32_t start = 0;
    while (start + freq_[len] <= target) start += freq_[len++];
    dec.update(start, freq_[len]);
    bump(len);
    std::uint64_t u = len == 0 ? 0 : std::uint64_t{1} << (len - 1);
    if (len > 1) u |= dec.decode_bits(len - 1);
    return static_cast<std::int64_t>(u >> 1) ^ -static_cast<std::int64_t>(u & 1);
  }

 private:
  std::uint32_t cumulative(int len) const {
    std::uint32_t c = 0;
    for (int i = 0; i < len; ++i) c += freq_[i];
    return c;
  }
  void bump(int len) {
    freq_[len] += 8;
    total_ += 8;
    if (total_ > kMaxTotal) {
      total_ = 0;
      for (auto& f : freq_) total_ += f = (f + 1) / 2;
    }
  }

  std::array<std::uint32_t, 65> freq_{};
  std::uint32_t total_ = 65;
};

Bytes encode_adaptive(std::span<const std::int64_t> symbols) {
  if (symbols.empty()) return {};
  RangeEncoder enc;
  AdaptiveModel model;
  LiteralModel literals;
  std::unordered_map<std::int64_t, std::size_t> slot_of;
  for (const auto s : symbols) {
    const auto it = slot_of.find(s);
    if (it != slot_of.end()) {
      const auto slot = it->second;
      enc.encode(model.cumulative(slot), model.freq(slot), model.total());
      model.bump(slot);
      continue;
    }
    enc.encode(0, model.freq(0), model.total());
    model.bump(0);
    literals.encode(enc, s);
    slot_of.emplace(s, model.add_slot());
  }
  return std::move(enc).finish();
}

std::vector<std::int64_t> decode_adaptive(std::span<const std::uint8_t> payload, std::uint64_t n) {
  std::vector<std::int64_t> out;
  if (n == 0) {
    if (!payload.empty()) throw DecodeError("non-empty payload for an empty stream");
    return out;
  }
  out.reserve(n);
  RangeDecoder dec(payload);
  AdaptiveModel model;
  LiteralModel literals;
  std::vector<std::int64_t> symbol_of{0};  // slot -> symbol; slot 0 unused (escape)
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto target = dec.decode_freq(model.total());
    const auto slot = model.find(target);
    if (slot >= model.slots()) throw DecodeError("corrupt arithmetic-coded payload");
    dec.update(model.cumulative(slot), model.freq(slot));
    if (slot != 0) {
      out.push_back(symbol_of[slot]);
      model.bump(slot);
      continue;
    }
    model.bump(0);
    const auto s = literals.decode(dec);
    out.push_back(s);
    symbol_of.push_back(s);
    model.add_slot();
  }
  return out;
}

Bytes encode_raw64(std::span<const std::int64_t> symbols) {
  ByteWriter w;
  for (auto s : symbols) w.i64(s);
  return std::move(w).take();
}

}  // namespace

void EncodedStream::write(ByteWriter& out) const {
  out.u8(static_cast<std::uint8_t>(codec));
  out.u64(n_symbols);
  out.u64(payload.size());
  out.bytes(payload);
  out.u32(crc);
}

Bytes EncodedStream::serialize() const {
  ByteWriter w;
  write(w);
  return std::move(w).take();
}

EncodedStream EncodedStream::read(ByteReader& in) {
  EncodedStream s;
  const auto id = in.u8();
  if (id > static_cast<std::uint8_t>(CodecId::Raw64)) throw FormatError("unknown codec id " + std::to_string(id));
  s.codec = static_cast<CodecId>(id);
  s.n_symbols = in.u64();
  const auto len = in.u64();
  if (len > in.remaining()) throw DecodeError("encoded stream payload is truncated");
  const auto body = in.take(len);
  s.payload.assign(body.begin(), body.end());
  s.crc = in.u32();
  if (crc32(s.payload) != s.crc) throw DecodeError("encoded stream checksum mismatch");
  return s;
}

EncodedStream EncodedStream::parse(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  auto s = read(in);
  if (in.remaining() != 0) throw DecodeError("trailing bytes after encoded stream");
  return s;
}

EncodedStream encode_symbols(std::span<const std::int64_t> symbols, CodecId codec) {
  EncodedStream s;
  s.codec = codec;
  s.n_symbols = symbols.size();
  s.payload = codec == CodecId::Raw64 ? encode_raw64(symbols) : encode_adaptive(symbols);
  s.crc = crc32(s.payload);
  return s;
}

EncodedStream encode_symbols(std::span<const std::int64_t> symbols) {
  auto coded = encode_symbols(symbols, CodecId::AdaptiveOrder0);
  if (coded.payload.size() <= symbols.size() * 8) return coded;
  return encode_symbols(symbols, CodecId::Raw64);
}

std::vector<std::int64_t> decode_symbols(const EncodedStream& stream) {
  if (crc32(stream.payload) != stream.crc) throw DecodeError("encoded stream checksum mismatch");
  if (stream.codec == CodecId::Raw64) {
    if (stream.payload.size() != stream.n_symbols * 8) throw DecodeError("raw64 payload length mismatch");
    ByteReader in(stream.payload);
    std::vector<std::int64_t> out(stream.n_symbols);
    for (auto& s : out) s = in.i64();
    return out;
  }
  return decode_adaptive(stream.payload, stream.n_symbols);
}

Bytes pack_bits(std::span<const std::int8_t> signs) {
  Bytes out((signs.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < signs.size(); ++i) {
    if (signs[i] != 1 && signs[i] != -1) throw ArgumentError("latent element must be +1 or -1");
    if (signs[i] == 1) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  return out;
}

std::vector<std::int8_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t n) {
  if (n > bytes.size() * 8)
    throw ArgumentError("cannot unpack " + std::to_string(n) + " bits from " + std::to_string(bytes.size()) + " bytes");
  std::vector<std::int8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (bytes[i / 8] >> (i % 8)) & 1u ? 1 : -1;
  return out;
}

}  // namespace ebtc
