#include "ebtc/series.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <sstream>

#include "ebtc/bytes.hpp"
#include "ebtc/error.hpp"
#include "ebtc/random.hpp"

namespace ebtc {

namespace {

constexpr char kSeriesMagic[] = "DDTS";
constexpr std::uint16_t kSeriesVersion = 1;
constexpr std::size_t kSeriesHeaderSize = 16;

void check_finite(std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!std::isfinite(values[i]))
      throw ValidationError("non-finite value at index " + std::to_string(i));
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

TimeSeries::TimeSeries(std::size_t length, std::size_t channels, std::vector<double> values, std::string name)
    : length_(length), channels_(channels), values_(std::move(values)), name_(std::move(name)) {
  if (channels_ == 0) throw ValidationError("time series needs at least one channel");
  if (length_ == 0) throw ValidationError("time series needs at least one sample");
  if (values_.size() != length_ * channels_)
    throw ValidationError("value count " + std::to_string(values_.size()) + " != length*channels");
  check_finite(values_);
}

void SyntheticSpec::validate() const {
  if (length == 0 || channels == 0) throw ArgumentError("synthetic length and channels must be >= 1");
  if (degree < 0) throw ArgumentError("polynomial degree must be >= 0");
  if (!(t_low < t_high)) throw ArgumentError("t_low must be < t_high");
  if (segment_len == 0) throw ArgumentError("segment_len must be >= 1");
  if (forced_coefficients && forced_coefficients->size() != channels * static_cast<std::size_t>(degree + 1))
    throw ArgumentError("forced coefficients must be channels x (degree+1)");
}

SeriesFormat format_from_path(const std::string& path) {
  const auto dot = path.rfind('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  if (ext == "csv" || ext == "txt") return SeriesFormat::Csv;
  return SeriesFormat::F32le;
}

TimeSeries parse_csv(std::string_view text, std::string name) {
  std::vector<double> values;
  std::size_t channels = 0;
  std::size_t rows = 0;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;

    std::size_t fields = 0;
    while (true) {
      const auto comma = line.find(',');
      std::string_view field = trim(line.substr(0, comma));
      double v = 0.0;
      const auto* begin = field.data();
      const auto* end = field.data() + field.size();
      auto [ptr, ec] = std::from_chars(begin, end, v);
      if (field.empty() || ec == std::errc::invalid_argument || ptr != end) {
        // from_chars rejects "nan"/"inf" spellings only on some inputs; treat those as validation.
        std::string lower(field);
        for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        if (lower.find("nan") != std::string::npos || lower.find("inf") != std::string::npos)
          throw ValidationError("non-finite value at line " + std::to_string(line_no) + ", column " +
                                std::to_string(fields + 1));
        throw ParseError("line " + std::to_string(line_no) + ", column " + std::to_string(fields + 1) +
                         ": cannot parse '" + std::string(field) + "'");
      }
      if (ec == std::errc::result_out_of_range || !std::isfinite(v))
        throw ValidationError("non-finite value at line " + std::to_string(line_no) + ", column " +
                              std::to_string(fields + 1));
      values.push_back(v);
      ++fields;
      if (comma == std::string_view::npos) break;
      line = line.substr(comma + 1);
    }
    if (channels == 0) channels = fields;
    if (fields != channels)
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(channels) +
                       " columns, found " + std::to_string(fields));
    ++rows;
  }
  if (rows == 0) throw ParseError("csv contains no data rows");
  return TimeSeries(rows, channels, std::move(values), std::move(name));
}

TimeSeries parse_f32le(std::span<const std::uint8_t> bytes, std::string name) {
  ByteReader in(bytes);
  in.expect_magic(std::string_view(kSeriesMagic, 4), "f32le series");
  const auto version = in.u16();
  if (version != kSeriesVersion) throw FormatError("f32le series: unsupported version " + std::to_string(version));
  const std::size_t channels = in.u16();
  const std::size_t length = in.u64();
  if (channels == 0) throw ParseError("f32le series: header declares zero channels");
  const std::size_t expected = length * channels * 4;
  if (in.remaining() != expected)
    throw ParseError("f32le series: header declares " + std::to_string(expected) + " payload bytes, file has " +
                     std::to_string(in.remaining()) + " after byte " + std::to_string(kSeriesHeaderSize));
  std::vector<double> values(length * channels);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float f = in.f32();
    if (!std::isfinite(f)) throw ValidationError("non-finite value at index " + std::to_string(i));
    values[i] = f;
  }
  return TimeSeries(length, channels, std::move(values), std::move(name));
}

std::string to_csv(const TimeSeries& series) {
  std::string out;
  char buf[32];
  for (std::size_t t = 0; t < series.length(); ++t) {
    for (std::size_t c = 0; c < series.channels(); ++c) {
      if (c) out.push_back(',');
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, series.at(t, c));
      out.append(buf, ptr);
    }
    out.push_back('\n');
  }
  return out;
}

std::vector<std::uint8_t> to_f32le(const TimeSeries& series) {
  if (series.channels() > 0xffff) throw ArgumentError("f32le supports at most 65535 channels");
  ByteWriter out;
  out.magic(std::string_view(kSeriesMagic, 4));
  out.u16(kSeriesVersion);
  out.u16(static_cast<std::uint16_t>(series.channels()));
  out.u64(series.length());
  for (double v : series.values()) out.f32(static_cast<float>(v));
  return std::move(out).take();
}

TimeSeries load_series(const std::string& path, SeriesFormat format) {
  const auto bytes = read_file(path);
  if (format == SeriesFormat::Csv)
    return parse_csv(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), path);
  return parse_f32le(bytes, path);
}

TimeSeries load_series(const std::string& path) { return load_series(path, format_from_path(path)); }

void save_series(const TimeSeries& series, const std::string& path, SeriesFormat format) {
  if (format == SeriesFormat::Csv) {
    const auto text = to_csv(series);
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  } else {
    write_file(path, to_f32le(series));
  }
}

TimeSeries synthesize_polynomial(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t terms = static_cast<std::size_t>(spec.degree) + 1;
  const std::size_t coeff_count = spec.channels * terms;

  auto draw = [&] {
    std::vector<double> coeffs(coeff_count);
    for (auto& c : coeffs) c = rng.uniform(-1.0, 1.0);
    return coeffs;
  };
  std::vector<std::vector<double>> pool;
  for (std::size_t i = 0; i < spec.pattern_pool; ++i) pool.push_back(draw());

  // Powers of each timestamp, shared by every segment.
  std::vector<double> powers(spec.segment_len * terms);
  for (std::size_t s = 0; s < spec.segment_len; ++s) {
    const double t = spec.segment_len == 1
                         ? spec.t_low
                         : spec.t_low + (spec.t_high - spec.t_low) * static_cast<double>(s) /
                                            static_cast<double>(spec.segment_len - 1);
    double p = 1.0;
    for (std::size_t k = 0; k < terms; ++k) {
      powers[s * terms + k] = p;
      p *= t;
    }
  }

  std::vector<double> values(spec.length * spec.channels);
  std::vector<double> coeffs;
  for (std::size_t row = 0; row < spec.length; ++row) {
    const std::size_t s = row % spec.segment_len;
    if (s == 0) {
      if (spec.forced_coefficients) coeffs = *spec.forced_coefficients;
      else if (!pool.empty()) coeffs = pool[rng.below(pool.size())];
      else coeffs = draw();
    }
    for (std::size_t c = 0; c < spec.channels; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < terms; ++k) acc += coeffs[c * terms + k] * powers[s * terms + k];
      values[row * spec.channels + c] = acc;
    }
  }
  return TimeSeries(spec.length, spec.channels, std::move(values), "synthetic");
}

TimeSeries random_walk(std::size_t length, std::size_t channels, double step, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> values(length * channels);
  std::vector<double> level(channels, 0.0);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t c = 0; c < channels; ++c) {
      level[c] += step * rng.normal();
      values[t * channels + c] = level[c];
    }
  return TimeSeries(length, channels, std::move(values), "random_walk");
}

WindowBatch window(const TimeSeries& series, std::size_t window_len) {
  if (window_len == 0) throw ArgumentError("window length must be >= 1");
  WindowBatch batch;
  batch.window = window_len;
  batch.channels = series.channels();
  batch.count = series.length() / window_len;
  const auto values = series.values();
  const std::size_t split = batch.count * window_len * series.channels();
  batch.windows.assign(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(split));
  batch.tail.assign(values.begin() + static_cast<std::ptrdiff_t>(split), values.end());
  return batch;
}

TimeSeries concatenate(const WindowBatch& batch) {
  std::vector<double> values(batch.windows);
  values.insert(values.end(), batch.tail.begin(), batch.tail.end());
  const std::size_t rows = batch.channels == 0 ? 0 : values.size() / batch.channels;
  return TimeSeries(rows, batch.channels, std::move(values));
}

TimeSeries flatten_multivariate(const TimeSeries& series) {
  const auto v = series.values();
  return TimeSeries(series.length() * series.channels(), 1, std::vector<double>(v.begin(), v.end()), series.name());
}

TimeSeries unflatten_multivariate(const TimeSeries& flat, std::size_t channels) {
  if (flat.channels() != 1) throw ArgumentError("unflatten expects a single-channel series");
  if (channels == 0 || flat.length() % channels != 0)
    throw ArgumentError("flattened length " + std::to_string(flat.length()) + " is not a multiple of " +
                        std::to_string(channels));
  const auto v = flat.values();
  return TimeSeries(flat.length() / channels, channels, std::vector<double>(v.begin(), v.end()), flat.name());
}

}  // namespace ebtc
