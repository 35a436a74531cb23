#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ebtc {

/// Row-major l_total x d matrix of finite samples.
class TimeSeries {
 public:
  TimeSeries() = default;
  TimeSeries(std::size_t length, std::size_t channels, std::vector<double> values, std::string name = {});

  std::size_t length() const { return length_; }
  std::size_t channels() const { return channels_; }
  const std::string& name() const { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }

  double at(std::size_t t, std::size_t c) const { return values_[t * channels_ + c]; }
  std::span<const double> values() const { return values_; }
  std::span<const double> row(std::size_t t) const { return {values_.data() + t * channels_, channels_}; }

  bool operator==(const TimeSeries& other) const {
    return length_ == other.length_ && channels_ == other.channels_ && values_ == other.values_;
  }

 private:
  std::size_t length_ = 0;
  std::size_t channels_ = 0;
  std::vector<double> values_;
  std::string name_;
};

/// Contiguous windows of `window` rows plus the leftover rows, both row-major.
struct WindowBatch {
  std::size_t window = 0;
  std::size_t channels = 0;
  std::size_t count = 0;
  std::vector<double> windows;  // count * window * channels
  std::vector<double> tail;     // (l_total mod window) * channels

  std::span<const double> at(std::size_t i) const {
    return {windows.data() + i * window * channels, window * channels};
  }
  std::size_t tail_rows() const { return channels == 0 ? 0 : tail.size() / channels; }
};

struct SyntheticSpec {
  std::size_t length = 1000;
  std::size_t channels = 1;
  int degree = 3;
  double t_low = -1.0;
  double t_high = 1.0;
  std::size_t segment_len = 128;
  std::uint64_t seed = 0;
  // 0 draws a fresh coefficient matrix per segment; n > 0 draws each segment's matrix from a
  // fixed pool of n matrices (recurring patterns).
  std::size_t pattern_pool = 0;
  // Test hook: when set (channels x (degree+1), row-major) every segment uses these coefficients.
  std::optional<std::vector<double>> forced_coefficients;

  void validate() const;
};

enum class SeriesFormat { Csv, F32le };

SeriesFormat format_from_path(const std::string& path);

TimeSeries parse_csv(std::string_view text, std::string name = {});
TimeSeries parse_f32le(std::span<const std::uint8_t> bytes, std::string name = {});
std::string to_csv(const TimeSeries& series);
std::vector<std::uint8_t> to_f32le(const TimeSeries& series);

TimeSeries load_series(const std::string& path, SeriesFormat format);
TimeSeries load_series(const std::string& path);
void save_series(const TimeSeries& series, const std::string& path, SeriesFormat format);

TimeSeries synthesize_polynomial(const SyntheticSpec& spec);
/// Gaussian random walk with unit-variance steps scaled by `step`; used for tests and benches.
TimeSeries random_walk(std::size_t length, std::size_t channels, double step, std::uint64_t seed);

WindowBatch window(const TimeSeries& series, std::size_t window_len);
TimeSeries concatenate(const WindowBatch& batch);

/// Sample-major interleave into one channel: (t0c0, t0c1, ..., t1c0, ...).
TimeSeries flatten_multivariate(const TimeSeries& series);
TimeSeries unflatten_multivariate(const TimeSeries& flat, std::size_t channels);

}  // namespace ebtc
