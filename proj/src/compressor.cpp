#include <cmath>

#include "ebtc/compressor.hpp"
#include "ebtc/error.hpp"
#include "ebtc/quantizer.hpp"

namespace ebtc {

namespace {

double reconstruct(double prediction, std::int64_t k, double eps) { return prediction + dequantize_index(k, eps); }

// quantize_index bounds |r - r_q|; the neighbours are checked so the bound also holds after the
// addition decompression performs.
std::int64_t residual_symbol(double x, double prediction, double eps) {
  const std::int64_t k = quantize_index(x - prediction, eps);
  std::int64_t best = k;
  double best_err = std::abs(x - reconstruct(prediction, k, eps));
  if (best_err <= eps) return k;
  for (std::int64_t cand : {k - 1, k + 1}) {
    const double err = std::abs(x - reconstruct(prediction, cand, eps));
    if (err < best_err) {
      best = cand;
      best_err = err;
    }
  }
  return best;
}

std::size_t chunks_per_window(std::size_t latent_bits) { return (latent_bits + 31) / 32; }

std::int64_t chunk_value(std::span<const std::int8_t> c, std::size_t base) {
  std::int64_t v = 0;
  for (std::size_t i = base; i < std::min(c.size(), base + 32); ++i)
    if (c[i] > 0) v |= std::int64_t{1} << (i - base);
  return v;
}

std::size_t model_channels(const ContainerHeader& h) {
  return h.has(ContainerHeader::kFlagMultivariate) ? h.channels : 1;
}

std::size_t window_count(const ContainerHeader& h) {
  const std::uint64_t rows = h.has(ContainerHeader::kFlagMultivariate) ? h.length : h.length * h.channels;
  return h.window == 0 ? 0 : static_cast<std::size_t>(rows / h.window);
}

CompressResult assemble(const TimeSeries& series, const PreparedData& data, const Btae& trained,
                        const CompressOptions& options, TrainHistory history) {
  const double eps = options.eps;
  Container out;
  auto& h = out.header;
  h.kind = ContainerKind::Learned;
  h.eps = eps;
  h.window = static_cast<std::uint32_t>(data.window);
  h.channels = static_cast<std::uint16_t>(series.channels());
  h.length = series.length();
  h.seed = options.train.seed;
  if (data.mode == Mode::Multivariate) h.flags |= ContainerHeader::kFlagMultivariate;
  if (trained.config().use_rpe()) h.flags |= ContainerHeader::kFlagRpe;
  if (data.prescaled) {
    h.flags |= ContainerHeader::kFlagPrescale;
    for (std::size_t c = 0; c < data.original_channels; ++c) {
      h.prescale.push_back(data.offset[c]);
      h.prescale.push_back(data.scale[c]);
    }
  }

  out.decoder = trained.serialize_decoder();
  // Predictions come from the stored half-precision decoder, the same one decompression loads.
  const Btae stored = Btae::load_decoder(out.decoder);
  auto trace = stored.make_trace();
  const std::size_t wv = data.window_values();
  const std::size_t d = data.original_channels;
  const std::size_t bits = trained.config().latent_bits;
  std::vector<std::int8_t> latent_signs;
  latent_signs.reserve(data.count * bits);
  std::vector<std::int64_t> chunks;
  std::vector<std::int64_t> symbols(data.count * wv);
  for (std::size_t w = 0; w < data.count; ++w) {
    const auto code = trained.encode(std::span(data.inputs).subspan(w * wv, wv));
    latent_signs.insert(latent_signs.end(), code.c.begin(), code.c.end());
    for (std::size_t base = 0; base < bits; base += 32) chunks.push_back(chunk_value(code.c, base));
    const auto xhat = stored.decode(code.c, *trace);
    for (std::size_t e = 0; e < wv; ++e) {
      const std::size_t i = w * wv + e;
      symbols[i] = residual_symbol(data.targets[i], data.prediction(xhat[e], i % d), eps);
    }
  }

  Bytes packed = pack_bits(latent_signs);
  if (!chunks.empty()) {
    const auto coded = encode_symbols(chunks, CodecId::AdaptiveOrder0).serialize();
    if (coded.size() < packed.size()) {
      out.latents = coded;
      h.flags |= ContainerHeader::kFlagLatentCoded;
    }
  }
  if (!h.has(ContainerHeader::kFlagLatentCoded)) out.latents = std::move(packed);
  out.residuals = encode_symbols(symbols);
  out.tail = data.tail;

  CompressionReport rep;
  rep.original_bytes = static_cast<std::uint64_t>(series.length()) * series.channels() * 4;
  rep.compressed_bytes = out.serialized_size();
  rep.ratio = compression_ratio(rep);
  rep.decoder_bytes = out.decoder.size();
  rep.latent_bytes = out.latents.size();
  rep.residual_bytes = out.residuals.serialized_size();
  rep.tail_bytes = out.tail_bytes();
  rep.header_bytes = out.overhead_bytes();
  rep.train_seconds = history.seconds;
  rep.entropy_bound_bits = entropy_bound_bits(symbols);
  rep.epochs_run = history.epochs.empty() ? 0 : history.epochs.size() - 1;
  rep.best_epoch = history.best_epoch;
  rep.eps = eps;
  rep.loss = to_string(options.train.loss);
  rep.qel_b = options.train.qel.b;
  rep.mode = to_string(data.mode);
  rep.decoder_kind = to_string(trained.config().decoder_kind);
  rep.rpe = trained.config().use_rpe();
  rep.latent_coded = h.has(ContainerHeader::kFlagLatentCoded);
  rep.seed = options.train.seed;

  const auto recon = decompress(out);
  const auto check = verify_maae(series, recon, eps);
  rep.max_abs_err = check.max_abs_err;

  return {std::move(out), rep, trained, std::move(history)};
}

void check_eps(double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw ArgumentError("eps must be a positive finite number");
}

}  // namespace

CompressResult compress(const TimeSeries& series, const CompressOptions& options) {
  check_eps(options.eps);
  const auto data = prepare(series, options.model.window, options.mode, options.prescale);
  auto trained = train(data, options.model, options.train, options.eps, options.on_epoch);
  return assemble(series, data, trained.model, options, std::move(trained.history));
}

CompressResult compress_with_model(const TimeSeries& series, const Btae& model, const CompressOptions& options) {
  check_eps(options.eps);
  const auto data = prepare(series, model.config().window, options.mode, options.prescale);
  if (model.config().channels != data.model_channels)
    throw ArgumentError("model channel count does not match the data");
  return assemble(series, data, model, options, TrainHistory{});
}

TimeSeries decompress(const Container& container) {
  const auto& h = container.header;
  if (h.kind == ContainerKind::CriticalAperture) return ca_decompress(container);
  if (h.window == 0) throw FormatError("learned container with zero window");
  const Btae model = Btae::load_decoder(container.decoder);
  const std::size_t mc = model_channels(h);
  if (model.config().window != h.window || model.config().channels != mc)
    throw FormatError("decoder shape does not match the container header");

  const std::size_t d = h.channels;
  const std::size_t count = window_count(h);
  const std::size_t wv = std::size_t{h.window} * mc;
  const std::size_t bits = model.config().latent_bits;
  const std::uint64_t total = h.length * d;
  if (container.tail.size() != total - count * wv) throw FormatError("tail size does not match the header");

  std::vector<std::int8_t> signs;
  if (h.has(ContainerHeader::kFlagLatentCoded)) {
    const auto chunks = decode_symbols(EncodedStream::parse(container.latents));
    const std::size_t per = chunks_per_window(bits);
    if (chunks.size() != count * per) throw FormatError("latent stream has the wrong length");
    signs.resize(count * bits);
    for (std::size_t w = 0; w < count; ++w)
      for (std::size_t i = 0; i < bits; ++i) {
        const auto v = chunks[w * per + i / 32];
        signs[w * bits + i] = (v >> (i % 32)) & 1 ? 1 : -1;
      }
  } else {
    signs = unpack_bits(container.latents, count * bits);
  }

  const auto k = decode_symbols(container.residuals);
  if (k.size() != count * wv) throw FormatError("residual stream has the wrong length");

  std::vector<double> offset(d, 0.0), scale(d, 1.0);
  if (h.has(ContainerHeader::kFlagPrescale)) {
    for (std::size_t c = 0; c < d; ++c) {
      offset[c] = h.prescale[2 * c];
      scale[c] = h.prescale[2 * c + 1];
    }
  }

  std::vector<double> values(total);
  auto trace = model.make_trace();
  for (std::size_t w = 0; w < count; ++w) {
    const auto xhat = model.decode(std::span(signs).subspan(w * bits, bits), *trace);
    for (std::size_t e = 0; e < wv; ++e) {
      const std::size_t i = w * wv + e;
      const double pred = static_cast<double>(xhat[e]) * scale[i % d] + offset[i % d];
      values[i] = reconstruct(pred, k[i], h.eps);
    }
  }
  std::copy(container.tail.begin(), container.tail.end(), values.begin() + static_cast<std::ptrdiff_t>(count * wv));
  return TimeSeries(h.length, d, std::move(values));
}

TimeSeries decompress(std::span<const std::uint8_t> bytes) { return decompress(Container::parse(bytes)); }

CompressResult transfer_compress(const TimeSeries& series, const Btae& pretrained, const CompressOptions& options,
                                 const TransferOptions& transfer) {
  check_eps(options.eps);
  const auto& pc = pretrained.config();
  if (options.model.window != pc.window)
    throw ArgumentError("incompatible window: model uses l=" + std::to_string(pc.window) + ", request has l=" +
                        std::to_string(options.model.window));
  const auto data = prepare(series, pc.window, options.mode, options.prescale);

  TrainableGroups groups;
  std::string mode;
  Btae start = pretrained;
  if (pc.channels == data.model_channels) {
    if (!transfer.fine_tune) groups.decoder_core = groups.decoder_output = false;
    mode = transfer.fine_tune ? "fine-tune" : "encoder-only";
  } else {
    ModelConfig cfg = pc;
    cfg.channels = static_cast<std::uint16_t>(data.model_channels);
    cfg.seed = options.model.seed;
    start = Btae(cfg);
    start.copy_group_from(pretrained, nn::Group::DecoderCore);
    groups.decoder_core = false;
    mode = "frozen-core";
  }
  auto trained = train_from(std::move(start), data, options.train, options.eps, groups, options.on_epoch);
  auto result = assemble(series, data, trained.model, options, std::move(trained.history));
  result.report.transfer = true;
  result.report.transfer_mode = mode;
  return result;
}

}  // namespace ebtc
