#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

#include "ebtc/compressor.hpp"
#include "ebtc/error.hpp"
#include "ebtc/quantizer.hpp"
#include "ebtc/random.hpp"

namespace ebtc {

LossKind loss_from_string(const std::string& s) {
  if (s == "l1" || s == "L1") return LossKind::L1;
  if (s == "l2" || s == "L2" || s == "mse") return LossKind::L2;
  if (s == "qel" || s == "QEL") return LossKind::Qel;
  throw ArgumentError("unknown loss '" + s + "' (expected l1, l2 or qel)");
}

std::string to_string(LossKind loss) {
  switch (loss) {
    case LossKind::L1: return "l1";
    case LossKind::L2: return "l2";
    case LossKind::Qel: return "qel";
  }
  return "unknown";
}

std::string to_string(Mode mode) { return mode == Mode::Univariate ? "uni" : "multi"; }

void TrainConfig::validate() const {
  if (batch_size == 0) throw ArgumentError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ArgumentError("learning rate must be positive");
  if (weight_decay < 0.0) throw ArgumentError("weight decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ArgumentError("Adam betas must be in [0,1)");
  if (loss == LossKind::Qel && qel.b < 1) throw ArgumentError("qel b must be >= 1");
}

PreparedData prepare(const TimeSeries& series, std::size_t window_len, Mode mode, bool prescale) {
  if (window_len == 0) throw ArgumentError("window length must be >= 1");
  PreparedData data;
  data.mode = mode;
  data.original_channels = series.channels();
  data.model_channels = mode == Mode::Univariate ? 1 : series.channels();
  data.window = window_len;
  data.prescaled = prescale;

  const std::size_t d = series.channels();
  data.offset.assign(d, 0.0);
  data.scale.assign(d, 1.0);
  if (prescale) {
    for (std::size_t c = 0; c < d; ++c) {
      double mean = 0.0;
      for (std::size_t t = 0; t < series.length(); ++t) mean += series.at(t, c);
      mean /= static_cast<double>(series.length());
      double var = 0.0;
      for (std::size_t t = 0; t < series.length(); ++t) var += (series.at(t, c) - mean) * (series.at(t, c) - mean);
      var /= static_cast<double>(series.length());
      const double sd = std::sqrt(var);
      data.offset[c] = mean;
      data.scale[c] = sd > 1e-12 && std::isfinite(sd) ? sd : 1.0;
    }
  }

  // Row-major storage means the sample-major flattening is the same buffer viewed with d = 1.
  const auto values = series.values();
  const std::size_t wv = data.window_values();
  const std::size_t total_rows = mode == Mode::Univariate ? values.size() : series.length();
  data.count = total_rows / window_len;
  const std::size_t split = data.count * wv;
  data.targets.assign(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(split));
  data.tail.assign(values.begin() + static_cast<std::ptrdiff_t>(split), values.end());
  data.inputs.resize(split);
  // Global flat index i belongs to original channel i mod d in both modes.
  for (std::size_t i = 0; i < split; ++i) {
    const std::size_t c = i % d;
    data.inputs[i] = static_cast<float>((data.targets[i] - data.offset[c]) / data.scale[c]);
  }
  return data;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::vector<std::int64_t> latent_chunks(std::span<const std::int8_t> c) {
  std::vector<std::int64_t> out;
  for (std::size_t base = 0; base < c.size(); base += 32) {
    std::int64_t v = 0;
    for (std::size_t i = base; i < std::min(c.size(), base + 32); ++i)
      if (c[i] > 0) v |= std::int64_t{1} << (i - base);
    out.push_back(v);
  }
  return out;
}

}  // namespace

SizeEstimate estimate_size(const Btae& model, const PreparedData& data, double eps) {
  Btae half = model;
  half.round_decoder_to_half();
  auto trace = half.make_trace();
  const std::size_t wv = data.window_values();
  const std::size_t d = data.original_channels;
  std::vector<std::int64_t> symbols(data.count * wv);
  std::vector<std::int64_t> chunks;
  for (std::size_t w = 0; w < data.count; ++w) {
    const auto xhat = half.forward(std::span(data.inputs).subspan(w * wv, wv), *trace);
    const auto c = half.latent(*trace).c;
    const auto ch = latent_chunks(c);
    chunks.insert(chunks.end(), ch.begin(), ch.end());
    for (std::size_t e = 0; e < wv; ++e) {
      const std::size_t i = w * wv + e;
      const double r = data.targets[i] - data.prediction(xhat[e], i % d);
      symbols[i] = quantize_index(r, eps);
    }
  }
  SizeEstimate est;
  const double packed = static_cast<double>(data.count) * model.config().latent_bits;
  est.latent_bits = chunks.empty() ? 0.0 : std::min(packed, entropy_bound_bits(chunks));
  est.decoder_bits = 8.0 * static_cast<double>(model.serialize_decoder().size());
  est.residual_bits = symbols.empty() ? 0.0 : entropy_bound_bits(symbols);
  return est;
}

TrainResult train(const PreparedData& data, const ModelConfig& model_config, const TrainConfig& train_config,
                  double eps, const EpochCallback& on_epoch) {
  ModelConfig cfg = model_config;
  cfg.window = static_cast<std::uint32_t>(data.window);
  cfg.channels = static_cast<std::uint16_t>(data.model_channels);
  return train_from(Btae(cfg), data, train_config, eps, TrainableGroups{}, on_epoch);
}

TrainResult train_from(Btae model, const PreparedData& data, const TrainConfig& train_config, double eps,
                       const TrainableGroups& trainable, const EpochCallback& on_epoch) {
  train_config.validate();
  if (!(eps > 0.0)) throw ArgumentError("eps must be positive");
  if (model.config().window != data.window || model.config().channels != data.model_channels)
    throw ArgumentError("model shape does not match the prepared data");
  const auto start = std::chrono::steady_clock::now();

  TrainHistory history;
  const auto initial = estimate_size(model, data, eps);
  history.epochs.push_back({0, 0.0, initial.total(), initial.residual_bits, true});
  history.best_epoch = 0;
  history.best_estimated_bits = initial.total();
  std::vector<float> best(model.parameters().begin(), model.parameters().end());

  if (train_config.max_epochs == 0 || data.count == 0) {
    history.seconds = seconds_since(start);
    return {std::move(model), std::move(history)};
  }

  const std::size_t n_params = model.parameter_count();
  std::vector<std::uint8_t> mask(n_params, 0);
  for (const auto& t : model.layout().tensors()) {
    const bool on = (t.group == nn::Group::Encoder && trainable.encoder) ||
                    (t.group == nn::Group::DecoderCore && trainable.decoder_core) ||
                    (t.group == nn::Group::DecoderOutput && trainable.decoder_output);
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size, on ? 1 : 0);
  }

  std::vector<float> grad(n_params), m(n_params, 0.0f), v(n_params, 0.0f);
  const std::size_t batch = std::min(train_config.batch_size, data.count);
  std::vector<TracePtr> traces;
  for (std::size_t b = 0; b < batch; ++b) traces.push_back(model.make_trace());
  const std::size_t wv = data.window_values();
  const std::size_t d = data.original_channels;
  std::vector<double> pred(batch * wv), target(batch * wv), dpred;
  std::vector<float> dxhat(wv);
  std::vector<std::size_t> order(data.count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(train_config.seed ^ 0x5eedf00dcafef00dull);
  QelParams qel = train_config.qel;
  qel.eps = eps;
  std::uint64_t step = 0;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= train_config.max_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < data.count; first += batch) {
      const std::size_t n = std::min(batch, data.count - first);
      pred.resize(n * wv);
      target.resize(n * wv);
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t w = order[first + b];
        const auto xhat = model.forward(std::span(data.inputs).subspan(w * wv, wv), *traces[b]);
        for (std::size_t e = 0; e < wv; ++e) {
          const std::size_t i = w * wv + e;
          pred[b * wv + e] = data.prediction(xhat[e], i % d);
          target[b * wv + e] = data.targets[i];
        }
      }

      double loss = 0.0;
      if (train_config.loss == LossKind::Qel) {
        std::vector<double> r(n * wv);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = target[i] - pred[i];
        const auto state = qel_prepare(r, qel);
        loss = state.entropy;
        dpred = qel_backward(r, qel, state);
        for (auto& g : dpred) g = -g;  // r = x - x_hat
      } else {
        const auto kind = train_config.loss == LossKind::L1 ? RegressionKind::L1 : RegressionKind::L2;
        loss = regression_loss(pred, target, kind);
        dpred = regression_grad(pred, target, kind);
      }
      if (!std::isfinite(loss))
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batches));
      loss_sum += loss;
      ++batches;

      std::fill(grad.begin(), grad.end(), 0.0f);
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t w = order[first + b];
        for (std::size_t e = 0; e < wv; ++e)
          dxhat[e] = static_cast<float>(dpred[b * wv + e] * data.scale[(w * wv + e) % d]);
        model.backward(*traces[b], dxhat, grad);
      }

      ++step;
      const double bc1 = 1.0 - std::pow(train_config.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(train_config.beta2, static_cast<double>(step));
      const auto b1 = static_cast<float>(train_config.beta1);
      const auto b2 = static_cast<float>(train_config.beta2);
      const auto lr_t = static_cast<float>(train_config.lr / bc1);
      const auto inv_bc2 = static_cast<float>(1.0 / bc2);
      const auto wd = static_cast<float>(train_config.weight_decay);
      const auto aeps = static_cast<float>(train_config.adam_eps);
      const float l2 = train_config.decoupled_decay ? 0.0f : wd;
      const float shrink = train_config.decoupled_decay ? 1.0f - static_cast<float>(train_config.lr) * wd : 1.0f;
      auto params = model.parameters();
      for (std::size_t i = 0; i < n_params; ++i) {
        if (!mask[i]) continue;
        const float g = grad[i] + l2 * params[i];
        if (!std::isfinite(g))
          throw DivergenceError("non-finite gradient at epoch " + std::to_string(epoch));
        m[i] = b1 * m[i] + (1.0f - b1) * g;
        v[i] = b2 * v[i] + (1.0f - b2) * g * g;
        params[i] = shrink * params[i] - lr_t * m[i] / (std::sqrt(v[i] * inv_bc2) + aeps);
      }
    }

    const auto est = estimate_size(model, data, eps);
    EpochRecord rec{epoch, batches ? loss_sum / static_cast<double>(batches) : 0.0, est.total(), est.residual_bits,
                    false};
    if (est.total() < history.best_estimated_bits) {
      rec.improved = true;
      history.best_epoch = epoch;
      history.best_estimated_bits = est.total();
      best.assign(model.parameters().begin(), model.parameters().end());
      since_best = 0;
    } else {
      ++since_best;
    }
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (since_best >= train_config.patience) break;
  }

  std::copy(best.begin(), best.end(), model.parameters().begin());
  history.seconds = seconds_since(start);
  return {std::move(model), std::move(history)};
}

}  // namespace ebtc
