#include <doctest.h>

#include <cmath>

#include "ebtc/btae.hpp"
#include "ebtc/bytes.hpp"
#include "ebtc/error.hpp"
#include "ebtc/random.hpp"
#include "fd.hpp"

using namespace ebtc;

namespace {

ModelConfig tiny(DecoderKind kind, RpeMode rpe = RpeMode::Off) {
  ModelConfig c;
  c.latent_bits = 6;
  c.window = 4;
  c.channels = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_encoder_layers = 2;
  c.n_decoder_blocks = 2;
  c.ffn_hidden = 8;
  c.decoder_kind = kind;
  c.rpe = rpe;
  c.seed = 17;
  return c;
}

std::vector<float> randn(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal() * scale);
  return v;
}

double weighted(std::span<const float> y, const std::vector<float>& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(y[i]) * w[i];
  return s;
}

std::vector<std::int8_t> signs(std::size_t n, Rng& rng) {
  std::vector<std::int8_t> c(n);
  for (auto& v : c) v = rng.uniform() < 0.5 ? -1 : 1;
  return c;
}

}  // namespace

TEST_CASE("binarization") {
  CHECK(binarize(0.0f) == 1);
  CHECK(binarize(-0.3f) == -1);
  CHECK(binarize(2.0f) == 1);
  CHECK(binarize(-0.0f) == 1);
  CHECK(binarize_grad(0.0f) == 1.0f);
  CHECK(binarize_grad(1.0f) == doctest::Approx(1.0 - std::tanh(1.0) * std::tanh(1.0)).epsilon(1e-6));
}

TEST_CASE("positional encodings") {
  auto pe = build_positional(3, 4);
  const float want[3][3] = {{0, 1, 2}, {-1, 0, 1}, {-2, -1, 0}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(pe.rpe_at(i, j) == want[i][j]);

  auto big = build_positional(64, 32);
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(big.ape_at(0, 2 * i) == 0.0f);
    CHECK(big.ape_at(0, 2 * i + 1) == 1.0f);
  }
  for (float v : big.ape) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t j = 0; j < 64; ++j) CHECK(big.rpe_at(i, j) == -big.rpe_at(j, i));
  const double angle = 37.0 / std::pow(10000.0, 10.0 / 32.0);
  CHECK(big.ape_at(37, 10) == doctest::Approx(std::sin(angle)).epsilon(1e-6));
  CHECK(big.ape_at(37, 11) == doctest::Approx(std::cos(angle)).epsilon(1e-6));
  CHECK_THROWS_AS(build_positional(3, 5), ArgumentError);
}

TEST_CASE("config validation") {
  auto c = tiny(DecoderKind::Transformer);
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = tiny(DecoderKind::Transformer);
  c.latent_bits = 0;
  CHECK_THROWS_AS(Btae{c}, ArgumentError);
  CHECK_THROWS_AS(decoder_kind_from_string("lstm"), ArgumentError);
}

TEST_CASE("encode codomain and determinism") {
  Btae m(tiny(DecoderKind::Transformer));
  Rng rng(1);
  auto x = randn(8, rng);
  auto a = m.encode(x);
  auto b = m.encode(x);
  CHECK(a.c == b.c);
  CHECK(a.y == b.y);
  for (std::size_t i = 0; i < a.c.size(); ++i) {
    CHECK((a.c[i] == 1 || a.c[i] == -1));
    CHECK((a.c[i] == 1) == (a.y[i] >= 0.0f));
  }
  CHECK_THROWS_AS(m.encode(std::vector<float>(7)), ArgumentError);
  CHECK_THROWS_AS(m.decode(std::vector<std::int8_t>(5, 1)), ArgumentError);
}

TEST_CASE("decoder output shape for every kind") {
  Rng rng(2);
  for (auto kind : {DecoderKind::Transformer, DecoderKind::Ffn, DecoderKind::Rnn})
    for (std::uint32_t l : {1u, 3u, 8u})
      for (std::uint16_t d : {1, 3}) {
        auto cfg = tiny(kind);
        cfg.window = l;
        cfg.channels = d;
        Btae m(cfg);
        const auto y = m.decode(signs(cfg.latent_bits, rng));
        CHECK(y.size() == l * d);
        for (float v : y) CHECK(std::isfinite(v));
      }
}

TEST_CASE("same seed gives the same weights") {
  Btae a(tiny(DecoderKind::Transformer)), b(tiny(DecoderKind::Transformer));
  CHECK(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
  auto other = tiny(DecoderKind::Transformer);
  other.seed = 18;
  Btae c(other);
  CHECK_FALSE(std::equal(a.parameters().begin(), a.parameters().end(), c.parameters().begin()));
}

TEST_CASE("decoder gradients match finite differences") {
  struct Case {
    const char* name;
    ModelConfig cfg;
  };
  const Case cases[] = {
      {"transformer", tiny(DecoderKind::Transformer)},
      {"transformer+literal rpe", tiny(DecoderKind::Transformer, RpeMode::Literal)},
      {"transformer+learned rpe", tiny(DecoderKind::Transformer, RpeMode::Learned)},
      {"ffn", tiny(DecoderKind::Ffn)},
      {"rnn", tiny(DecoderKind::Rnn)},
  };
  for (const auto& tc : cases) {
    CAPTURE(std::string(tc.name));
    Btae m(tc.cfg);
    Rng rng(3);
    // Scale parameters up so attention and gates are away from their trivial regime.
    for (auto& p : m.parameters()) p *= 2.0f;
    auto c = randn(tc.cfg.latent_bits, rng);
    const auto w = randn(tc.cfg.window * tc.cfg.channels, rng);
    auto trace = m.make_trace();
    auto loss = [&] { return weighted(m.forward_from_latent(c, *trace), w); };
    loss();
    std::vector<float> g(m.parameter_count(), 0.0f), dc(c.size());
    m.backward_to_latent(*trace, w, g, dc);

    // One random unit direction per decoder tensor: the directional slope is compared with g . v.
    // The loss is accumulated in float (about 1e-6 absolute noise), hence the wide step and floor.
    constexpr double kH = 3e-2, kFloor = 5e-3;
    const std::vector<float> base(m.parameters().begin(), m.parameters().end());
    double worst = 0.0;
    for (const auto& t : m.layout().tensors()) {
      if (t.group == nn::Group::Encoder) continue;
      CAPTURE(t.name);
      auto v = randn(t.size, rng);
      double norm = 0.0, slope = 0.0;
      for (float e : v) norm += double{e} * e;
      for (std::size_t i = 0; i < t.size; ++i) {
        v[i] = static_cast<float>(v[i] / std::sqrt(norm));
        slope += double{g[t.offset + i]} * v[i];
      }
      float step = 0.0f;
      auto along = [&] {
        auto p = m.parameters();
        for (std::size_t i = 0; i < t.size; ++i) p[t.offset + i] = base[t.offset + i] + step * v[i];
        return loss();
      };
      const float an = static_cast<float>(slope);
      const double r = fd_check(std::span<float>(&step, 1), std::span<const float>(&an, 1), along, kH, kFloor).worst;
      CHECK(r < 2e-2);
      worst = std::max(worst, r);
      std::copy(base.begin(), base.end(), m.parameters().begin());
    }
    CHECK(worst < 2e-2);
    CHECK(fd_check(c, dc, loss, kH, kFloor).worst < 2e-2);
  }
}

TEST_CASE("encoder gradient follows the binarization surrogate") {
  auto cfg = tiny(DecoderKind::Transformer);
  cfg.latent_bits = 20;
  Btae m(cfg);
  Rng rng(4);
  for (auto& p : m.parameters()) p *= 3.0f;
  const auto x = randn(8, rng);
  const auto w = randn(8, rng);
  auto trace = m.make_trace();
  m.forward(x, *trace);
  std::vector<float> g(m.parameter_count(), 0.0f), dinput(8);
  m.backward(*trace, w, g, dinput);
  const auto latent = m.latent(*trace);

  std::vector<float> cf(latent.c.begin(), latent.c.end()), g2(m.parameter_count(), 0.0f), dc(cf.size());
  auto t2 = m.make_trace();
  m.forward_from_latent(cf, *t2);
  m.backward_to_latent(*t2, w, g2, dc);

  std::size_t bias = 0;
  for (const auto& t : m.layout().tensors())
    if (t.name == "encoder.out.bias") bias = t.offset;
  int checked = 0;
  for (std::size_t i = 0; i < cf.size(); ++i) {
    if (std::abs(dc[i]) < 1e-6f) continue;
    const double ratio = static_cast<double>(g[bias + i]) / dc[i];
    const double t = std::tanh(static_cast<double>(latent.y[i]));
    CHECK(std::abs(ratio - (1.0 - t * t)) <= 1e-4);
    ++checked;
  }
  CHECK(checked >= 15);
  for (float v : dinput) CHECK(std::isfinite(v));
}

TEST_CASE("input gradient is finite for random inputs") {
  Rng rng(5);
  for (auto kind : {DecoderKind::Transformer, DecoderKind::Ffn, DecoderKind::Rnn}) {
    Btae m(tiny(kind));
    auto trace = m.make_trace();
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = randn(8, rng, 10.0);
      const auto xhat = m.forward(x, *trace);
      std::vector<float> dx(8), g(m.parameter_count(), 0.0f), din(8);
      for (std::size_t i = 0; i < 8; ++i) dx[i] = 2.0f * (xhat[i] - x[i]) / 8.0f;
      m.backward(*trace, dx, g, din);
      for (float v : din) REQUIRE(std::isfinite(v));
      for (float v : g) REQUIRE(std::isfinite(v));
    }
  }
}

TEST_CASE("attention rows sum to one") {
  for (auto rpe : {RpeMode::Off, RpeMode::Literal, RpeMode::Learned}) {
    auto cfg = tiny(DecoderKind::Transformer, rpe);
    cfg.window = 16;
    Btae m(cfg);
    Rng rng(6);
    const auto probs = m.attention_probabilities(signs(cfg.latent_bits, rng), 1);
    REQUIRE(probs.size() == cfg.n_heads * 16 * 16);
    for (std::size_t row = 0; row < cfg.n_heads * 16u; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < 16; ++j) s += probs[row * 16 + j];
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("literal relative term only reweights attention by exp((j - i) / sqrt(d_model))") {
  auto off_cfg = tiny(DecoderKind::Transformer, RpeMode::Off);
  auto lit_cfg = tiny(DecoderKind::Transformer, RpeMode::Literal);
  off_cfg.window = lit_cfg.window = 6;
  Btae off(off_cfg), lit(lit_cfg);
  std::copy(off.parameters().begin(), off.parameters().end(), lit.parameters().begin());
  Rng rng(7);
  const auto c = signs(off_cfg.latent_bits, rng);
  const auto p_off = off.attention_probabilities(c, 0);
  const auto p_lit = lit.attention_probabilities(c, 0);
  const double scale = 1.0 / std::sqrt(8.0);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 6; ++i) {
      double z = 0;
      for (std::size_t j = 0; j < 6; ++j)
        z += p_off[(h * 6 + i) * 6 + j] * std::exp((static_cast<double>(j) - static_cast<double>(i)) * scale);
      for (std::size_t j = 0; j < 6; ++j) {
        const double want =
            p_off[(h * 6 + i) * 6 + j] * std::exp((static_cast<double>(j) - static_cast<double>(i)) * scale) / z;
        CHECK(p_lit[(h * 6 + i) * 6 + j] == doctest::Approx(want).epsilon(1e-5));
      }
    }
  CHECK(off.decode(c) != lit.decode(c));
}

TEST_CASE("learned relative embedding at zero equals no relative term") {
  Btae off(tiny(DecoderKind::Transformer, RpeMode::Off));
  Btae learned(tiny(DecoderKind::Transformer, RpeMode::Learned));
  for (auto group : {nn::Group::Encoder, nn::Group::DecoderOutput}) learned.copy_group_from(off, group);
  for (const auto& t : learned.layout().tensors()) {
    auto dst = learned.parameters().subspan(t.offset, t.size);
    if (t.name.find("rel_embed") != std::string::npos) {
      std::fill(dst.begin(), dst.end(), 0.0f);
      continue;
    }
    if (t.group != nn::Group::DecoderCore) continue;
    for (const auto& o : off.layout().tensors())
      if (o.name == t.name) std::copy_n(off.parameters().begin() + o.offset, t.size, dst.begin());
  }
  Rng rng(8);
  const auto c = signs(6, rng);
  CHECK(off.decode(c) == learned.decode(c));
}

TEST_CASE("decoder serialization") {
  for (auto kind : {DecoderKind::Transformer, DecoderKind::Ffn, DecoderKind::Rnn}) {
    Btae m(tiny(kind, kind == DecoderKind::Transformer ? RpeMode::Learned : RpeMode::Off));
    const auto bytes = m.serialize_decoder();
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "DDM1");
    const auto loaded = Btae::load_decoder(bytes);
    CHECK(loaded.config() == m.config());
    CHECK(loaded.serialize_decoder() == bytes);

    Btae half = m;
    half.round_decoder_to_half();
    Rng rng(9);
    for (int i = 0; i < 5; ++i) {
      const auto c = signs(6, rng);
      CHECK(loaded.decode(c) == half.decode(c));
    }

    auto tampered = bytes;
    tampered[bytes.size() / 2] ^= 1;
    CHECK_THROWS(Btae::load_decoder(tampered));
    auto truncated = bytes;
    truncated.resize(bytes.size() - 10);
    CHECK_THROWS(Btae::load_decoder(truncated));
    auto wrong_version = bytes;
    wrong_version[4] = 9;
    CHECK_THROWS(Btae::load_decoder(wrong_version));
  }
}

TEST_CASE("declared parameter count must match") {
  Btae m(tiny(DecoderKind::Ffn));
  auto bytes = m.serialize_decoder();
  // Declared count sits after magic (4), version (2) and the 31-byte config block. Bump it and
  // re-seal the checksum so only the count disagrees with the config.
  bytes[37] += 1;
  Bytes body(bytes.begin(), bytes.end() - 4);
  ByteWriter w;
  w.bytes(body);
  w.u32(crc32(body));
  CHECK_THROWS_AS(Btae::load_decoder(std::move(w).take()), FormatError);
}

TEST_CASE("full model round trip") {
  Btae m(tiny(DecoderKind::Transformer, RpeMode::Literal));
  const auto bytes = m.serialize_full();
  const auto back = Btae::load_full(bytes);
  CHECK(std::equal(m.parameters().begin(), m.parameters().end(), back.parameters().begin()));
  CHECK(back.serialize_full() == bytes);
}

TEST_CASE("group copy and reinitialization") {
  auto cfg = tiny(DecoderKind::Transformer);
  Btae a(cfg);
  cfg.channels = 3;
  cfg.seed = 99;
  Btae b(cfg);
  b.copy_group_from(a, nn::Group::DecoderCore);
  for (const auto& t : b.layout().tensors())
    if (t.group == nn::Group::DecoderCore)
      for (const auto& o : a.layout().tensors())
        if (o.name == t.name)
          CHECK(std::equal(a.parameters().begin() + o.offset, a.parameters().begin() + o.offset + o.size,
                           b.parameters().begin() + t.offset));
  CHECK_THROWS_AS(b.copy_group_from(a, nn::Group::DecoderOutput), ArgumentError);

  Btae c(tiny(DecoderKind::Ffn));
  const std::vector<float> before(c.parameters().begin(), c.parameters().end());
  c.reinitialize(nn::Group::Encoder, 1234);
  for (const auto& t : c.layout().tensors()) {
    const bool same = std::equal(before.begin() + t.offset, before.begin() + t.offset + t.size,
                                 c.parameters().begin() + t.offset);
    if (t.group == nn::Group::Encoder && t.size > 1) CHECK_FALSE(same);
    if (t.group != nn::Group::Encoder) CHECK(same);
  }
}
