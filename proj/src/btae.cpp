#include "ebtc/btae.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ebtc/error.hpp"
#include "ebtc/half.hpp"

namespace ebtc {

using nn::Group;

namespace {

constexpr std::uint16_t kModelVersion = 1;
constexpr char kDecoderMagic[] = "DDM1";
constexpr char kFullMagic[] = "DDF1";

bool is_decoder(Group g) { return g == Group::DecoderCore || g == Group::DecoderOutput; }

void add_into(float* dst, const float* src, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace

DecoderKind decoder_kind_from_string(const std::string& s) {
  if (s == "transformer") return DecoderKind::Transformer;
  if (s == "ffn") return DecoderKind::Ffn;
  if (s == "rnn") return DecoderKind::Rnn;
  throw ArgumentError("unknown decoder kind '" + s + "' (expected transformer, ffn or rnn)");
}

std::string to_string(DecoderKind kind) {
  switch (kind) {
    case DecoderKind::Transformer: return "transformer";
    case DecoderKind::Ffn: return "ffn";
    case DecoderKind::Rnn: return "rnn";
  }
  return "unknown";
}

void ModelConfig::validate() const {
  if (latent_bits == 0) throw ArgumentError("latent_bits must be >= 1");
  if (window == 0) throw ArgumentError("window must be >= 1");
  if (channels == 0) throw ArgumentError("channels must be >= 1");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    throw ArgumentError("d_model must be a positive multiple of n_heads");
  if (ffn_hidden == 0) throw ArgumentError("ffn_hidden must be >= 1");
  if (static_cast<std::uint8_t>(activation) != 0) throw ArgumentError("unsupported activation");
  if (static_cast<std::uint8_t>(decoder_kind) > 2) throw ArgumentError("unknown decoder kind");
  if (static_cast<std::uint8_t>(rpe) > 2) throw ArgumentError("unknown rpe mode");
  if (decoder_kind == DecoderKind::Transformer && d_model % 2 != 0)
    throw ArgumentError("d_model must be even for sinusoidal positions");
}

std::int8_t binarize(float y) { return y >= 0.0f ? 1 : -1; }

float binarize_grad(float y) {
  const float t = std::tanh(y);
  return 1.0f - t * t;
}

PositionalEncodings build_positional(std::size_t window, std::size_t d_model) {
  if (window == 0) throw ArgumentError("positional encodings need window >= 1");
  if (d_model == 0 || d_model % 2 != 0) throw ArgumentError("positional encodings need an even d_model");
  PositionalEncodings pe;
  pe.window = window;
  pe.d_model = d_model;
  pe.ape.resize(window * d_model);
  pe.rpe.resize(window * window);
  for (std::size_t pos = 0; pos < window; ++pos) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double freq = std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      const double angle = static_cast<double>(pos) / freq;
      pe.ape[pos * d_model + 2 * i] = static_cast<float>(std::sin(angle));
      pe.ape[pos * d_model + 2 * i + 1] = static_cast<float>(std::cos(angle));
    }
    for (std::size_t j = 0; j < window; ++j)
      pe.rpe[pos * window + j] = static_cast<float>(static_cast<double>(j) - static_cast<double>(pos));
  }
  return pe;
}

// ---------------------------------------------------------------------------------------------
// Activation cache

struct BlockTrace {
  std::vector<float> z_in, ln1_y, ln1_hat, ln1_rstd, q, k, v, probs, ctx, z_mid, ln2_y, ln2_hat, ln2_rstd, f_pre,
      f_act;
};

struct Trace {
  std::vector<float> input;
  std::vector<std::vector<float>> enc_pre, enc_act;
  LatentCode latent;
  std::vector<float> c;  // latent as floats fed to the decoder

  // transformer
  std::vector<float> lift_pre, lift_act, cprime, z0;
  std::vector<BlockTrace> blocks;
  std::vector<float> z_final, out_pre, out_act;
  // ffn
  std::vector<float> h1_pre, h1_act, h2_pre, h2_act;
  // rnn: u is window x input, h is (window+1) x hidden, gates window x 3 hidden
  std::vector<float> u, h, gi, gh, gr, gz, gn;

  std::vector<float> xhat;
};

void TraceDeleter::operator()(Trace* t) const { delete t; }

// ---------------------------------------------------------------------------------------------

Btae::Btae(const ModelConfig& config) : config_(config) {
  config_.validate();
  build_layout();
  params_.assign(layout_.total(), 0.0f);
  initialize(config_.seed);
}

void Btae::build_layout() {
  const std::size_t l = config_.window;
  const std::size_t d = config_.channels;
  const std::size_t dm = config_.d_model;
  const std::size_t hid = config_.ffn_hidden;
  const std::size_t nc = config_.latent_bits;

  std::size_t in = l * d;
  for (std::size_t i = 0; i < config_.n_encoder_layers; ++i) {
    encoder_.hidden.push_back(nn::Linear::create(layout_, "encoder." + std::to_string(i), in, hid, Group::Encoder));
    in = hid;
  }
  encoder_.out = nn::Linear::create(layout_, "encoder.out", in, nc, Group::Encoder);

  switch (config_.decoder_kind) {
    case DecoderKind::Transformer: {
      auto& td = transformer_;
      td.lift1 = nn::Linear::create(layout_, "lift.0", nc, hid, Group::DecoderCore);
      td.lift2 = nn::Linear::create(layout_, "lift.1", hid, dm, Group::DecoderCore);
      const std::size_t head_dim = dm / config_.n_heads;
      for (std::size_t b = 0; b < config_.n_decoder_blocks; ++b) {
        const std::string p = "block." + std::to_string(b);
        Block blk;
        blk.ln1 = nn::LayerNorm::create(layout_, p + ".ln1", dm, Group::DecoderCore);
        blk.q = nn::Linear::create(layout_, p + ".q", dm, dm, Group::DecoderCore);
        blk.k = nn::Linear::create(layout_, p + ".k", dm, dm, Group::DecoderCore);
        blk.v = nn::Linear::create(layout_, p + ".v", dm, dm, Group::DecoderCore);
        blk.o = nn::Linear::create(layout_, p + ".o", dm, dm, Group::DecoderCore);
        if (config_.rpe == RpeMode::Learned)
          blk.rel_embed = layout_.add(p + ".rel_embed", (2 * l - 1) * head_dim, Group::DecoderCore, nn::Init::Uniform,
                                      1.0f / std::sqrt(static_cast<float>(head_dim)));
        blk.ln2 = nn::LayerNorm::create(layout_, p + ".ln2", dm, Group::DecoderCore);
        blk.ff1 = nn::Linear::create(layout_, p + ".ff1", dm, hid, Group::DecoderCore);
        blk.ff2 = nn::Linear::create(layout_, p + ".ff2", hid, dm, Group::DecoderCore);
        td.blocks.push_back(blk);
      }
      td.out1 = nn::Linear::create(layout_, "out.0", dm, hid, Group::DecoderOutput);
      td.out2 = nn::Linear::create(layout_, "out.1", hid, d, Group::DecoderOutput);
      positional_ = build_positional(l, dm);
      break;
    }
    case DecoderKind::Ffn:
      ffn_.l1 = nn::Linear::create(layout_, "ffn.0", nc, hid, Group::DecoderCore);
      ffn_.l2 = nn::Linear::create(layout_, "ffn.1", hid, hid, Group::DecoderCore);
      ffn_.l3 = nn::Linear::create(layout_, "ffn.2", hid, l * d, Group::DecoderOutput);
      break;
    case DecoderKind::Rnn:
      rnn_.input = nc + d;
      rnn_.hidden = dm;
      rnn_.wi = nn::Linear::create(layout_, "gru.input", rnn_.input, 3 * dm, Group::DecoderCore);
      rnn_.wh = nn::Linear::create(layout_, "gru.hidden", dm, 3 * dm, Group::DecoderCore);
      rnn_.out = nn::Linear::create(layout_, "gru.out", dm, d, Group::DecoderOutput);
      break;
  }
}

void Btae::initialize(std::uint64_t seed, const Group* only) {
  const auto& tensors = layout_.tensors();
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const auto& info = tensors[t];
    if (only != nullptr && info.group != *only) continue;
    // Each tensor gets its own stream so re-initializing one group leaves the others untouched.
    std::uint64_t state = seed * 0x9e3779b97f4a7c15ull + (t + 1) * 0xd1b54a32d192ed03ull;
    float* dst = params_.data() + info.offset;
    for (std::size_t i = 0; i < info.size; ++i) {
      switch (info.init) {
        case nn::Init::Uniform: dst[i] = nn::uniform_symmetric(state, info.bound); break;
        case nn::Init::Ones: dst[i] = 1.0f; break;
        case nn::Init::Zeros: dst[i] = 0.0f; break;
      }
    }
  }
}

std::size_t Btae::parameter_count(Group group) const {
  std::size_t n = 0;
  for (const auto& t : layout_.tensors())
    if (t.group == group) n += t.size;
  return n;
}

std::size_t Btae::decoder_parameter_count() const {
  return parameter_count(Group::DecoderCore) + parameter_count(Group::DecoderOutput);
}

void Btae::reinitialize(Group group, std::uint64_t seed) { initialize(seed, &group); }

void Btae::copy_group_from(const Btae& other, Group group) {
  const auto& mine = layout_.tensors();
  const auto& theirs = other.layout_.tensors();
  for (const auto& t : mine) {
    if (t.group != group) continue;
    const auto it = std::find_if(theirs.begin(), theirs.end(), [&](const nn::TensorInfo& o) { return o.name == t.name; });
    if (it == theirs.end() || it->size != t.size)
      throw ArgumentError("cannot copy tensor '" + t.name + "': missing or differently shaped in source model");
    std::copy_n(other.params_.begin() + static_cast<std::ptrdiff_t>(it->offset), t.size,
                params_.begin() + static_cast<std::ptrdiff_t>(t.offset));
  }
}

void Btae::round_decoder_to_half() {
  for (const auto& t : layout_.tensors())
    if (is_decoder(t.group))
      for (std::size_t i = 0; i < t.size; ++i) params_[t.offset + i] = round_to_half(params_[t.offset + i]);
}

// ---------------------------------------------------------------------------------------------
// Forward

TracePtr Btae::make_trace() const {
  TracePtr t(new Trace);
  const std::size_t l = config_.window;
  const std::size_t d = config_.channels;
  const std::size_t dm = config_.d_model;
  const std::size_t hid = config_.ffn_hidden;
  t->input.resize(l * d);
  for (const auto& layer : encoder_.hidden) {
    t->enc_pre.emplace_back(layer.out);
    t->enc_act.emplace_back(layer.out);
  }
  t->latent.y.resize(config_.latent_bits);
  t->latent.c.resize(config_.latent_bits);
  t->c.resize(config_.latent_bits);
  t->xhat.resize(l * d);
  switch (config_.decoder_kind) {
    case DecoderKind::Transformer: {
      t->lift_pre.resize(hid);
      t->lift_act.resize(hid);
      t->cprime.resize(dm);
      t->z0.resize(l * dm);
      t->blocks.resize(transformer_.blocks.size());
      for (auto& b : t->blocks) {
        for (auto* v : {&b.z_in, &b.ln1_y, &b.ln1_hat, &b.q, &b.k, &b.v, &b.ctx, &b.z_mid, &b.ln2_y, &b.ln2_hat})
          v->resize(l * dm);
        b.ln1_rstd.resize(l);
        b.ln2_rstd.resize(l);
        b.probs.resize(config_.n_heads * l * l);
        b.f_pre.resize(l * hid);
        b.f_act.resize(l * hid);
      }
      t->z_final.resize(l * dm);
      t->out_pre.resize(l * hid);
      t->out_act.resize(l * hid);
      break;
    }
    case DecoderKind::Ffn:
      for (auto* v : {&t->h1_pre, &t->h1_act, &t->h2_pre, &t->h2_act}) v->resize(hid);
      break;
    case DecoderKind::Rnn:
      t->u.resize(l * rnn_.input);
      t->h.resize((l + 1) * rnn_.hidden);
      for (auto* v : {&t->gi, &t->gh}) v->resize(l * 3 * rnn_.hidden);
      for (auto* v : {&t->gr, &t->gz, &t->gn}) v->resize(l * rnn_.hidden);
      break;
  }
  return t;
}

void Btae::block_forward(const Block& blk, const float* p, Trace& t, std::size_t index) const {
  const std::size_t l = config_.window;
  const std::size_t dm = config_.d_model;
  const std::size_t heads = config_.n_heads;
  const std::size_t hd = dm / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dm));
  BlockTrace& bt = t.blocks[index];

  nn::layernorm_forward(blk.ln1, p, bt.z_in.data(), l, bt.ln1_y.data(), bt.ln1_hat.data(), bt.ln1_rstd.data());
  nn::linear_forward(blk.q, p, bt.ln1_y.data(), l, bt.q.data());
  nn::linear_forward(blk.k, p, bt.ln1_y.data(), l, bt.k.data());
  nn::linear_forward(blk.v, p, bt.ln1_y.data(), l, bt.v.data());

  const float* rel = config_.rpe == RpeMode::Learned ? p + blk.rel_embed : nullptr;
  std::fill(bt.ctx.begin(), bt.ctx.end(), 0.0f);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < l; ++i) {
      float* row = bt.probs.data() + (h * l + i) * l;
      const float* qi = bt.q.data() + i * dm + off;
      for (std::size_t j = 0; j < l; ++j) {
        const float* kj = bt.k.data() + j * dm + off;
        float s = 0.0f;
        for (std::size_t e = 0; e < hd; ++e) s += qi[e] * kj[e];
        if (config_.rpe == RpeMode::Literal) {
          s += positional_.rpe[i * l + j];
        } else if (rel != nullptr) {
          const float* er = rel + (j + l - 1 - i) * hd;
          for (std::size_t e = 0; e < hd; ++e) s += qi[e] * er[e];
        }
        row[j] = s * scale;
      }
      nn::softmax_row(row, l);
      float* ci = bt.ctx.data() + i * dm + off;
      for (std::size_t j = 0; j < l; ++j) {
        const float pij = row[j];
        const float* vj = bt.v.data() + j * dm + off;
        for (std::size_t e = 0; e < hd; ++e) ci[e] += pij * vj[e];
      }
    }
  }

  nn::linear_forward(blk.o, p, bt.ctx.data(), l, bt.z_mid.data());
  add_into(bt.z_mid.data(), bt.z_in.data(), l * dm);

  nn::layernorm_forward(blk.ln2, p, bt.z_mid.data(), l, bt.ln2_y.data(), bt.ln2_hat.data(), bt.ln2_rstd.data());
  nn::linear_forward(blk.ff1, p, bt.ln2_y.data(), l, bt.f_pre.data());
  nn::gelu_forward(bt.f_pre.data(), bt.f_pre.size(), bt.f_act.data());
  std::vector<float>& z_out = index + 1 < t.blocks.size() ? t.blocks[index + 1].z_in : t.z_final;
  nn::linear_forward(blk.ff2, p, bt.f_act.data(), l, z_out.data());
  add_into(z_out.data(), bt.z_mid.data(), l * dm);
}

void Btae::decode_forward(const float* c, Trace& t) const {
  const float* p = params_.data();
  const std::size_t l = config_.window;
  const std::size_t d = config_.channels;
  const std::size_t dm = config_.d_model;
  const std::size_t hid = config_.ffn_hidden;
  switch (config_.decoder_kind) {
    case DecoderKind::Transformer: {
      const auto& td = transformer_;
      nn::linear_forward(td.lift1, p, c, 1, t.lift_pre.data());
      nn::gelu_forward(t.lift_pre.data(), hid, t.lift_act.data());
      nn::linear_forward(td.lift2, p, t.lift_act.data(), 1, t.cprime.data());
      std::vector<float>& z = td.blocks.empty() ? t.z_final : t.blocks[0].z_in;
      for (std::size_t pos = 0; pos < l; ++pos)
        for (std::size_t i = 0; i < dm; ++i) z[pos * dm + i] = t.cprime[i] + positional_.ape[pos * dm + i];
      for (std::size_t b = 0; b < td.blocks.size(); ++b) block_forward(td.blocks[b], p, t, b);
      nn::linear_forward(td.out1, p, t.z_final.data(), l, t.out_pre.data());
      nn::gelu_forward(t.out_pre.data(), t.out_pre.size(), t.out_act.data());
      nn::linear_forward(td.out2, p, t.out_act.data(), l, t.xhat.data());
      break;
    }
    case DecoderKind::Ffn:
      nn::linear_forward(ffn_.l1, p, c, 1, t.h1_pre.data());
      nn::gelu_forward(t.h1_pre.data(), hid, t.h1_act.data());
      nn::linear_forward(ffn_.l2, p, t.h1_act.data(), 1, t.h2_pre.data());
      nn::gelu_forward(t.h2_pre.data(), hid, t.h2_act.data());
      nn::linear_forward(ffn_.l3, p, t.h2_act.data(), 1, t.xhat.data());
      break;
    case DecoderKind::Rnn: {
      const std::size_t in = rnn_.input;
      const std::size_t H = rnn_.hidden;
      const std::size_t nc = config_.latent_bits;
      std::fill(t.u.begin(), t.u.end(), 0.0f);
      std::fill(t.h.begin(), t.h.begin() + static_cast<std::ptrdiff_t>(H), 0.0f);
      std::copy(c, c + nc, t.u.begin());
      for (std::size_t s = 0; s < l; ++s) {
        float* u = t.u.data() + s * in;
        if (s > 0) std::copy_n(t.xhat.data() + (s - 1) * d, d, u + nc);
        const float* hprev = t.h.data() + s * H;
        float* hnext = t.h.data() + (s + 1) * H;
        float* gi = t.gi.data() + s * 3 * H;
        float* gh = t.gh.data() + s * 3 * H;
        nn::linear_forward(rnn_.wi, p, u, 1, gi);
        nn::linear_forward(rnn_.wh, p, hprev, 1, gh);
        for (std::size_t k = 0; k < H; ++k) {
          const float r = nn::sigmoid(gi[k] + gh[k]);
          const float zg = nn::sigmoid(gi[H + k] + gh[H + k]);
          const float n = std::tanh(gi[2 * H + k] + r * gh[2 * H + k]);
          t.gr[s * H + k] = r;
          t.gz[s * H + k] = zg;
          t.gn[s * H + k] = n;
          hnext[k] = (1.0f - zg) * n + zg * hprev[k];
        }
        nn::linear_forward(rnn_.out, p, hnext, 1, t.xhat.data() + s * d);
      }
      break;
    }
  }
}

std::span<const float> Btae::forward(std::span<const float> window, Trace& t) const {
  if (window.size() != static_cast<std::size_t>(config_.window) * config_.channels)
    throw ArgumentError("window has " + std::to_string(window.size()) + " values, model expects " +
                        std::to_string(config_.window * config_.channels));
  const float* p = params_.data();
  std::copy(window.begin(), window.end(), t.input.begin());
  const float* act = t.input.data();
  for (std::size_t i = 0; i < encoder_.hidden.size(); ++i) {
    nn::linear_forward(encoder_.hidden[i], p, act, 1, t.enc_pre[i].data());
    nn::gelu_forward(t.enc_pre[i].data(), t.enc_pre[i].size(), t.enc_act[i].data());
    act = t.enc_act[i].data();
  }
  nn::linear_forward(encoder_.out, p, act, 1, t.latent.y.data());
  for (std::size_t i = 0; i < t.latent.y.size(); ++i) {
    t.latent.c[i] = binarize(t.latent.y[i]);
    t.c[i] = static_cast<float>(t.latent.c[i]);
  }
  decode_forward(t.c.data(), t);
  return t.xhat;
}

std::span<const float> Btae::forward_from_latent(std::span<const float> c, Trace& t) const {
  if (c.size() != config_.latent_bits) throw ArgumentError("latent size mismatch");
  std::copy(c.begin(), c.end(), t.c.begin());
  decode_forward(t.c.data(), t);
  return t.xhat;
}

const LatentCode& Btae::latent(const Trace& trace) const { return trace.latent; }

LatentCode Btae::encode(std::span<const float> window) const {
  if (window.size() != static_cast<std::size_t>(config_.window) * config_.channels)
    throw ArgumentError("window has " + std::to_string(window.size()) + " values, model expects " +
                        std::to_string(config_.window * config_.channels));
  const float* p = params_.data();
  std::vector<float> act(window.begin(), window.end());
  std::vector<float> next;
  for (const auto& layer : encoder_.hidden) {
    next.assign(layer.out, 0.0f);
    nn::linear_forward(layer, p, act.data(), 1, next.data());
    nn::gelu_forward(next.data(), next.size(), next.data());
    act.swap(next);
  }
  LatentCode code;
  code.y.resize(config_.latent_bits);
  nn::linear_forward(encoder_.out, p, act.data(), 1, code.y.data());
  code.c.resize(code.y.size());
  for (std::size_t i = 0; i < code.y.size(); ++i) code.c[i] = binarize(code.y[i]);
  return code;
}

std::span<const float> Btae::decode(std::span<const std::int8_t> c, Trace& trace) const {
  if (c.size() != config_.latent_bits)
    throw ArgumentError("latent has " + std::to_string(c.size()) + " bits, model expects " +
                        std::to_string(config_.latent_bits));
  for (std::size_t i = 0; i < c.size(); ++i) trace.c[i] = static_cast<float>(c[i]);
  decode_forward(trace.c.data(), trace);
  return trace.xhat;
}

std::vector<float> Btae::decode(std::span<const std::int8_t> c) const {
  auto trace = make_trace();
  const auto out = decode(c, *trace);
  return {out.begin(), out.end()};
}

std::vector<float> Btae::attention_probabilities(std::span<const std::int8_t> c, std::size_t block) const {
  if (config_.decoder_kind != DecoderKind::Transformer || block >= transformer_.blocks.size())
    throw ArgumentError("no such attention block");
  auto t = make_trace();
  std::vector<float> cf(c.begin(), c.end());
  decode_forward(cf.data(), *t);
  return t->blocks[block].probs;
}

// ---------------------------------------------------------------------------------------------
// Backward

void Btae::block_backward(const Block& blk, const float* p, Trace& t, std::size_t index, float* dz, float* g) const {
  const std::size_t l = config_.window;
  const std::size_t dm = config_.d_model;
  const std::size_t hid = config_.ffn_hidden;
  const std::size_t heads = config_.n_heads;
  const std::size_t hd = dm / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dm));
  BlockTrace& bt = t.blocks[index];

  // Feed-forward sublayer: z_out = z_mid + ff2(gelu(ff1(ln2(z_mid)))).
  std::vector<float> d_act(l * hid), d_ln(l * dm), tmp(l * dm);
  nn::linear_backward(blk.ff2, p, bt.f_act.data(), dz, l, d_act.data(), g);
  nn::gelu_backward(bt.f_pre.data(), d_act.data(), d_act.size(), d_act.data());
  nn::linear_backward(blk.ff1, p, bt.ln2_y.data(), d_act.data(), l, d_ln.data(), g);
  nn::layernorm_backward(blk.ln2, p, bt.ln2_hat.data(), bt.ln2_rstd.data(), d_ln.data(), l, tmp.data(), g);
  add_into(dz, tmp.data(), l * dm);  // dz is now d z_mid

  // Attention sublayer: z_mid = z_in + o(attn(ln1(z_in))).
  std::vector<float> dctx(l * dm), dq(l * dm, 0.0f), dk(l * dm, 0.0f), dv(l * dm, 0.0f), dp(l);
  nn::linear_backward(blk.o, p, bt.ctx.data(), dz, l, dctx.data(), g);
  const float* rel = config_.rpe == RpeMode::Learned ? p + blk.rel_embed : nullptr;
  float* grel = config_.rpe == RpeMode::Learned ? g + blk.rel_embed : nullptr;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < l; ++i) {
      const float* row = bt.probs.data() + (h * l + i) * l;
      const float* dci = dctx.data() + i * dm + off;
      float dot = 0.0f;
      for (std::size_t j = 0; j < l; ++j) {
        const float* vj = bt.v.data() + j * dm + off;
        float* dvj = dv.data() + j * dm + off;
        float s = 0.0f;
        for (std::size_t e = 0; e < hd; ++e) {
          s += dci[e] * vj[e];
          dvj[e] += row[j] * dci[e];
        }
        dp[j] = s;
        dot += s * row[j];
      }
      const float* qi = bt.q.data() + i * dm + off;
      float* dqi = dq.data() + i * dm + off;
      for (std::size_t j = 0; j < l; ++j) {
        const float dl = row[j] * (dp[j] - dot) * scale;
        const float* kj = bt.k.data() + j * dm + off;
        float* dkj = dk.data() + j * dm + off;
        for (std::size_t e = 0; e < hd; ++e) {
          dqi[e] += dl * kj[e];
          dkj[e] += dl * qi[e];
        }
        if (rel != nullptr) {
          const std::size_t r = j + l - 1 - i;
          const float* er = rel + r * hd;
          float* ger = grel + r * hd;
          for (std::size_t e = 0; e < hd; ++e) {
            dqi[e] += dl * er[e];
            ger[e] += dl * qi[e];
          }
        }
      }
    }
  }
  std::vector<float> d_ln1(l * dm);
  nn::linear_backward(blk.q, p, bt.ln1_y.data(), dq.data(), l, d_ln1.data(), g);
  nn::linear_backward(blk.k, p, bt.ln1_y.data(), dk.data(), l, tmp.data(), g);
  add_into(d_ln1.data(), tmp.data(), l * dm);
  nn::linear_backward(blk.v, p, bt.ln1_y.data(), dv.data(), l, tmp.data(), g);
  add_into(d_ln1.data(), tmp.data(), l * dm);
  nn::layernorm_backward(blk.ln1, p, bt.ln1_hat.data(), bt.ln1_rstd.data(), d_ln1.data(), l, tmp.data(), g);
  add_into(dz, tmp.data(), l * dm);  // dz is now d z_in
}

void Btae::decode_backward(Trace& t, const float* dxhat, float* g, float* dc) const {
  const float* p = params_.data();
  const std::size_t l = config_.window;
  const std::size_t d = config_.channels;
  const std::size_t dm = config_.d_model;
  const std::size_t hid = config_.ffn_hidden;
  switch (config_.decoder_kind) {
    case DecoderKind::Transformer: {
      const auto& td = transformer_;
      std::vector<float> d_act(l * hid), dz(l * dm);
      nn::linear_backward(td.out2, p, t.out_act.data(), dxhat, l, d_act.data(), g);
      nn::gelu_backward(t.out_pre.data(), d_act.data(), d_act.size(), d_act.data());
      nn::linear_backward(td.out1, p, t.z_final.data(), d_act.data(), l, dz.data(), g);
      for (std::size_t b = td.blocks.size(); b-- > 0;) block_backward(td.blocks[b], p, t, b, dz.data(), g);
      std::vector<float> dcp(dm, 0.0f), dl(hid);
      for (std::size_t pos = 0; pos < l; ++pos)
        for (std::size_t i = 0; i < dm; ++i) dcp[i] += dz[pos * dm + i];
      nn::linear_backward(td.lift2, p, t.lift_act.data(), dcp.data(), 1, dl.data(), g);
      nn::gelu_backward(t.lift_pre.data(), dl.data(), hid, dl.data());
      nn::linear_backward(td.lift1, p, t.c.data(), dl.data(), 1, dc, g);
      break;
    }
    case DecoderKind::Ffn: {
      std::vector<float> d2(hid), d1(hid);
      nn::linear_backward(ffn_.l3, p, t.h2_act.data(), dxhat, 1, d2.data(), g);
      nn::gelu_backward(t.h2_pre.data(), d2.data(), hid, d2.data());
      nn::linear_backward(ffn_.l2, p, t.h1_act.data(), d2.data(), 1, d1.data(), g);
      nn::gelu_backward(t.h1_pre.data(), d1.data(), hid, d1.data());
      nn::linear_backward(ffn_.l1, p, t.c.data(), d1.data(), 1, dc, g);
      break;
    }
    case DecoderKind::Rnn: {
      const std::size_t in = rnn_.input;
      const std::size_t H = rnn_.hidden;
      const std::size_t nc = config_.latent_bits;
      std::vector<float> dh_next(H, 0.0f), dh(H), dgi(3 * H), dgh(3 * H), du(in), du_next(in, 0.0f), dx(d),
          dhp(H);
      for (std::size_t s = l; s-- > 0;) {
        for (std::size_t k = 0; k < d; ++k) dx[k] = dxhat[s * d + k] + (s + 1 < l ? du_next[nc + k] : 0.0f);
        const float* hprev = t.h.data() + s * H;
        const float* hnext = t.h.data() + (s + 1) * H;
        nn::linear_backward(rnn_.out, p, hnext, dx.data(), 1, dh.data(), g);
        add_into(dh.data(), dh_next.data(), H);
        const float* gh = t.gh.data() + s * 3 * H;
        for (std::size_t k = 0; k < H; ++k) {
          const float r = t.gr[s * H + k];
          const float zg = t.gz[s * H + k];
          const float n = t.gn[s * H + k];
          const float dn = dh[k] * (1.0f - zg);
          const float dzg = dh[k] * (hprev[k] - n);
          dh_next[k] = dh[k] * zg;
          const float dpre_n = dn * (1.0f - n * n);
          const float dr = dpre_n * gh[2 * H + k];
          const float dpre_r = dr * r * (1.0f - r);
          const float dpre_z = dzg * zg * (1.0f - zg);
          dgi[k] = dpre_r;
          dgi[H + k] = dpre_z;
          dgi[2 * H + k] = dpre_n;
          dgh[k] = dpre_r;
          dgh[H + k] = dpre_z;
          dgh[2 * H + k] = dpre_n * r;
        }
        nn::linear_backward(rnn_.wi, p, t.u.data() + s * in, dgi.data(), 1, du.data(), g);
        nn::linear_backward(rnn_.wh, p, hprev, dgh.data(), 1, dhp.data(), g);
        add_into(dh_next.data(), dhp.data(), H);
        du_next.swap(du);
      }
      // du_next now holds d u_0, whose first nc entries are the latent.
      std::copy_n(du_next.begin(), nc, dc);
      break;
    }
  }
}

void Btae::backward(Trace& t, std::span<const float> dxhat, std::span<float> grad, std::span<float> dinput) const {
  if (grad.size() != params_.size()) throw ArgumentError("gradient buffer size mismatch");
  if (dxhat.size() != t.xhat.size()) throw ArgumentError("output gradient size mismatch");
  const float* p = params_.data();
  float* g = grad.data();
  std::vector<float> dc(config_.latent_bits);
  decode_backward(t, dxhat.data(), g, dc.data());

  std::vector<float> dy(config_.latent_bits);
  for (std::size_t i = 0; i < dy.size(); ++i) dy[i] = dc[i] * binarize_grad(t.latent.y[i]);

  std::vector<float> da, dnext;
  const std::size_t n_hidden = encoder_.hidden.size();
  const float* last_act = n_hidden == 0 ? t.input.data() : t.enc_act.back().data();
  da.resize(encoder_.out.in);
  nn::linear_backward(encoder_.out, p, last_act, dy.data(), 1, da.data(), g);
  for (std::size_t i = n_hidden; i-- > 0;) {
    nn::gelu_backward(t.enc_pre[i].data(), da.data(), da.size(), da.data());
    const float* in = i == 0 ? t.input.data() : t.enc_act[i - 1].data();
    dnext.resize(encoder_.hidden[i].in);
    const bool want_dx = i > 0 || !dinput.empty();
    nn::linear_backward(encoder_.hidden[i], p, in, da.data(), 1, want_dx ? dnext.data() : nullptr, g);
    da.swap(dnext);
  }
  if (!dinput.empty()) {
    if (dinput.size() != t.input.size()) throw ArgumentError("input gradient size mismatch");
    std::copy(da.begin(), da.end(), dinput.begin());
  }
}

void Btae::backward_to_latent(Trace& t, std::span<const float> dxhat, std::span<float> grad,
                              std::span<float> dlatent) const {
  if (grad.size() != params_.size()) throw ArgumentError("gradient buffer size mismatch");
  if (dlatent.size() != config_.latent_bits) throw ArgumentError("latent gradient size mismatch");
  decode_backward(t, dxhat.data(), grad.data(), dlatent.data());
}

// ---------------------------------------------------------------------------------------------
// Serialization

namespace {

void write_config(ByteWriter& w, const ModelConfig& c) {
  w.u16(kModelVersion);
  w.u32(c.latent_bits);
  w.u32(c.window);
  w.u16(c.channels);
  w.u16(c.d_model);
  w.u16(c.n_heads);
  w.u16(c.n_encoder_layers);
  w.u16(c.n_decoder_blocks);
  w.u16(c.ffn_hidden);
  w.u8(static_cast<std::uint8_t>(c.activation));
  w.u8(static_cast<std::uint8_t>(c.decoder_kind));
  w.u8(static_cast<std::uint8_t>(c.rpe));
  w.u64(c.seed);
}

ModelConfig read_config(ByteReader& r) {
  const auto version = r.u16();
  if (version != kModelVersion) throw FormatError("model: unsupported version " + std::to_string(version));
  ModelConfig c;
  c.latent_bits = r.u32();
  c.window = r.u32();
  c.channels = r.u16();
  c.d_model = r.u16();
  c.n_heads = r.u16();
  c.n_encoder_layers = r.u16();
  c.n_decoder_blocks = r.u16();
  c.ffn_hidden = r.u16();
  c.activation = static_cast<Activation>(r.u8());
  c.decoder_kind = static_cast<DecoderKind>(r.u8());
  c.rpe = static_cast<RpeMode>(r.u8());
  c.seed = r.u64();
  try {
    c.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("model: invalid config block: ") + e.what());
  }
  return c;
}

void check_crc(std::span<const std::uint8_t> bytes, const char* what) {
  if (bytes.size() < 4) throw DecodeError(std::string(what) + ": truncated");
  ByteReader tail(bytes.subspan(bytes.size() - 4));
  if (crc32(bytes.first(bytes.size() - 4)) != tail.u32()) throw DecodeError(std::string(what) + ": checksum mismatch");
}

}  // namespace

Bytes Btae::serialize_decoder() const {
  ByteWriter w;
  w.magic(std::string_view(kDecoderMagic, 4));
  write_config(w, config_);
  w.u64(decoder_parameter_count());
  for (const auto& t : layout_.tensors())
    if (is_decoder(t.group))
      for (std::size_t i = 0; i < t.size; ++i) w.u16(float_to_half(params_[t.offset + i]));
  w.u32(crc32(w.data()));
  return std::move(w).take();
}

Btae Btae::load_decoder(std::span<const std::uint8_t> bytes) {
  check_crc(bytes, "decoder");
  ByteReader r(bytes.first(bytes.size() - 4));
  r.expect_magic(std::string_view(kDecoderMagic, 4), "decoder");
  Btae model(read_config(r));
  const auto count = r.u64();
  if (count != model.decoder_parameter_count())
    throw FormatError("decoder: header declares " + std::to_string(count) + " parameters, config implies " +
                      std::to_string(model.decoder_parameter_count()));
  for (const auto& t : model.layout_.tensors())
    if (is_decoder(t.group))
      for (std::size_t i = 0; i < t.size; ++i) model.params_[t.offset + i] = half_to_float(r.u16());
  if (r.remaining() != 0) throw FormatError("decoder: trailing bytes");
  return model;
}

Bytes Btae::serialize_full() const {
  ByteWriter w;
  w.magic(std::string_view(kFullMagic, 4));
  write_config(w, config_);
  w.u64(params_.size());
  for (float v : params_) w.f32(v);
  w.u32(crc32(w.data()));
  return std::move(w).take();
}

Btae Btae::load_full(std::span<const std::uint8_t> bytes) {
  check_crc(bytes, "model");
  ByteReader r(bytes.first(bytes.size() - 4));
  r.expect_magic(std::string_view(kFullMagic, 4), "model");
  Btae model(read_config(r));
  const auto count = r.u64();
  if (count != model.params_.size())
    throw FormatError("model: header declares " + std::to_string(count) + " parameters, config implies " +
                      std::to_string(model.params_.size()));
  for (auto& v : model.params_) v = r.f32();
  if (r.remaining() != 0) throw FormatError("model: trailing bytes");
  return model;
}

}  // namespace ebtc
