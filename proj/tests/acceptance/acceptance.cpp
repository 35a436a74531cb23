// Acceptance checks, one PASS/FAIL line per criterion.
//   acceptance            run every criterion
//   acceptance 1 5        run the listed criteria
// Hidden modes used by the determinism check (separate processes):
//   acceptance --emit <container>
//   acceptance --decode <container> <out.f32>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "ebtc/btae.hpp"
#include "ebtc/codec.hpp"
#include "ebtc/compressor.hpp"
#include "ebtc/qel.hpp"
#include "ebtc/quantizer.hpp"
#include "ebtc/random.hpp"
#include "ebtc/series.hpp"

using namespace ebtc;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double max_abs_err(const TimeSeries& a, const TimeSeries& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    const double e = std::abs(a.values()[i] - b.values()[i]);
    if (!(e <= m)) m = e;  // NaN propagates as a failure
  }
  return m;
}

Bytes read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// 1. Hard error bound over randomized cases, untrained and briefly trained models.

Outcome error_bound() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(20240601);
  const double eps_choices[] = {0.01, 0.1, 1.0};
  int violations = 0, untrained = 0;
  double worst_ratio = 0.0;
  for (int c = 0; c < 100; ++c) {
    const std::size_t d = 1 + rng.below(5);
    const auto n = static_cast<std::size_t>(std::exp(rng.uniform(std::log(1e3), std::log(5e4))));
    const double eps = eps_choices[rng.below(3)];
    const bool walk = c % 2 == 0;
    TimeSeries x = walk ? random_walk(n, d, rng.uniform(0.05, 2.0), 1000 + c) : [&] {
      SyntheticSpec s;
      s.length = n;
      s.channels = d;
      s.segment_len = 32;
      s.seed = 2000 + c;
      s.pattern_pool = c % 3 == 0 ? 8 : 0;
      return synthesize_polynomial(s);
    }();

    CompressOptions o;
    o.eps = eps;
    o.mode = rng.uniform() < 0.5 ? Mode::Multivariate : Mode::Univariate;
    o.prescale = rng.uniform() < 0.5;
    o.model.window = 32;
    o.model.latent_bits = 16 + 16 * static_cast<std::uint32_t>(rng.below(2));
    o.model.decoder_kind = static_cast<DecoderKind>(rng.below(3));
    o.model.rpe = o.model.decoder_kind == DecoderKind::Transformer ? static_cast<RpeMode>(rng.below(3)) : RpeMode::Off;
    o.model.seed = static_cast<std::uint64_t>(c);
    o.train.max_epochs = c % 4 == 0 ? 0 : 1 + rng.below(2);
    o.train.lr = 1e-3;
    o.train.loss = c % 5 == 0 ? LossKind::L1 : LossKind::Qel;
    o.train.seed = static_cast<std::uint64_t>(c);
    if (o.train.max_epochs == 0) ++untrained;

    const auto result = compress(x, o);
    const auto back = decompress(result.container.serialize());
    const double err = max_abs_err(x, back);
    worst_ratio = std::max(worst_ratio, err / eps);
    if (!(err <= eps) || back.length() != x.length() || back.channels() != x.channels()) {
      ++violations;
      std::printf("  case %d: d=%zu n=%zu eps=%g err=%.17g\n", c, d, n, eps, err);
    }
  }
  const double t = seconds_since(t0);
  return {violations == 0 && t <= 600.0,
          fmt("100 cases (%d untrained), violations=%d, worst err/eps=%.6f, %.0fs (limit 600s)", untrained, violations,
              worst_ratio, t)};
}

// 2. Codec losslessness and efficiency.

std::vector<std::int64_t> uniform_stream(std::size_t n, std::int64_t lo, std::int64_t hi, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int64_t> out(n);
  for (auto& s : out) s = lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  return out;
}

std::vector<std::int64_t> geometric_stream(std::size_t n, double p, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int64_t> out(n);
  for (auto& s : out) {
    std::int64_t k = 0;
    while (rng.uniform() > p) ++k;
    s = rng.uniform() < 0.5 ? -k : k;
  }
  return out;
}

std::vector<std::int64_t> zipf_stream(std::size_t n, std::size_t ranks, double exponent, std::uint64_t seed) {
  std::vector<double> cdf(ranks);
  double acc = 0.0;
  for (std::size_t r = 0; r < ranks; ++r) cdf[r] = acc += 1.0 / std::pow(static_cast<double>(r + 1), exponent);
  Rng rng(seed);
  std::vector<std::int64_t> out(n);
  for (auto& s : out) {
    const auto r = static_cast<std::int64_t>(std::lower_bound(cdf.begin(), cdf.end(), rng.uniform() * acc) - cdf.begin());
    s = r % 2 ? -(r + 1) / 2 : r / 2;
  }
  return out;
}

Outcome codec() {
  struct Case {
    std::string name;
    std::vector<std::int64_t> s;
  };
  std::vector<Case> cases;
  for (std::size_t n : {std::size_t{100000}, std::size_t{1000000}}) {
    const auto tag = n == 100000 ? std::string("1e5") : std::string("1e6");
    cases.push_back({"uniform/" + tag, uniform_stream(n, -500, 500, n + 1)});
    cases.push_back({"geometric/" + tag, geometric_stream(n, 0.3, n + 2)});
    cases.push_back({"zipf/" + tag, zipf_stream(n, 1000, 1.1, n + 3)});
    cases.push_back({"constant/" + tag, std::vector<std::int64_t>(n, 42)});
  }
  bool ok = true;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : cases) {
    const auto enc = encode_symbols(c.s);
    const bool lossless = decode_symbols(EncodedStream::parse(enc.serialize())) == c.s;
    const double bits = 8.0 * static_cast<double>(enc.payload.size());
    const double limit = 1.02 * entropy_bound_bits(c.s) + 512.0;
    if (!lossless || bits > limit) {
      ok = false;
      std::printf("  %s: lossless=%d bits=%.0f limit=%.0f\n", c.name.c_str(), lossless, bits, limit);
    }
    if (bits / limit > worst) {
      worst = bits / limit;
      worst_name = c.name;
    }
  }
  return {ok, fmt("8 streams lossless, worst payload/limit=%.4f (%s)", worst, worst_name.c_str())};
}

// 3. QEL gradient against an independent scalar oracle.

double oracle_kernel(double d, double eps, int b, double n) {
  const double a = std::abs(d);
  const double sign = d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0;
  return sign * b / (n * std::pow(eps, b)) * std::pow(a, b - 1) / std::pow(std::pow(a, b) / std::pow(eps, b) + 1.0, 2);
}

std::vector<double> oracle_backward(const std::vector<double>& r, double eps, int b) {
  std::map<std::int64_t, double> counts;
  for (double x : r) {
    const double q = x / (2 * eps);
    counts[static_cast<std::int64_t>(q < 0 ? -std::floor(-q + 0.5) : std::floor(q + 0.5))] += 1;
  }
  const double n = static_cast<double>(r.size());
  std::vector<double> g(r.size(), 0.0);
  for (std::size_t i = 0; i < r.size(); ++i)
    for (const auto& [k, c] : counts) g[i] += (1.0 + std::log(c / n)) * oracle_kernel(r[i] - 2 * eps * k, eps, b, n);
  return g;
}

Outcome qel_oracle() {
  Rng rng(77);
  double worst_kernel = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double eps = std::pow(10.0, rng.uniform(-3.0, 1.0));
    const int b = 2 + static_cast<int>(rng.below(11));
    const double u = rng.uniform(-20.0, 20.0);
    const std::size_t n = 1 + rng.below(1000);
    const double want = oracle_kernel(u * eps, eps, b, static_cast<double>(n));
    const double got = qel_kernel(u * eps, eps, b, n);
    const double scale = std::max(std::abs(want), std::abs(got));
    if (scale > 0) worst_kernel = std::max(worst_kernel, std::abs(got - want) / scale);
  }
  double worst_grad = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const double eps = rng.uniform(0.02, 0.5);
    const int b = 2 + static_cast<int>(rng.below(11));
    std::vector<double> r(200);
    for (auto& x : r) x = rng.uniform(-1.0, 1.0);
    QelParams p;
    p.eps = eps;
    p.b = b;
    const auto got = qel_backward(r, p);
    const auto want = oracle_backward(r, eps, b);
    double scale = 0.0;
    for (double w : want) scale = std::max(scale, std::abs(w));
    for (std::size_t i = 0; i < r.size(); ++i) worst_grad = std::max(worst_grad, std::abs(got[i] - want[i]) / scale);
  }
  bool spots = true;
  for (int b = 2; b <= 12; ++b)
    for (double eps : {0.01, 0.1, 1.0})
      for (std::size_t n : {std::size_t{1}, std::size_t{100}}) {
        spots = spots && qel_kernel(0.0, eps, b, n) == 0.0;
        const double want = b / (4.0 * static_cast<double>(n) * eps);
        spots = spots && std::abs(qel_kernel(eps, eps, b, n) - want) <= 1e-12 * want;
      }
  const bool ok = worst_kernel <= 1e-9 && worst_grad <= 1e-9 && spots;
  return {ok, fmt("kernel rel err %.2e over 1e4 tuples, gradient rel err %.2e, R(0)=0 and R(eps)=b/(4|r|eps): %s",
                  worst_kernel, worst_grad, spots ? "hold" : "FAIL")};
}

// 4. One bounded gradient step lowers the quantized entropy.

Outcome qel_descent() {
  int reduced = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(9000 + seed);
    std::vector<double> r(100);
    for (auto& x : r) x = rng.uniform(-1.0, 1.0);
    QelParams p;
    p.eps = 0.1;
    p.b = 10;
    const auto g = qel_backward(r, p);
    double gmax = 0.0;
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    // Unit step, shortened so no residual moves more than eps / 2.
    const double eta = gmax > 0 ? std::min(1.0, (p.eps / 2) / gmax) : 0.0;
    auto stepped = r;
    for (std::size_t i = 0; i < r.size(); ++i) stepped[i] -= eta * g[i];
    if (qel_forward(stepped, p) < qel_forward(r, p)) ++reduced;
  }
  return {reduced >= 95, fmt("entropy reduced in %d/100 trials (need >= 95)", reduced)};
}

// 5. Scaled trend on the synthetic set: QEL >= L1 > baselines.

Outcome trend() {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticSpec s;
  s.length = 200000;
  s.channels = 5;
  s.degree = 3;
  s.segment_len = 32;
  s.pattern_pool = 16;
  s.seed = 7;
  const auto x = synthesize_polynomial(s);
  const double eps = 0.1;

  auto run = [&](LossKind loss) {
    CompressOptions o;
    o.eps = eps;
    o.mode = Mode::Multivariate;
    o.model.window = 32;
    o.train.loss = loss;
    o.train.lr = 1e-3;
    o.train.max_epochs = 40;
    o.train.patience = 40;
    o.train.seed = 0;
    auto r = compress(x, o);
    const double err = max_abs_err(x, decompress(r.container.serialize()));
    std::printf("  %s: ratio %.2f (best epoch %zu, %zu bytes, max err %.4f)\n", to_string(loss).c_str(), r.report.ratio,
                r.report.best_epoch, static_cast<std::size_t>(r.report.compressed_bytes), err);
    return std::pair{r.report.ratio, err};
  };
  const auto [qel, qel_err] = run(LossKind::Qel);
  const auto [l1, l1_err] = run(LossKind::L1);

  const double original = static_cast<double>(x.length() * x.channels() * 4);
  const auto ca = ca_compress(x, eps);
  const double ca_ratio = original / static_cast<double>(ca.serialized_size());
  const double ca_err = max_abs_err(x, ca_decompress(ca));
  const auto qo = quantize_only(x, eps);
  const double qo_ratio = original / static_cast<double>(qo.bytes);
  const double t = seconds_since(t0);
  const bool bounds = qel_err <= eps && l1_err <= eps && ca_err <= eps && max_abs_err(x, qo.reconstruction) <= eps;
  const bool ok = qel >= l1 && l1 > ca_ratio && l1 > qo_ratio && qel > ca_ratio && qel > qo_ratio && bounds && t <= 1800;
  return {ok, fmt("ratios QEL %.2f, L1 %.2f, CA %.2f, quantize-only %.2f; bounds %s; %.0fs (limit 1800s)", qel, l1,
                  ca_ratio, qo_ratio, bounds ? "hold" : "VIOLATED", t)};
}

// 6. Unit equalities.

Outcome equalities() {
  std::vector<std::string> bad;
  const auto pe = build_positional(3, 8);
  const float want[3][3] = {{0, 1, 2}, {-1, 0, 1}, {-2, -1, 0}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (pe.rpe_at(i, j) != want[i][j]) bad.push_back("rpe");
  for (std::size_t i = 0; i < 8; ++i)
    if (pe.ape_at(0, i) != (i % 2 == 0 ? 0.0f : 1.0f)) bad.push_back("ape row 0");
  if (binarize(0.0f) != 1) bad.push_back("binarize(0)");
  if (binarize(-0.3f) != -1) bad.push_back("binarize(-0.3)");
  const std::vector<double> r{0.37};
  const auto q = quantize(r, 0.1);
  if (std::abs(q.r_q[0] - 0.4) > 1e-9 || q.k[0] != 2) bad.push_back("quantize(0.37, 0.1)");
  const double h = entropy_bound_bits(std::vector<std::int64_t>{7, 7, 7, 9});
  if (std::abs(h - 3.2451124978365313) > 1e-9) bad.push_back("entropy bound");
  std::string list;
  for (const auto& b : bad) list += " " + b;
  return {bad.empty(), bad.empty() ? fmt("rpe(3), ape row 0, binarize, quantize(0.37,0.1)=0.4, bound=%.9f", h)
                                   : "mismatch:" + list};
}

// 7. Determinism across processes.

TimeSeries determinism_input() {
  SyntheticSpec s;
  s.length = 6000;
  s.channels = 3;
  s.segment_len = 32;
  s.pattern_pool = 8;
  s.seed = 41;
  return synthesize_polynomial(s);
}

int emit(const fs::path& out) {
  CompressOptions o;
  o.eps = 0.05;
  o.model.window = 32;
  o.model.rpe = RpeMode::Learned;
  o.train.max_epochs = 3;
  o.train.lr = 1e-3;
  o.train.seed = 5;
  o.model.seed = 5;
  const auto r = compress(determinism_input(), o);
  write_file(out, r.container.serialize());
  return 0;
}

int decode(const fs::path& in, const fs::path& out) {
  write_file(out, to_f32le(decompress(read_file(in))));
  return 0;
}

Outcome determinism(const std::string& self) {
  const auto dir = fs::temp_directory_path() / fmt("ebtc_accept_%d", static_cast<int>(::getpid()));
  fs::create_directories(dir);
  auto sh = [&](const std::string& args) { return std::system(("\"" + self + "\" " + args).c_str()); };
  const auto a = dir / "a.ddc", b = dir / "b.ddc", da = dir / "a.f32", db = dir / "b.f32";
  bool ran = sh("--emit \"" + a.string() + "\"") == 0 && sh("--emit \"" + b.string() + "\"") == 0 &&
             sh("--decode \"" + a.string() + "\" \"" + da.string() + "\"") == 0 &&
             sh("--decode \"" + b.string() + "\" \"" + db.string() + "\"") == 0;
  const auto ca = read_file(a), cb = read_file(b), oa = read_file(da), ob = read_file(db);
  fs::remove_all(dir);
  const bool same_container = ran && !ca.empty() && ca == cb;
  const bool same_output = ran && !oa.empty() && oa == ob;
  return {same_container && same_output, fmt("containers %s (%zu bytes), decompressed outputs %s (%zu bytes)",
                                             same_container ? "identical" : "DIFFER", ca.size(),
                                             same_output ? "identical" : "DIFFER", oa.size())};
}

// 8. Transfer: frozen parameters stay put and the best checkpoint comes sooner.

std::vector<float> group_params(const Btae& m, nn::Group g) {
  std::vector<float> out;
  for (const auto& t : m.layout().tensors())
    if (t.group == g) out.insert(out.end(), m.parameters().begin() + t.offset, m.parameters().begin() + t.offset + t.size);
  return out;
}

bool bit_identical(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

TimeSeries poly_series(std::size_t n, std::size_t d, std::uint64_t seed) {
  SyntheticSpec s;
  s.length = n;
  s.channels = d;
  s.segment_len = 32;
  s.pattern_pool = 16;
  s.seed = seed;
  return synthesize_polynomial(s);
}

TimeSeries slice(const TimeSeries& x, std::size_t begin, std::size_t n) {
  const auto v = x.values().subspan(begin * x.channels(), n * x.channels());
  return TimeSeries(n, x.channels(), std::vector<double>(v.begin(), v.end()));
}

CompressOptions transfer_options(std::uint64_t seed, std::size_t epochs, std::size_t patience) {
  CompressOptions o;
  o.eps = 0.1;
  o.model.window = 32;
  o.model.seed = seed;
  o.train.lr = 1e-3;
  o.train.max_epochs = epochs;
  o.train.patience = patience;
  o.train.seed = seed;
  return o;
}

Outcome transfer() {
  // Source and targets are disjoint stretches of one generated series: same generator, new data.
  constexpr std::size_t kPart = 16000;
  const auto whole = poly_series(6 * kPart, 3, 101);
  const auto pretrained = compress(slice(whole, 0, kPart), transfer_options(1, 40, 40)).model;

  // Frozen groups: decoder core across channel counts, whole decoder in encoder-only mode.
  const auto cross = transfer_compress(poly_series(kPart, 2, 202), pretrained, transfer_options(2, 3, 3));
  const bool core_frozen = bit_identical(group_params(pretrained, nn::Group::DecoderCore),
                                         group_params(cross.model, nn::Group::DecoderCore));
  TransferOptions enc_only;
  enc_only.fine_tune = false;
  const auto eo = transfer_compress(poly_series(kPart, 3, 303), pretrained, transfer_options(3, 3, 3), enc_only);
  const bool decoder_frozen =
      bit_identical(group_params(pretrained, nn::Group::DecoderCore), group_params(eo.model, nn::Group::DecoderCore)) &&
      bit_identical(group_params(pretrained, nn::Group::DecoderOutput), group_params(eo.model, nn::Group::DecoderOutput));
  const bool bounds = cross.report.max_abs_err <= 0.1 && eo.report.max_abs_err <= 0.1;

  std::vector<std::size_t> scratch_best, transfer_best;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto target = slice(whole, (1 + seed) * kPart, kPart);
    const auto opts = transfer_options(10 + seed, 60, 5);
    scratch_best.push_back(compress(target, opts).history.best_epoch);
    transfer_best.push_back(transfer_compress(target, pretrained, opts).history.best_epoch);
  }
  auto median = [](std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const auto ms = median(scratch_best), mt = median(transfer_best);
  std::string lists;
  for (std::size_t i = 0; i < 5; ++i) lists += fmt(" %zu/%zu", transfer_best[i], scratch_best[i]);
  return {core_frozen && decoder_frozen && bounds && mt < ms,
          fmt("frozen core %s, encoder-only decoder %s; median best epoch transfer %zu vs scratch %zu "
              "(per seed transfer/scratch:%s)",
              core_frozen ? "bit-identical" : "CHANGED", decoder_frozen ? "bit-identical" : "CHANGED", mt, ms,
              lists.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  if (!args.empty() && args[0] == "--emit" && args.size() == 2) return emit(args[1]);
  if (!args.empty() && args[0] == "--decode" && args.size() == 3) return decode(args[1], args[2]);

  const std::string self = fs::canonical("/proc/self/exe").string();
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"error bound", error_bound},
      {"codec losslessness and efficiency", codec},
      {"QEL gradient oracle", qel_oracle},
      {"QEL descent", qel_descent},
      {"synthetic trend QEL >= L1 > baselines", trend},
      {"unit equalities", equalities},
      {"cross-process determinism", [&] { return determinism(self); }},
      {"transfer", transfer},
  };
  std::set<int> chosen;
  for (const auto& a : args) {
    const int n = std::atoi(a.c_str());
    if (n < 1 || n > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "unknown criterion '%s'\n", a.c_str());
      return 2;
    }
    chosen.insert(n);
  }
  if (chosen.empty())
    for (int i = 1; i <= static_cast<int>(criteria.size()); ++i) chosen.insert(i);

  int failed = 0;
  for (int n : chosen) {
    const auto& [name, fn] = criteria[n - 1];
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %d %s: %s: %s\n", n, o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
