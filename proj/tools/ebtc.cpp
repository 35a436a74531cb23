// ebtc: compress / decompress / verify / synth / bench for error-bounded time-series compression.
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ebtc/compressor.hpp"
#include "ebtc/error.hpp"
#include "ebtc/quantizer.hpp"

namespace fs = std::filesystem;
using namespace ebtc;

namespace {

enum Exit { kOk = 0, kBoundViolated = 1, kArgument = 2, kData = 3, kDivergence = 4 };

struct ModelFlags {
  double eps = 0.1;
  std::uint32_t window = 128;
  std::uint32_t latent_bits = 32;
  std::string loss = "qel";
  int b = 10;
  std::size_t epochs = 150;
  std::size_t patience = 20;
  std::size_t batch = 64;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  std::string mode = "multi";
  std::string decoder = "transformer";
  bool rpe = false;
  std::string rpe_kind = "literal";
  bool prescale = false;
  bool verbose = false;
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
  cmd->add_option("--eps", f.eps, "maximum absolute error (original units)");
  cmd->add_option("--window", f.window, "window length l");
  cmd->add_option("--latent-bits", f.latent_bits, "latent code size |c|");
  cmd->add_option("--loss", f.loss, "training loss")->check(CLI::IsMember({"l1", "l2", "qel"}));
  cmd->add_option("--b", f.b, "QEL kernel sharpness");
  cmd->add_option("--epochs", f.epochs, "maximum training epochs (0 = untrained model)");
  cmd->add_option("--patience", f.patience, "epochs without improvement before stopping");
  cmd->add_option("--batch", f.batch, "windows per batch");
  cmd->add_option("--lr", f.lr, "Adam learning rate");
  cmd->add_option("--seed", f.seed, "seed for initialization and shuffling");
  cmd->add_option("--mode", f.mode, "channel handling")->check(CLI::IsMember({"uni", "multi"}));
  cmd->add_option("--decoder", f.decoder, "decoder architecture")->check(CLI::IsMember({"transformer", "ffn", "rnn"}));
  cmd->add_flag("--rpe", f.rpe, "add the relative position term to attention logits");
  cmd->add_option("--rpe-kind", f.rpe_kind, "relative position form")->check(CLI::IsMember({"literal", "learned"}));
  cmd->add_flag("--prescale", f.prescale, "per-channel affine normalization of model inputs");
  cmd->add_flag("-v,--verbose", f.verbose, "per-epoch progress on stderr");
}

CompressOptions options_from(const ModelFlags& f) {
  CompressOptions o;
  o.eps = f.eps;
  o.mode = f.mode == "uni" ? Mode::Univariate : Mode::Multivariate;
  o.prescale = f.prescale;
  o.model.window = f.window;
  o.model.latent_bits = f.latent_bits;
  o.model.decoder_kind = decoder_kind_from_string(f.decoder);
  o.model.rpe = !f.rpe ? RpeMode::Off : f.rpe_kind == "learned" ? RpeMode::Learned : RpeMode::Literal;
  o.model.seed = f.seed;
  o.train.loss = loss_from_string(f.loss);
  o.train.qel.b = f.b;
  o.train.max_epochs = f.epochs;
  o.train.patience = f.patience;
  o.train.batch_size = f.batch;
  o.train.lr = f.lr;
  o.train.seed = f.seed;
  if (f.verbose)
    o.on_epoch = [](const EpochRecord& r) {
      std::cerr << "epoch " << r.epoch << " loss " << r.train_loss << " est_bits " << r.estimated_bits
                << (r.improved ? " *" : "") << "\n";
    };
  return o;
}

// A transfer source is a full model file, a bare decoder, or a learned container.
Btae load_pretrained(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 4) throw FormatError(path + ": too short to be a model");
  const std::string magic(bytes.begin(), bytes.begin() + 4);
  if (magic == "DDF1") return Btae::load_full(bytes);
  if (magic == "DDM1") return Btae::load_decoder(bytes);
  if (magic == "DDC1") {
    const auto c = Container::parse(bytes);
    if (c.header.kind != ContainerKind::Learned) throw FormatError(path + ": container holds no model");
    return Btae::load_decoder(c.decoder);
  }
  throw FormatError(path + ": unrecognized model file");
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw IoError("no such file: " + path);
}

int run_compress(const std::string& in, const std::string& out, const ModelFlags& f, const std::string& transfer,
                 bool freeze, const std::string& report_path, const std::string& save_model) {
  require_file(in);
  const auto series = load_series(in);
  auto opts = options_from(f);
  CompressResult res = [&] {
    if (transfer.empty()) return compress(series, opts);
    require_file(transfer);
    const auto model = load_pretrained(transfer);
    opts.model.window = model.config().window;
    return transfer_compress(series, model, opts, TransferOptions{!freeze});
  }();
  write_file(out, res.container.serialize());
  if (!save_model.empty()) write_file(save_model, res.model.serialize_full());
  const auto json = report_to_json(res.report);
  if (!report_path.empty()) {
    std::ofstream os(report_path);
    if (!(os << json << "\n")) throw IoError("cannot write " + report_path);
  }
  std::cout << json << "\n";
  return kOk;
}

int run_decompress(const std::string& in, const std::string& out, const std::string& format) {
  require_file(in);
  const auto series = decompress(read_file(in));
  const auto fmt = format.empty() ? format_from_path(out) : format == "csv" ? SeriesFormat::Csv : SeriesFormat::F32le;
  save_series(series, out, fmt);
  return kOk;
}

int run_verify(const std::string& original, const std::string& container_path) {
  require_file(original);
  require_file(container_path);
  const auto x = load_series(original);
  const auto c = Container::parse(read_file(container_path));
  const auto y = decompress(c);
  if (y.length() != x.length() || y.channels() != x.channels()) {
    std::cerr << "shape mismatch: original " << x.length() << "x" << x.channels() << ", container " << y.length()
              << "x" << y.channels() << "\n";
    return kBoundViolated;
  }
  const auto rep = verify_maae(x, y, c.header.eps);
  nlohmann::ordered_json j;
  j["max_abs_err"] = rep.max_abs_err;
  j["eps"] = c.header.eps;
  j["worst_index"] = rep.worst_index;
  j["pass"] = rep.pass;
  std::cout << j.dump() << "\n";
  return rep.pass ? kOk : kBoundViolated;
}

int run_synth(const std::string& out, const std::string& kind, SyntheticSpec spec, double step) {
  const auto series =
      kind == "walk" ? random_walk(spec.length, spec.channels, step, spec.seed) : synthesize_polynomial(spec);
  save_series(series, out, format_from_path(out));
  return kOk;
}

struct BenchCell {
  std::string dataset, method;
  double ratio = 0, max_abs_err = 0, seconds = 0;
  bool ok = false;
  std::string error;
};

std::vector<std::pair<std::string, TimeSeries>> bench_suite(const std::string& suite, std::uint64_t seed) {
  std::vector<std::pair<std::string, TimeSeries>> out;
  if (suite == "synth") {
    SyntheticSpec poly;
    poly.length = 8192;
    poly.channels = 2;
    poly.segment_len = 128;
    poly.pattern_pool = 4;
    poly.seed = seed;
    out.emplace_back("synth-poly", synthesize_polynomial(poly));
    out.emplace_back("synth-walk", random_walk(8192, 1, 0.05, seed + 1));
    return out;
  }
  if (!fs::is_directory(suite)) throw IoError("suite is neither 'synth' nor a directory: " + suite);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(suite))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& p : files) out.emplace_back(p.filename().string(), load_series(p.string()));
  return out;
}

int run_bench(const std::string& suite, const std::string& methods_csv, const std::string& out_path,
              const ModelFlags& f) {
  std::vector<std::string> methods;
  std::stringstream ss(methods_csv);
  for (std::string m; std::getline(ss, m, ',');)
    if (!m.empty()) methods.push_back(m);
  for (const auto& m : methods)
    if (m != "btae" && m != "ca" && m != "quantize-only") throw ArgumentError("unknown bench method '" + m + "'");

  std::vector<BenchCell> cells;
  for (const auto& [name, series] : bench_suite(suite, f.seed)) {
    const double original = static_cast<double>(series.length() * series.channels() * 4);
    for (const auto& m : methods) {
      BenchCell cell{name, m};
      const auto t0 = std::chrono::steady_clock::now();
      try {
        if (m == "btae") {
          auto opts = options_from(f);
          opts.model.window = std::min<std::uint32_t>(f.window, static_cast<std::uint32_t>(series.length()));
          const auto res = compress(series, opts);
          cell.ratio = res.report.ratio;
          cell.max_abs_err = res.report.max_abs_err;
        } else if (m == "ca") {
          const auto c = ca_compress(series, f.eps);
          cell.ratio = original / static_cast<double>(c.serialized_size());
          cell.max_abs_err = verify_maae(series, ca_decompress(c), f.eps).max_abs_err;
        } else {
          const auto q = quantize_only(series, f.eps);
          cell.ratio = original / static_cast<double>(q.bytes);
          cell.max_abs_err = verify_maae(series, q.reconstruction, f.eps).max_abs_err;
        }
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      cell.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      cells.push_back(cell);
    }
  }

  std::ostringstream csv;
  csv << "dataset,method,ratio,max_abs_err,eps,seconds,status\n";
  bool any_ok = false;
  for (const auto& c : cells) {
    any_ok |= c.ok;
    std::string status = c.ok ? "ok" : "error: " + c.error;
    std::replace(status.begin(), status.end(), ',', ';');
    csv << c.dataset << ',' << c.method << ',' << c.ratio << ',' << c.max_abs_err << ',' << f.eps << ','
        << c.seconds << ',' << status << '\n';
  }
  if (out_path.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream os(out_path);
    if (!(os << csv.str())) throw IoError("cannot write " + out_path);
  }
  return any_ok ? kOk : kData;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Error-bounded lossy time-series compression with learned binary latent codes"};
  app.require_subcommand(1);

  ModelFlags flags;
  std::string in, out, transfer, report, save_model, format, original, methods = "btae,ca,quantize-only";
  std::string suite = "synth", synth_kind = "poly";
  bool freeze = false;
  SyntheticSpec spec;
  double walk_step = 0.05;

  auto* c = app.add_subcommand("compress", "train a model on the input and write a container");
  c->add_option("input", in, "series (.csv or f32le)")->required();
  c->add_option("output", out, "container path")->required();
  add_model_flags(c, flags);
  c->add_option("--transfer", transfer, "pretrained model, decoder or container to start from");
  c->add_flag("--freeze", freeze, "with --transfer and equal channel counts: train the encoder only");
  c->add_option("--report", report, "write the JSON report here");
  c->add_option("--save-model", save_model, "write the full float32 model (for later --transfer)");

  auto* d = app.add_subcommand("decompress", "reconstruct a series from a container");
  d->add_option("input", in, "container path")->required();
  d->add_option("output", out, "series path (.csv or f32le)")->required();
  d->add_option("--format", format, "output format")->check(CLI::IsMember({"csv", "f32le"}));

  auto* v = app.add_subcommand("verify", "check a container against the original series");
  v->add_option("original", original, "original series")->required();
  v->add_option("container", in, "container path")->required();

  auto* s = app.add_subcommand("synth", "generate a synthetic series");
  s->add_option("output", out, "series path (.csv or f32le)")->required();
  s->add_option("--kind", synth_kind, "signal family")->check(CLI::IsMember({"poly", "walk"}));
  s->add_option("--length", spec.length, "samples");
  s->add_option("--channels", spec.channels, "channels d");
  s->add_option("--degree", spec.degree, "polynomial degree");
  s->add_option("--segment", spec.segment_len, "samples per polynomial segment");
  s->add_option("--pool", spec.pattern_pool, "coefficient pool size (0 = fresh per segment)");
  s->add_option("--step", walk_step, "random-walk step scale");
  s->add_option("--seed", spec.seed, "RNG seed");

  auto* b = app.add_subcommand("bench", "compare methods on a suite");
  b->add_option("--suite", suite, "'synth' or a directory of series files");
  b->add_option("--methods", methods, "comma-separated: btae,ca,quantize-only");
  b->add_option("--out", out, "CSV output path (stdout when omitted)");
  add_model_flags(b, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kArgument;
  }

  try {
    if (*c) return run_compress(in, out, flags, transfer, freeze, report, save_model);
    if (*d) return run_decompress(in, out, format);
    if (*v) return run_verify(original, in);
    if (*s) {
      spec.validate();
      return run_synth(out, synth_kind, spec, walk_step);
    }
    if (*b) return run_bench(suite, methods, out, flags);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case Error::Kind::Argument:
      case Error::Kind::Io: return kArgument;
      case Error::Kind::Divergence: return kDivergence;
      default: return kData;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kArgument;
}
