#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ebtc/codec.hpp"
#include "ebtc/compressor.hpp"
#include "ebtc/error.hpp"
#include "ebtc/qel.hpp"
#include "ebtc/quantizer.hpp"
#include "ebtc/series.hpp"

namespace py = pybind11;
using namespace ebtc;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

TimeSeries to_series(const Array& a) {
  if (a.ndim() != 1 && a.ndim() != 2) throw ArgumentError("expected a 1-D or 2-D array");
  const std::size_t n = a.shape(0), d = a.ndim() == 2 ? a.shape(1) : 1;
  return TimeSeries(n, d, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const TimeSeries& s) {
  Array out({s.length(), s.channels()});
  std::copy(s.values().begin(), s.values().end(), out.mutable_data());
  return out;
}

py::bytes to_bytes(const Bytes& b) { return {reinterpret_cast<const char*>(b.data()), b.size()}; }

Bytes from_bytes(const py::bytes& b) {
  const std::string_view v = b;
  return Bytes(v.begin(), v.end());
}

py::dict report_dict(const CompressionReport& r) {
  return py::module_::import("json").attr("loads")(report_to_json(r));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Error-bounded time-series compression";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ArgumentError>(m, "ArgumentError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<DecodeError>(m, "DecodeError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<DivergenceError>(m, "DivergenceError", base.ptr());
  py::register_exception<OverflowError>(m, "OverflowError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());

  m.def(
      "compress",
      [](const Array& x, double eps, std::uint32_t window, const std::string& mode, const std::string& loss, int b,
         std::size_t epochs, std::size_t patience, std::size_t batch, double lr, std::uint32_t latent_bits,
         const std::string& decoder, const std::string& rpe, bool prescale, std::uint64_t seed) {
        CompressOptions o;
        o.eps = eps;
        o.mode = mode == "uni" ? Mode::Univariate : mode == "multi" ? Mode::Multivariate
                                                                    : throw ArgumentError("mode must be 'uni' or 'multi'");
        o.prescale = prescale;
        o.model.window = window;
        o.model.latent_bits = latent_bits;
        o.model.decoder_kind = decoder_kind_from_string(decoder);
        o.model.rpe = rpe == "off" ? RpeMode::Off : rpe == "literal" ? RpeMode::Literal
                                   : rpe == "learned"               ? RpeMode::Learned
                                                                    : throw ArgumentError("rpe must be off, literal or learned");
        o.model.seed = seed;
        o.train.loss = loss_from_string(loss);
        o.train.qel.b = b;
        o.train.max_epochs = epochs;
        o.train.patience = patience;
        o.train.batch_size = batch;
        o.train.lr = lr;
        o.train.seed = seed;
        const auto series = to_series(x);
        CompressResult r = [&] {
          py::gil_scoped_release release;
          return compress(series, o);
        }();
        return py::make_tuple(to_bytes(r.container.serialize()), report_dict(r.report));
      },
      py::arg("x"), py::arg("eps"), py::arg("window") = 128, py::arg("mode") = "multi", py::arg("loss") = "qel",
      py::arg("b") = 10, py::arg("epochs") = 150, py::arg("patience") = 20, py::arg("batch") = 64, py::arg("lr") = 1e-4,
      py::arg("latent_bits") = 32, py::arg("decoder") = "transformer", py::arg("rpe") = "off",
      py::arg("prescale") = false, py::arg("seed") = 0,
      "Compress an (n, d) array. Returns (container bytes, report dict).");

  m.def(
      "decompress", [](const py::bytes& blob) { return to_array(decompress(from_bytes(blob))); }, py::arg("blob"));

  m.def(
      "ca_compress",
      [](const Array& x, double eps) { return to_bytes(ca_compress(to_series(x), eps).serialize()); }, py::arg("x"),
      py::arg("eps"), "Critical-aperture baseline container; decompress() reads it.");

  m.def(
      "quantize_only",
      [](const Array& x, double eps) {
        auto r = quantize_only(to_series(x), eps);
        return py::make_tuple(r.bytes, to_array(r.reconstruction));
      },
      py::arg("x"), py::arg("eps"), "Coded size in bytes and reconstruction of the direct-quantization floor.");

  m.def(
      "max_abs_error",
      [](const Array& x, const Array& y, double eps) {
        const auto r = verify_maae(to_series(x), to_series(y), eps);
        return py::make_tuple(r.max_abs_err, r.pass);
      },
      py::arg("x"), py::arg("y"), py::arg("eps"), "(max |x - y|, within eps)");

  m.def(
      "quantize",
      [](const Array& r, double eps) {
        const auto q = quantize(std::span(r.data(), r.size()), eps);
        return py::make_tuple(q.k, q.r_q);
      },
      py::arg("r"), py::arg("eps"));

  m.def(
      "entropy_bound_bits", [](const std::vector<std::int64_t>& s) { return entropy_bound_bits(s); }, py::arg("symbols"));
  m.def(
      "encode_symbols", [](const std::vector<std::int64_t>& s) { return to_bytes(encode_symbols(s).serialize()); },
      py::arg("symbols"));
  m.def(
      "decode_symbols", [](const py::bytes& b) { return decode_symbols(EncodedStream::parse(from_bytes(b))); },
      py::arg("stream"));

  m.def(
      "qel_forward",
      [](const Array& r, double eps, int b) {
        QelParams p;
        p.eps = eps;
        p.b = b;
        return qel_forward(std::span(r.data(), r.size()), p);
      },
      py::arg("r"), py::arg("eps"), py::arg("b") = 10, "Entropy (nats) of the quantized residuals.");
  m.def(
      "qel_backward",
      [](const Array& r, double eps, int b) {
        QelParams p;
        p.eps = eps;
        p.b = b;
        const auto g = qel_backward(std::span(r.data(), r.size()), p);
        Array out(static_cast<py::ssize_t>(g.size()));
        std::copy(g.begin(), g.end(), out.mutable_data());
        return out;
      },
      py::arg("r"), py::arg("eps"), py::arg("b") = 10);

  m.def(
      "synthesize_polynomial",
      [](std::size_t length, std::size_t channels, int degree, std::size_t segment_len, std::size_t pattern_pool,
         std::uint64_t seed) {
        SyntheticSpec s;
        s.length = length;
        s.channels = channels;
        s.degree = degree;
        s.segment_len = segment_len;
        s.pattern_pool = pattern_pool;
        s.seed = seed;
        return to_array(synthesize_polynomial(s));
      },
      py::arg("length"), py::arg("channels") = 1, py::arg("degree") = 3, py::arg("segment_len") = 128,
      py::arg("pattern_pool") = 0, py::arg("seed") = 0);
  m.def(
      "random_walk",
      [](std::size_t length, std::size_t channels, double step, std::uint64_t seed) {
        return to_array(random_walk(length, channels, step, seed));
      },
      py::arg("length"), py::arg("channels") = 1, py::arg("step") = 1.0, py::arg("seed") = 0);
}
