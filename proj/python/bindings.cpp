#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dlqat/audit.hpp"
#include "dlqat/config.hpp"
#include "dlqat/gradcheck.hpp"
#include "dlqat/ops.hpp"
#include "dlqat/pack.hpp"
#include "dlqat/quant.hpp"
#include "dlqat/trainer.hpp"

namespace py = pybind11;
using namespace dlqat;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  const Shape shape{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))};
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Array to_array(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  Array out({rows, cols});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Tensor optional_tensor(const std::optional<Array>& a) { return a ? to_tensor(*a) : Tensor(); }

Phase parse_phase(const std::string& p) {
  if (p == "warmup") return Phase::Warmup;
  if (p == "main") return Phase::Main;
  throw std::invalid_argument("phase must be 'warmup' or 'main'");
}

std::vector<std::string> labels(const ParamSet& set) {
  std::vector<std::string> out;
  for (auto k : set.kinds()) out.emplace_back(param_kind_label(k));
  return out;
}

py::dict perplexity_dict(const Perplexity& p) {
  py::dict d;
  d["mean_nll"] = p.mean_nll;
  d["ppl"] = p.ppl;
  d["tokens"] = p.tokens;
  return d;
}

Corpus corpus_of(const py::bytes& data, double split) {
  const std::string s = data;
  return corpus_from_bytes(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), split);
}

}  // namespace

PYBIND11_MODULE(_dlqat, m) {
  m.doc() = "Weight-decomposed low-rank quantization-aware training (C++ core)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<PackError>(m, "PackError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);

  py::class_<QuantSpec>(m, "QuantSpec")
      .def_static("per_channel", &QuantSpec::per_channel, py::arg("bits"))
      .def_static("grouped", &QuantSpec::grouped, py::arg("bits"), py::arg("group_size"))
      .def_readonly("bits", &QuantSpec::bits)
      .def_readonly("group_size", &QuantSpec::group_size)
      .def_property_readonly("qmin", &QuantSpec::qmin)
      .def_property_readonly("qmax", &QuantSpec::qmax)
      .def("__repr__", &QuantSpec::describe);

  m.def("init_scale_bias", [](double lo, double hi, int bits) {
    const auto so = init_scale_bias(lo, hi, bits);
    return py::make_tuple(so.scale, so.offset);
  }, py::arg("min"), py::arg("max"), py::arg("bits"));

  m.def("init_quant_params", [](const Array& w, const QuantSpec& spec) {
    const auto qp = init_quant_params(to_tensor(w), spec);
    return py::make_tuple(to_array(qp.scale), to_array(qp.offset), to_array(qp.magnitude));
  }, py::arg("w"), py::arg("spec"), "Returns (scale, offset, magnitude), each (C_out, groups).");

  m.def("quantize_ints", [](const Array& w, const Array& scale, const Array& offset, const QuantSpec& spec) {
    const Tensor wt = to_tensor(w);
    const auto grid = quantize_ints(wt, to_tensor(scale), to_tensor(offset), spec);
    py::array_t<std::int32_t> out({wt.rows(), wt.cols()});
    std::copy(grid.begin(), grid.end(), out.mutable_data());
    return out;
  }, py::arg("w"), py::arg("scale"), py::arg("offset"), py::arg("spec"));

  m.def("dequantize", [](const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& grid,
                         const Array& scale, const Array& offset, const std::optional<Array>& magnitude,
                         const QuantSpec& spec) {
    if (grid.ndim() != 2) throw std::invalid_argument("expected a 2-D grid");
    const Shape shape{static_cast<std::size_t>(grid.shape(0)), static_cast<std::size_t>(grid.shape(1))};
    return to_array(dequantize(std::span(grid.data(), grid.size()), shape, to_tensor(scale), to_tensor(offset),
                               optional_tensor(magnitude), spec));
  }, py::arg("grid"), py::arg("scale"), py::arg("offset"), py::arg("magnitude") = py::none(), py::arg("spec"));

  m.def("fake_quantize", [](const Array& w, const Array& scale, const Array& offset,
                            const std::optional<Array>& magnitude, const QuantSpec& spec) {
    NoGradGuard ng;
    return to_array(fake_quantize(to_tensor(w), to_tensor(scale), to_tensor(offset), optional_tensor(magnitude), spec));
  }, py::arg("w"), py::arg("scale"), py::arg("offset"), py::arg("magnitude") = py::none(), py::arg("spec"));

  m.def("ste_gradients", [](const Array& w, const Array& scale, const Array& offset,
                            const std::optional<Array>& magnitude, const QuantSpec& spec, const Array& upstream) {
    const Tensor wt = to_tensor(w), st = to_tensor(scale);
    const Tensor up = to_tensor(upstream);
    const auto g = ste_gradients(wt, st, to_tensor(offset), optional_tensor(magnitude), spec, up.data());
    py::dict d;
    d["weight"] = to_array(g.weight, wt.rows(), wt.cols());
    d["scale"] = to_array(g.scale, st.rows(), st.cols());
    d["offset"] = to_array(g.offset, st.rows(), st.cols());
    d["magnitude"] = to_array(g.magnitude, st.rows(), st.cols());
    return d;
  }, py::arg("w"), py::arg("scale"), py::arg("offset"), py::arg("magnitude"), py::arg("spec"), py::arg("upstream"));

  m.def("pack_bits", [](const std::vector<std::int32_t>& values, int bits) {
    const auto b = pack_bits(values, bits);
    return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
  }, py::arg("values"), py::arg("bits"));
  m.def("unpack_bits", [](const py::bytes& data, std::size_t count, int bits) {
    const std::string s = data;
    return unpack_bits(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), count, bits);
  }, py::arg("data"), py::arg("count"), py::arg("bits"));

  m.def("trainable_set", [](int setting, const std::string& phase) {
    return labels(trainable_set(setting_from_index(setting), parse_phase(phase)));
  }, py::arg("setting"), py::arg("phase"));
  m.def("setting_labels", [](int setting) {
    const auto s = setting_from_index(setting);
    py::dict d;
    d["m"] = std::string(magnitude_label(s));
    d["clipping_bounds"] = std::string(clip_mode_label(traits(s).clip));
    d["learnable"] = learnable_label(s);
    return d;
  }, py::arg("setting"));

  m.def("audit", [](const std::string& arch, int bits, std::optional<std::size_t> group_size, std::size_t rank) {
    const QuantSpec spec = group_size ? QuantSpec::grouped(bits, *group_size) : QuantSpec::per_channel(bits);
    const auto a = audit_params(catalog_entry(arch), spec, rank);
    py::dict d;
    d["groups"] = a.groups;
    d["count_sb"] = a.count_sb;
    d["count_m"] = a.count_m;
    d["count_ab"] = a.count_ab;
    d["total"] = a.total;
    d["fraction_of_total"] = a.fraction_of_total;
    return d;
  }, py::arg("arch"), py::arg("bits") = 4, py::arg("group_size") = py::none(), py::arg("rank") = 16);
  m.def("catalog", [] {
    std::vector<std::string> names;
    for (const auto& e : shape_catalog()) names.push_back(e.name);
    return names;
  });

  m.def("gradcheck", [](std::uint64_t seed, std::size_t points) {
    py::list out;
    for (const auto& e : run_gradcheck(seed, points).entries) {
      py::dict d;
      d["name"] = e.name;
      d["method"] = e.method;
      d["max_error"] = e.max_error;
      d["tolerance"] = e.tolerance;
      d["passed"] = e.passed;
      out.append(d);
    }
    return out;
  }, py::arg("seed") = 0, py::arg("points") = 20);

  m.def("train", [](const std::string& config_text, const py::bytes& corpus, bool with_pack) {
    const RunConfig cfg = parse_run_config(config_text);
    const Corpus data = corpus_of(corpus, cfg.split);
    TinyLM model(cfg.model);
    TrainingReport rep;
    {
      py::gil_scoped_release release;
      rep = run_training(model, data, cfg.train);
    }
    py::dict d;
    py::list losses, phases;
    for (const auto& r : rep.records) {
      losses.append(r.loss);
      phases.append(std::string(phase_label(r.phase)));
    }
    d["losses"] = losses;
    d["phases"] = phases;
    d["final_eval"] = perplexity_dict(rep.final_eval);
    if (rep.initial_eval) d["initial_eval"] = perplexity_dict(*rep.initial_eval);
    if (rep.sb_frozen_constant) d["sb_frozen_constant"] = *rep.sb_frozen_constant;
    if (with_pack) {
      const auto bytes = pack_model(model);
      d["pack"] = py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      // Packing rounds s, b, m to binary32; this is the model the pack holds.
      d["packed_eval"] = perplexity_dict(perplexity(model, data.eval(), cfg.model.context_length));
    }
    return d;
  }, py::arg("config"), py::arg("corpus"), py::arg("pack") = false,
     "Trains a model described by INI text on raw corpus bytes.");

  m.def("evaluate", [](const std::string& config_text, const py::bytes& corpus, std::optional<py::bytes> pack) {
    const RunConfig cfg = parse_run_config(config_text);
    const Corpus data = corpus_of(corpus, cfg.split);
    TinyLM model(cfg.model);
    if (pack) {
      const std::string s = *pack;
      load_packed_weights(model, unpack_model(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())));
    }
    return perplexity_dict(perplexity(model, data.eval(), cfg.model.context_length));
  }, py::arg("config"), py::arg("corpus"), py::arg("pack") = py::none());
}
