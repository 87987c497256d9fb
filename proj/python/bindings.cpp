#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "vlaquant/cli.hpp"
#include "vlaquant/error.hpp"
#include "vlaquant/gptq.hpp"
#include "vlaquant/json_io.hpp"
#include "vlaquant/linalg.hpp"
#include "vlaquant/planner.hpp"
#include "vlaquant/quant.hpp"
#include "vlaquant/store.hpp"
#include "vlaquant/toy_vla.hpp"

namespace py = pybind11;
using namespace vlaq;

namespace {

using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F32Array& a, const char* name = "array") {
  Shape shape(a.shape(), a.shape() + a.ndim());
  if (shape.empty()) shape = {1};
  return Tensor(name, shape, std::vector<float>(a.data(), a.data() + a.size()));
}

F32Array to_array(const Tensor& t) {
  F32Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

QuantScheme make_scheme(int bits, const std::string& mode, const std::string& granularity, std::size_t group_size) {
  QuantScheme s;
  s.bits = bits;
  s.mode = parse_quant_mode(mode);
  s.granularity = parse_granularity(granularity);
  s.group_size = group_size;
  s.validate();
  return s;
}

Storage storage_from(const py::object& o) {
  if (py::isinstance<py::str>(o)) {
    const auto s = o.cast<std::string>();
    if (s == "fp16") return Fp16Storage{};
    if (s == "skip") return SkipStorage{};
    throw FormatError("storage must be a QuantScheme, 'fp16' or 'skip'");
  }
  return o.cast<QuantScheme>();
}

py::dict load_store_py(const std::string& path) {
  const auto store = load_store(path);
  py::dict out;
  for (const auto& e : store.entries()) {
    if (e.dtype == DType::f32) {
      out[py::str(e.name)] = to_array(store.tensor(e.name));
    } else {
      out[py::str(e.name)] = py::bytes(reinterpret_cast<const char*>(e.payload.data()), e.payload.size());
    }
  }
  return out;
}

void save_store_py(const std::string& path, const py::dict& tensors) {
  TensorStore store;
  for (const auto& [k, v] : tensors) store.add(k.cast<std::string>(), to_tensor(v.cast<F32Array>()));
  save_store(store, path);
}

}  // namespace

PYBIND11_MODULE(_vlaquant, m) {
  m.doc() = "Weight quantization toolkit for modular vision-language-action pipelines.";
  m.attr("__version__") = kToolVersion;

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NotPositiveDefinite>(m, "NotPositiveDefinite", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<IntegrityError>(m, "IntegrityError", base.ptr());
  py::register_exception<CalibrationError>(m, "CalibrationError", base.ptr());
  py::register_exception<PlanError>(m, "PlanError", base.ptr());

  py::class_<QuantScheme>(m, "QuantScheme")
      .def(py::init(&make_scheme), py::arg("bits") = 8, py::arg("mode") = "symmetric",
           py::arg("granularity") = "per_channel", py::arg("group_size") = 32)
      .def_readonly("bits", &QuantScheme::bits)
      .def_property_readonly("mode", [](const QuantScheme& s) { return to_string(s.mode); })
      .def_property_readonly("granularity", [](const QuantScheme& s) { return to_string(s.granularity); })
      .def_readonly("group_size", &QuantScheme::group_size)
      .def("__eq__", [](const QuantScheme& a, const QuantScheme& b) { return a == b; })
      .def("__repr__", [](const QuantScheme& s) {
        return "QuantScheme(bits=" + std::to_string(s.bits) + ", mode='" + to_string(s.mode) + "', granularity='" +
               to_string(s.granularity) + "', group_size=" + std::to_string(s.group_size) + ")";
      });

  py::class_<QuantizedTensor>(m, "QuantizedTensor")
      .def_property_readonly("codes",
                             [](const QuantizedTensor& q) {
                               py::array_t<std::int32_t> a(std::vector<py::ssize_t>(q.shape.begin(), q.shape.end()));
                               std::copy(q.codes.begin(), q.codes.end(), a.mutable_data());
                               return a;
                             })
      .def_property_readonly("scales", [](const QuantizedTensor& q) { return py::array_t<float>(q.scales.size(), q.scales.data()); })
      .def_property_readonly("zero_points",
                             [](const QuantizedTensor& q) {
                               return py::array_t<std::uint8_t>(q.zero_points.size(), q.zero_points.data());
                             })
      .def_readonly("scheme", &QuantizedTensor::scheme)
      .def_property_readonly("shape", [](const QuantizedTensor& q) { return py::tuple(py::cast(q.shape)); })
      .def("dequantize", [](const QuantizedTensor& q) { return to_array(dequantize(q)); });

  m.def("rtn_quantize", [](const F32Array& w, const QuantScheme& s) { return rtn_quantize(to_tensor(w, "w"), s); },
        py::arg("w"), py::arg("scheme") = QuantScheme{});
  m.def("compute_scales", [](const F32Array& w, const QuantScheme& s) {
    const auto ss = compute_scales(to_tensor(w, "w"), s);
    return py::make_tuple(py::array_t<float>(ss.scales.size(), ss.scales.data()),
                          py::array_t<std::uint8_t>(ss.zero_points.size(), ss.zero_points.data()));
  });
  m.def("quantized_bytes",
        [](const std::vector<std::size_t>& shape, const py::object& storage) {
          return quantized_bytes(shape, storage_from(storage));
        },
        py::arg("shape"), py::arg("storage"));

  m.def(
      "gptq_quantize_layer",
      [](const F32Array& w, const F32Array& x, const QuantScheme& s, double percdamp, std::size_t block_size,
         int max_redamp_retries) {
        const Tensor xt = to_tensor(x, "x");
        require_matrix(xt, "gptq_quantize_layer calibration");
        HessianState st(xt.cols());
        st.accumulate(xt);
        GptqConfig cfg;
        cfg.scheme = s;
        cfg.percdamp = percdamp;
        cfg.block_size = block_size;
        cfg.max_redamp_retries = max_redamp_retries;
        const auto r = gptq_quantize_layer(to_tensor(w, "w"), st, cfg);
        py::dict stats;
        stats["proxy_loss_rtn"] = r.stats.proxy_loss_rtn;
        stats["proxy_loss_gptq"] = r.stats.proxy_loss_gptq;
        stats["damping_used"] = r.stats.damping_used;
        stats["retries"] = r.stats.retries;
        return py::make_tuple(r.quantized, stats);
      },
      py::arg("w"), py::arg("x"), py::arg("scheme") = QuantScheme{}, py::arg("percdamp") = 0.01,
      py::arg("block_size") = 32, py::arg("max_redamp_retries") = 10);
  m.def("proxy_loss", [](const F32Array& w, const F32Array& w_hat, const F32Array& x) {
    return proxy_loss(to_tensor(w), to_tensor(w_hat), to_tensor(x));
  });

  m.def("matmul", [](const F32Array& a, const F32Array& b) { return to_array(matmul(to_tensor(a), to_tensor(b))); });
  m.def("cholesky_lower", [](const F32Array& h) { return to_array(cholesky_lower(to_tensor(h))); });
  m.def("spd_inverse", [](const F32Array& h) { return to_array(spd_inverse(to_tensor(h))); });

  m.def("load_store", &load_store_py, py::arg("path"));
  m.def("save_store", &save_store_py, py::arg("path"), py::arg("tensors"));

  // Plans and manifests cross the boundary as JSON text.
  m.def(
      "build_plan",
      [](const std::string& policy, const std::string& manifest_json, std::optional<std::string> sensitivity_json,
         std::optional<std::uint64_t> budget_bytes) {
        const auto manifest = json_io::manifest_from_json(json_io::json::parse(manifest_json));
        std::optional<SensitivityReport> sens;
        if (sensitivity_json) sens = json_io::sensitivity_from_json(json_io::json::parse(*sensitivity_json));
        return json_io::to_json(build_plan(parse_policy(policy), manifest, sens ? &*sens : nullptr, budget_bytes)).dump();
      },
      py::arg("policy"), py::arg("manifest_json"), py::arg("sensitivity_json") = std::nullopt,
      py::arg("budget_bytes") = std::nullopt);
  m.def("reference_manifest", [] { return json_io::to_json(openvla_reference_manifest()).dump(); });
  m.def("toy_manifest", [] { return json_io::to_json(toy_manifest(ToyModelSpec{})).dump(); });

  m.def("run_cli", [](const std::vector<std::string>& args) { return run_cli(args); }, py::arg("args"));
}
