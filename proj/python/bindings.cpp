// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "convfuse/checkpoint.hpp"
#include "convfuse/config.hpp"
#include "convfuse/error.hpp"
#include "convfuse/harness.hpp"
#include "convfuse/metrics.hpp"
#include "convfuse/selftest.hpp"

namespace py = pybind11;
namespace cf = convfuse;

namespace {

py::array_t<std::uint8_t> bytes_2d(const std::vector<std::uint8_t>& v, std::size_t h, std::size_t w) {
  py::array_t<std::uint8_t> out({h, w});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::array_t<double> to_numpy(const cf::Tensor& t) {
  py::array_t<double> out(t.shape());
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::dict report_dict(const cf::MetricsReport& r) {
  py::dict d;
  d["pixel_auroc"] = r.pixel_auroc;
  d["pixel_ap"] = r.pixel_ap;
  d["image_auroc"] = r.image_auroc;
  d["image_ap"] = r.image_ap;
  d["images"] = r.images;
  d["anomalous_images"] = r.anomalous_images;
  d["pixels"] = r.pixels;
  d["anomalous_pixels"] = r.anomalous_pixels;
  d["gate_entropy"] = r.gate_entropy;
  return d;
}

cf::RunConfig config_from(const py::dict& overrides) {
  cf::RunConfig cfg;
  for (const auto& [k, v] : overrides) {
    std::string value = py::isinstance<py::bool_>(v) ? (v.cast<bool>() ? "true" : "false") : py::str(v).cast<std::string>();
    cf::set_config_value(cfg, k.cast<std::string>(), value);
  }
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Grouped dual-encoder anomaly segmentation with convolutional low-rank adapters";

  py::register_exception<cf::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<cf::ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<cf::MetricError>(m, "MetricError", PyExc_ValueError);
  py::register_exception<cf::LoadError>(m, "LoadError", PyExc_IOError);
  py::register_exception<cf::TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  py::class_<cf::RunConfig>(m, "RunConfig")
      .def(py::init(&config_from), py::arg("overrides") = py::dict())
      .def("__getitem__", &cf::get_config_value)
      .def("__setitem__", &cf::set_config_value)
      .def("validate", &cf::RunConfig::validate)
      .def("echo", &cf::config_echo)
      .def_static("parse", [](const std::string& text) { return cf::parse_config_text(text); })
      .def_static("keys", [] {
        std::vector<std::string> out;
        for (const auto& k : cf::config_keys()) out.push_back(k.name);
        return out;
      });

  py::class_<cf::Sample>(m, "Sample")
      .def_readonly("id", &cf::Sample::id)
      .def_readonly("label", &cf::Sample::label)
      .def_property_readonly("pixels", [](const cf::Sample& s) { return bytes_2d(s.pixels, s.height, s.width); })
      .def_property_readonly("mask", [](const cf::Sample& s) { return bytes_2d(s.mask, s.height, s.width); });

  py::class_<cf::Corpus>(m, "Corpus").def_readonly("train", &cf::Corpus::train).def_readonly("test", &cf::Corpus::test);
  m.def("load_corpus", &cf::load_corpus, py::arg("config"));

  py::class_<cf::GroupedModel>(m, "Model")
      .def(py::init([](const cf::RunConfig& cfg) { return cf::build_model(cfg.model, cfg.model_seed); }), py::arg("config"))
      .def("trainable_count", [](const cf::GroupedModel& g) { return cf::count_scalars(g.parameters(), true); })
      .def("parameter_names", [](const cf::GroupedModel& g, bool trainable_only) {
             std::vector<std::string> out;
             for (const auto& p : g.parameters())
               if (!trainable_only || p.trainable()) out.push_back(p.name);
             return out;
           }, py::arg("trainable_only") = false)
      .def("parameter", [](const cf::GroupedModel& g, const std::string& name) {
             for (const auto& p : g.parameters())
               if (p.name == name) return to_numpy(p.var.value());
             throw py::key_error(name);
           })
      .def("predict", [](const cf::GroupedModel& g, const std::vector<cf::Sample>& samples, std::size_t batch) {
             py::list out;
             for (const auto& p : cf::predict(g, samples, batch)) {
               py::dict d;
               d["id"] = p.id;
               d["label"] = p.label;
               d["p_abnormal"] = p.p_abnormal;
               d["map_max"] = p.map_max;
               d["score"] = p.score;
               d["map"] = to_numpy(p.map);
               out.append(d);
             }
             return out;
           }, py::arg("samples"), py::arg("batch") = 16);

  m.def("train", [](const cf::RunConfig& cfg, const std::vector<cf::Sample>& samples) {
    cf::TrainResult r = [&] {
      py::gil_scoped_release release;
      return cf::train(cfg, samples);
    }();
    py::list trace;
    for (const auto& s : r.trace) trace.append(py::make_tuple(s.step, s.total, s.seg, s.cls));
    return py::make_tuple(std::move(r.model), trace);
  }, py::arg("config"), py::arg("samples"), "Returns (model, [(step, total, seg, cls), ...]).");

  m.def("evaluate", [](const cf::GroupedModel& g, const std::vector<cf::Sample>& samples, const cf::RunConfig& cfg) {
    return report_dict(cf::evaluate(g, samples, cfg));
  }, py::arg("model"), py::arg("samples"), py::arg("config"));

  m.def("save_checkpoint", [](const cf::GroupedModel& g, const cf::RunConfig& cfg, const std::filesystem::path& path,
                              std::uint64_t step) { cf::save_checkpoint(path, cf::make_checkpoint(g, cfg, step)); },
        py::arg("model"), py::arg("config"), py::arg("path"), py::arg("step") = 0);
  m.def("load_checkpoint", [](const std::filesystem::path& path) {
    const cf::Checkpoint c = cf::load_checkpoint(path);
    return py::make_tuple(cf::restore_model(c), cf::checkpoint_config(c));
  }, py::arg("path"), "Returns (model, config).");

  m.def("auroc", [](const std::vector<double>& s, const std::vector<int>& y) { return cf::auroc(s, y); });
  m.def("average_precision", [](const std::vector<double>& s, const std::vector<int>& y) {
    return cf::average_precision(s, y);
  });
  m.def("sign_test_p_value", &cf::sign_test_p_value);

  m.def("selftest", [](std::size_t stride) {
    cf::SelfTestOptions o;
    o.gradcheck_stride = stride;
    std::vector<std::tuple<std::string, bool, std::string>> out;
    for (const auto& r : cf::run_selftest(o)) out.emplace_back(r.name, r.passed, r.detail);
    return out;
  }, py::arg("gradcheck_stride") = 1);
}
