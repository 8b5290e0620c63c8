#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "xattnres/checkpoint.hpp"
#include "xattnres/config.hpp"
#include "xattnres/errors.hpp"
#include "xattnres/experiment.hpp"
#include "xattnres/metrics.hpp"

namespace py = pybind11;
using namespace xattnres;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

ExperimentConfig config_from(const py::dict& settings) {
  ExperimentConfig c;
  for (const auto& [k, v] : settings) {
    apply_setting(c, py::str(k).cast<std::string>(), py::str(v).cast<std::string>());
  }
  c.validate();
  return c;
}

BinaryMask mask_from(const U8Array& a) {
  if (a.ndim() != 2) throw ShapeError("mask must be a 2-D array");
  BinaryMask m(a.shape(0), a.shape(1));
  const auto* p = a.data();
  for (std::size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] = p[i] ? 1 : 0;
  return m;
}

py::dict trace_dict(const AttentionTrace& t) {
  py::list sources;
  for (const auto& tag : t.source_tags) sources.append(to_string(tag));
  py::array_t<double> w({t.entries, t.height, t.width});
  std::copy(t.weights.begin(), t.weights.end(), w.mutable_data());
  py::dict d;
  d["site"] = t.site;
  d["sources"] = sources;
  d["weights"] = w;
  d["uniformity"] = t.uniformity_score();
  return d;
}

py::dict record_dict(const RunRecord& r) {
  py::dict d;
  d["run_id"] = r.run_id;
  d["seed"] = r.seed;
  d["best_epoch"] = r.best_epoch;
  d["dice"] = r.test.mean_dice;
  d["iou"] = r.test.mean_iou;
  d["hd95"] = r.test.mean_hd95;
  d["per_class_dice"] = r.test.per_class_dice;
  d["parameters"] = r.parameters.total;
  d["overhead"] = r.parameters.xattnres_overhead;
  d["max_uniformity"] = r.max_uniformity();
  d["seconds"] = r.seconds;
  return d;
}

class Model {
 public:
  explicit Model(Backbone<float> net) : net_(std::move(net)) {}

  py::tuple forward(const F32Array& images) const {
    if (images.ndim() != 4) throw ShapeError("images must be [B, C, H, W]");
    Shape shape(images.shape(), images.shape() + 4);
    std::vector<float> v(images.data(), images.data() + images.size());
    ForwardArtifacts<float> art;
    {
      py::gil_scoped_release release;
      NoGradGuard guard;
      art = net_.forward(Tensor<float>::from_data(shape, std::move(v)));
    }
    const auto& s = art.logits.shape();
    py::array_t<float> out(std::vector<py::ssize_t>(s.begin(), s.end()));
    const auto data = art.logits.data();
    std::copy(data.begin(), data.end(), out.mutable_data());
    py::list traces;
    for (const auto& t : art.traces) traces.append(trace_dict(t));
    return py::make_tuple(out, traces);
  }

  std::string config_text() const { return backbone_config_text(net_.config()); }
  std::size_t parameters() const { return net_.parameter_count().total; }
  std::size_t overhead() const { return net_.parameter_count().xattnres_overhead; }

 private:
  Backbone<float> net_;
};

}  // namespace

PYBIND11_MODULE(_xattnres, m) {
  m.doc() = "Cross-stage attention residuals for a small U-Net";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);

  m.def("config_keys", &config_keys);
  m.def("config_text", [](const py::dict& settings) { return to_config_text(config_from(settings)); },
        py::arg("settings") = py::dict());

  m.def(
      "parameter_count",
      [](const py::dict& settings) {
        const auto c = config_from(settings);
        const auto n = Backbone<float>(c.model).parameter_count();
        return py::make_tuple(n.total, n.xattnres_overhead, closed_form_overhead(c.model));
      },
      py::arg("settings") = py::dict(), "(total, counted overhead, closed-form overhead)");

  m.def(
      "run",
      [](const py::dict& settings) {
        const auto c = config_from(settings);
        RunRecord r;
        {
          py::gil_scoped_release release;
          r = run_experiment(c);
        }
        return record_dict(r);
      },
      py::arg("settings"), "Train one run and write its outputs under out_dir.");

  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        GradcheckSuiteResult r;
        {
          py::gil_scoped_release release;
          r = run_gradcheck_suite(gradcheck_cases(seed));
        }
        py::dict d;
        d["passed"] = r.passed();
        d["cases"] = r.reports.size();
        d["failures"] = r.failures();
        return d;
      },
      py::arg("seed") = 7);

  m.def("dice", [](const U8Array& p, const U8Array& g) { return dice(mask_from(p), mask_from(g)); });
  m.def("iou", [](const U8Array& p, const U8Array& g) { return iou(mask_from(p), mask_from(g)); });
  m.def("hd95", [](const U8Array& p, const U8Array& g) { return hd95(mask_from(p), mask_from(g)); });

  py::class_<Model>(m, "Model")
      .def(py::init([](const py::dict& settings) { return Model(Backbone<float>(config_from(settings).model)); }),
           py::arg("settings") = py::dict())
      .def_static("load", [](const std::string& path) { return Model(load_checkpoint<float>(path)); })
      .def("forward", &Model::forward, py::arg("images"), "Returns (logits, routing traces).")
      .def_property_readonly("config_text", &Model::config_text)
      .def_property_readonly("parameters", &Model::parameters)
      .def_property_readonly("overhead", &Model::overhead);
}
