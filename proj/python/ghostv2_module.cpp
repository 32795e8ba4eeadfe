#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ghostv2/analysis.hpp"
#include "ghostv2/parallel.hpp"
#include "ghostv2/train.hpp"
#include "ghostv2/weights.hpp"

namespace py = pybind11;
using namespace ghostv2;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  if (a.ndim() != 4) throw ShapeError("expected a 4-d NHWC array, got " + std::to_string(a.ndim()) + " dimensions");
  const Shape s(a.shape(0), a.shape(1), a.shape(2), a.shape(3));
  return Tensor<T>(s, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
Array<T> to_array(const Tensor<T>& t) {
  const Shape& s = t.shape();
  Array<T> a({s.n(), s.h(), s.w(), s.c()});
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

ModelSpec spec_for(const std::string& config, std::optional<double> width) {
  ModelSpec spec = resolve_model_spec(config);
  if (width) spec.width = *width;
  spec.validate();
  return spec;
}

py::dict summary_dict(const ModelSummary& s) {
  py::list rows;
  for (const auto& r : s.rows) {
    rows.append(py::dict(py::arg("scope") = r.scope, py::arg("op") = r.op, py::arg("macs") = r.macs,
                         py::arg("params") = r.params));
  }
  return py::dict(py::arg("name") = s.name, py::arg("width") = s.width, py::arg("total_macs") = s.total_macs,
                  py::arg("total_params") = s.total_params, py::arg("rows") = rows);
}

py::dict flops_dict(const FlopsReport& r) {
  py::dict stages;
  for (const auto& g : r.by_stage) stages[py::str(g.name)] = g.macs;
  return py::dict(py::arg("subject") = r.subject, py::arg("total_macs") = r.total_macs,
                  py::arg("total_elementwise") = r.total_elementwise, py::arg("total_params") = r.total_params,
                  py::arg("by_stage") = stages);
}

class PyModel {
 public:
  PyModel(const std::string& config, std::optional<double> width, std::uint64_t seed)
      : model_(build_model<float>(spec_for(config, width), seed)) {}

  Array<float> forward(const Array<float>& x) const {
    Tensor<float> y;
    {
      py::gil_scoped_release release;
      y = ghostv2::forward(model_, to_tensor(x), Mode::eval);
    }
    return to_array(y);
  }
  void save(const std::string& path) const { save_weights(model_, path); }
  void load(const std::string& path) { load_weights(model_, path); }
  std::int64_t parameter_count() const { return model_.parameter_count(); }
  py::dict flops() const { return flops_dict(count_flops(model_)); }
  py::dict parameters() const {
    py::dict d;
    model_.for_each_param([&](const std::string& name, const Tensor<float>& t, bool) { d[py::str(name)] = to_array(t); });
    return d;
  }

 private:
  Model<float> model_;
};

}  // namespace

PYBIND11_MODULE(_ghostv2, m) {
  m.doc() = "GhostNetV2 / DFC attention micro-framework";

  auto base = py::register_exception<Error>(m, "GhostV2Error");
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ParameterError>(m, "ParameterError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<WeightFileError>(m, "WeightFileError", base.ptr());

  m.def("set_num_threads", &set_num_threads, py::arg("n"));
  m.def("num_threads", &num_threads);

  m.def(
      "full_fc_attention",
      [](const Array<double>& z, const Array<double>& f) { return to_array(full_fc_attention(to_tensor(z), {to_tensor(f)})); },
      py::arg("z"), py::arg("f"));
  m.def(
      "dfc_attention_general",
      [](const Array<double>& z, const Array<double>& fv, const Array<double>& fh) {
        return to_array(dfc_attention_general(to_tensor(z), {to_tensor(fv), to_tensor(fh)}));
      },
      py::arg("z"), py::arg("fv"), py::arg("fh"));
  m.def(
      "dfc_attention_conv",
      [](const Array<double>& z, const Array<double>& k_v, const Array<double>& k_h) {
        return to_array(dfc_attention_conv(to_tensor(z), to_tensor(k_v), to_tensor(k_h)));
      },
      py::arg("z"), py::arg("k_v"), py::arg("k_h"));
  m.def(
      "lift_conv_to_general",
      [](const Array<double>& k_v, const Array<double>& k_h, std::int64_t H, std::int64_t W) {
        const auto w = lift_conv_to_general(to_tensor(k_v), to_tensor(k_h), H, W);
        return py::make_tuple(to_array(w.vertical), to_array(w.horizontal));
      },
      py::arg("k_v"), py::arg("k_h"), py::arg("H"), py::arg("W"));

  m.def(
      "summarize", [](const std::string& config, std::optional<double> width) { return summary_dict(summarize(spec_for(config, width))); },
      py::arg("config") = "default", py::arg("width") = py::none());
  m.def(
      "compare_attention_costs",
      [](std::int64_t H, std::int64_t W, std::int64_t C, int k_h, int k_w, int factor) {
        py::dict d;
        for (const auto& r : compare_attention_costs(H, W, C, k_h, k_w, factor).rows) d[py::str(r.variant)] = r.macs;
        return d;
      },
      py::arg("H"), py::arg("W"), py::arg("C"), py::arg("k_h"), py::arg("k_w"), py::arg("factor") = 1);
  m.def(
      "dfc_receptive_field",
      [](int k_h, int k_w, std::int64_t size, std::int64_t channels, std::uint64_t seed) {
        Rng rng(seed);
        const auto kv = Tensor<double>::uniform(Shape(k_h, 1, 1, channels), -1, 1, rng);
        const auto kh = Tensor<double>::uniform(Shape(1, k_w, 1, channels), -1, 1, rng);
        const RfMask mask = receptive_field_probe(
            [&](const Ctx<double>& ctx, const Var<double>& x) { return dfc_attention_conv(x, ctx.bind(kv), ctx.bind(kh)); },
            Shape(1, size, size, channels), size / 2, size / 2, 0);
        py::array_t<bool> out({mask.height, mask.width});
        for (std::size_t i = 0; i < mask.cells.size(); ++i) out.mutable_data()[i] = mask.cells[i] != 0;
        return out;
      },
      py::arg("k_h"), py::arg("k_w"), py::arg("size"), py::arg("channels") = 1, py::arg("seed") = 0);
  m.def(
      "gradient_suite",
      [](const std::string& filter, bool include_blocks) {
        GradSuiteOptions o;
        o.filter = filter;
        o.include_blocks = include_blocks;
        GradSuiteResult r;
        {
          py::gil_scoped_release release;
          r = gradient_suite(o);
        }
        py::list out;
        for (const auto& c : r.reports) {
          out.append(py::dict(py::arg("name") = c.name, py::arg("passed") = c.passed,
                              py::arg("max_rel_error") = c.max_rel_error, py::arg("checked") = c.checked));
        }
        return out;
      },
      py::arg("filter") = "", py::arg("include_blocks") = false);
  m.def(
      "train_toy",
      [](int steps, const std::string& placement, std::uint64_t seed, double learning_rate, const std::string& weights) {
        TrainConfig cfg;
        cfg.steps = steps;
        cfg.placement = parse_placement(placement);
        cfg.seed = seed;
        cfg.learning_rate = learning_rate;
        cfg.weights_out = weights;
        TrainLog log;
        {
          py::gil_scoped_release release;
          log = train_toy(cfg);
        }
        std::vector<double> losses;
        for (const auto& s : log.steps) losses.push_back(s.loss);
        return py::dict(py::arg("placement") = log.placement, py::arg("losses") = losses,
                        py::arg("train_accuracy") = log.train.accuracy, py::arg("test_accuracy") = log.test.accuracy);
      },
      py::arg("steps") = 500, py::arg("placement") = "expanded", py::arg("seed") = 0,
      py::arg("learning_rate") = TrainConfig{}.learning_rate, py::arg("weights") = "");

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&, std::optional<double>, std::uint64_t>(), py::arg("config") = "mini",
           py::arg("width") = py::none(), py::arg("seed") = 0)
      .def("forward", &PyModel::forward, py::arg("x"), "Eval-mode logits for an NHWC float32 batch")
      .def("save", &PyModel::save, py::arg("path"))
      .def("load", &PyModel::load, py::arg("path"))
      .def("flops", &PyModel::flops)
      .def("parameters", &PyModel::parameters)
      .def_property_readonly("parameter_count", &PyModel::parameter_count);
}
