#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "gadt/attacks.hpp"
#include "gadt/dataset.hpp"
#include "gadt/diffaug.hpp"
#include "gadt/errors.hpp"
#include "gadt/experiment.hpp"
#include "gadt/gadt.hpp"
#include "gadt/gradcheck_suite.hpp"
#include "gadt/metrics.hpp"
#include "gadt/model.hpp"

namespace py = pybind11;
using namespace gadt;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_batch(const Array<T>& a) {
  if (a.ndim() != 3 && a.ndim() != 4) throw DimensionError("expected an image [C,H,W] or a batch [N,C,H,W]");
  Shape shape;
  if (a.ndim() == 3) shape.push_back(1);
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<std::size_t>(a.shape(i)));
  return Tensor<T>::from(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t, bool squeeze = false) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  if (squeeze && !shape.empty() && shape.front() == 1) shape.erase(shape.begin());
  py::array_t<T> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<ClassIndex> to_labels(const Array<long long>& a) {
  return std::vector<ClassIndex>(a.data(), a.data() + a.size());
}

py::array_t<long long> labels_array(const std::vector<ClassIndex>& labels) {
  py::array_t<long long> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(labels.size())});
  std::copy(labels.begin(), labels.end(), out.mutable_data());
  return out;
}

Dataset to_dataset(const Array<float>& images, const Array<long long>& labels, std::size_t classes) {
  if (images.ndim() != 4) throw DimensionError("images must be [N,C,H,W]");
  Dataset d;
  d.images.assign(images.data(), images.data() + images.size());
  d.labels = to_labels(labels);
  d.channels = static_cast<std::size_t>(images.shape(1));
  d.height = static_cast<std::size_t>(images.shape(2));
  d.width = static_cast<std::size_t>(images.shape(3));
  if (d.labels.size() != static_cast<std::size_t>(images.shape(0))) throw DimensionError("one label per image");
  std::size_t top = 0;
  for (auto l : d.labels) top = std::max<std::size_t>(top, static_cast<std::size_t>(l) + 1);
  d.classes = classes ? classes : top;
  d.source = "python";
  d.validate();
  return d;
}

py::tuple dataset_tuple(const Dataset& d) {
  py::array_t<float> images({static_cast<py::ssize_t>(d.size()), static_cast<py::ssize_t>(d.channels),
                             static_cast<py::ssize_t>(d.height), static_cast<py::ssize_t>(d.width)});
  std::copy(d.images.begin(), d.images.end(), images.mutable_data());
  return py::make_tuple(images, labels_array(d.labels));
}

py::object json_object(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

py::dict trace_dict(const GadtTraceEntry& e) {
  py::dict d;
  d["theta"] = e.theta;
  d["loss"] = e.loss;
  d["ce"] = e.ce;
  d["mse"] = e.mse;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Transfer attacks with optimised motion-blur and saturation augmentation";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<ContractError>(m, "ContractError", base);
  py::register_exception<NumericError>(m, "NumericError", base);
  py::register_exception<SpecError>(m, "SpecError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<TrainingError>(m, "TrainingError", base);
  py::register_exception<AttackError>(m, "AttackError", base);
  py::register_exception<OptimizerError>(m, "OptimizerError", base);

  py::class_<AugParams>(m, "AugParams")
      .def(py::init<>())
      .def(py::init([](double blur, double angle, double saturation) { return AugParams{blur, angle, saturation}; }),
           py::arg("blur"), py::arg("angle"), py::arg("saturation"))
      .def_readwrite("blur", &AugParams::blur)
      .def_readwrite("angle", &AugParams::angle)
      .def_readwrite("saturation", &AugParams::saturation)
      .def("valid", &AugParams::valid)
      .def("projected", &AugParams::projected)
      .def("__eq__", [](const AugParams& a, const AugParams& b) { return a == b; })
      .def("__repr__", [](const AugParams& p) {
        return "AugParams(blur=" + format_number(p.blur) + ", angle=" + format_number(p.angle) +
               ", saturation=" + format_number(p.saturation) + ")";
      });
  m.def("identity_params", [] { return AugParams::identity(); });

  py::class_<Model<float>>(m, "Model")
      .def_property_readonly("arch", [](const Model<float>& md) { return md.spec.arch; })
      .def_property_readonly("classes", [](const Model<float>& md) { return md.spec.classes; })
      .def_property_readonly("input_shape",
                             [](const Model<float>& md) {
                               return py::make_tuple(md.spec.channels, md.spec.height, md.spec.width);
                             })
      .def_property_readonly("crc", &Model<float>::weight_crc)
      .def_property_readonly("recorded_accuracy", [](const Model<float>& md) { return md.record.accuracy; })
      .def("logits", [](const Model<float>& md, const Array<float>& x) { return to_array(md.forward(to_batch(x))); })
      .def("predict",
           [](const Model<float>& md, const Array<float>& x) { return labels_array(predict(md, to_batch(x))); })
      .def("accuracy",
           [](const Model<float>& md, const Array<float>& images, const Array<long long>& labels) {
             return accuracy(md, to_dataset(images, labels, md.spec.classes));
           })
      .def("save", [](const Model<float>& md, const std::filesystem::path& p) { save_model(md, p); });

  m.def("load_model", &load_model, py::arg("path"));

  m.def(
      "train_model",
      [](const std::string& arch, const Array<float>& images, const Array<long long>& labels, std::size_t epochs,
         std::uint64_t seed, double learning_rate, bool adversarial, std::size_t classes) {
        auto data = to_dataset(images, labels, classes);
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.seed = seed;
        cfg.learning_rate = learning_rate;
        cfg.adversarial_training = adversarial;
        auto model = build_model<float>(architecture(arch, data.channels, data.height, data.width, data.classes), seed);
        py::gil_scoped_release release;
        return train(std::move(model), data, cfg);
      },
      py::arg("arch"), py::arg("images"), py::arg("labels"), py::arg("epochs") = 15, py::arg("seed") = 0,
      py::arg("learning_rate") = 0.03, py::arg("adversarial") = false, py::arg("classes") = 0);

  m.def(
      "synthetic",
      [](std::uint64_t seed, std::size_t count, std::size_t size, double noise) {
        return dataset_tuple(make_synthetic_shapes({seed, count, size, noise}));
      },
      py::arg("seed") = 0, py::arg("count") = 1000, py::arg("size") = 32, py::arg("noise") = 0.06);
  m.def("load_dataset", [](const std::string& source) { return dataset_tuple(load_dataset(source)); },
        py::arg("source"));

  m.def(
      "blur_kernel",
      [](double blur, double angle) {
        return to_array(blur_kernel(Tensor<double>::scalar(blur), Tensor<double>::scalar(angle)));
      },
      py::arg("blur"), py::arg("angle"));
  m.def(
      "transform",
      [](const Array<double>& x, const AugParams& theta) {
        return to_array(transform(to_batch(x), theta), x.ndim() == 3);
      },
      py::arg("images"), py::arg("theta"));

  m.def("image_mse", [](const Array<double>& a, const Array<double>& b) {
    return image_mse<double>({a.data(), static_cast<std::size_t>(a.size())}, {b.data(), static_cast<std::size_t>(b.size())});
  });
  m.def("psnr", [](const Array<double>& a, const Array<double>& b) {
    return psnr<double>({a.data(), static_cast<std::size_t>(a.size())}, {b.data(), static_cast<std::size_t>(b.size())});
  });
  m.def("ssim", [](const Array<double>& a, const Array<double>& b) {
    if (a.ndim() != 3) throw DimensionError("ssim expects [C,H,W] images");
    const Shape shape{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                      static_cast<std::size_t>(a.shape(2))};
    return ssim<double>({a.data(), static_cast<std::size_t>(a.size())}, {b.data(), static_cast<std::size_t>(b.size())},
                        shape);
  });

  m.def(
      "optimize_augmentation",
      [](const Model<float>& model, const Array<float>& image, long long label, double lambda, std::size_t iterations,
         double learning_rate, std::optional<AugParams> initial, std::uint64_t stream) {
        GadtConfig cfg;
        cfg.lambda = lambda;
        cfg.iterations = iterations;
        cfg.learning_rate = learning_rate;
        if (initial) cfg.initial = *initial;
        cfg.validate();
        auto x = to_batch(image);
        StageOneResult<float> r;
        {
          py::gil_scoped_release release;
          r = optimize_da_params(x, static_cast<ClassIndex>(label), model, cfg, stream);
        }
        py::dict out;
        out["theta"] = r.theta;
        out["transformed"] = to_array(r.x_trans, true);
        py::list trace;
        for (const auto& e : r.trace) trace.append(trace_dict(e));
        out["trace"] = trace;
        return out;
      },
      py::arg("model"), py::arg("image"), py::arg("label"), py::arg("lambda_") = 1.0, py::arg("iterations") = 20,
      py::arg("learning_rate") = 0.05, py::arg("initial") = std::nullopt, py::arg("stream") = 0);

  m.def("attack_ids", [] {
    std::vector<std::string> ids;
    for (auto id : all_attack_ids()) ids.push_back(to_string(id));
    return ids;
  });

  m.def(
      "attack",
      [](const Model<float>& model, const Array<float>& images, const Array<long long>& labels, const std::string& name,
         double epsilon, std::size_t steps, std::uint64_t seed, bool use_gadt, double lambda, std::size_t iterations,
         std::optional<Array<float>> pool_images, std::optional<Array<long long>> pool_labels) {
        AttackConfig acfg;
        acfg.epsilon = epsilon;
        acfg.steps = steps;
        acfg.seed = seed;
        acfg.validate();
        const auto id = parse_attack_id(name);
        auto x = to_batch(images);
        const auto y = to_labels(labels);
        std::optional<Dataset> pool;
        AttackOptions opts;
        if (pool_images && pool_labels) {
          pool = to_dataset(*pool_images, *pool_labels, model.spec.classes);
          opts.pool.images = &*pool;
        }
        py::dict out;
        py::gil_scoped_release release;
        AttackResult<float> r;
        std::vector<AugParams> thetas;
        if (use_gadt) {
          GadtConfig gcfg;
          gcfg.lambda = lambda;
          gcfg.iterations = iterations;
          gcfg.validate();
          auto g = gadt_attack(x, y, model, id, acfg, gcfg, opts);
          for (const auto& s : g.stage_one) thetas.push_back(s.theta);
          r = std::move(g.attack);
        } else {
          r = run_attack(id, x, y, model, acfg, opts);
        }
        py::gil_scoped_acquire acquire;
        out["adversarial"] = to_array(r.adversarial);
        out["success"] = r.success;
        out["linf_to_start"] = r.linf_to_start;
        out["theta"] = thetas;
        return out;
      },
      py::arg("model"), py::arg("images"), py::arg("labels"), py::arg("attack") = "mim",
      py::arg("epsilon") = 16.0 / 255.0, py::arg("steps") = 10, py::arg("seed") = 0, py::arg("gadt") = false,
      py::arg("lambda_") = 1.0, py::arg("iterations") = 20, py::arg("pool_images") = std::nullopt,
      py::arg("pool_labels") = std::nullopt);

  m.def(
      "gradcheck",
      [](const std::string& mode, std::uint64_t seed) {
        py::list out;
        for (const auto& c : gradcheck_suite(parse_precision(mode), seed)) {
          py::dict d;
          d["name"] = c.name;
          d["kind"] = c.kind;
          d["max_error"] = c.max_error;
          d["tolerance"] = c.tolerance;
          d["checked"] = c.checked;
          d["passed"] = c.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("mode") = "f64", py::arg("seed") = 0);

  m.def(
      "run_experiment",
      [](const std::string& config_text, std::optional<std::filesystem::path> csv,
         std::optional<std::filesystem::path> json) {
        auto cfg = parse_experiment_config(config_text);
        if (csv) cfg.csv = *csv;
        if (json) cfg.json = *json;
        ExperimentReport report;
        {
          py::gil_scoped_release release;
          report = run_experiment(cfg);
        }
        return json_object(report_json(report));
      },
      py::arg("config"), py::arg("csv") = std::nullopt, py::arg("json") = std::nullopt);

  m.def("render_report", [](const std::filesystem::path& p) { return render_report(read_report(p)); },
        py::arg("path"));
}
