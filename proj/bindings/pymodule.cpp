#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "magnet/runio.hpp"
#include "magnet/ts_encoder.hpp"

namespace py = pybind11;
using namespace magnet;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_numpy(const DoubleArray& arr) {
  Shape shape;
  for (py::ssize_t d = 0; d < arr.ndim(); ++d) shape.push_back(arr.shape(d));
  std::vector<double> values(arr.data(), arr.data() + arr.size());
  return Tensor::from_values(shape, std::move(values));
}

py::array_t<double> numpy_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> arr(shape);
  std::copy(t.values().begin(), t.values().end(), arr.mutable_data());
  return arr;
}

RunConfig config_from_string(const std::string& overrides, const std::string& preset) {
  nlohmann::json base = config_to_json(preset_config(preset));
  if (!overrides.empty()) {
    merge_config_json(base, nlohmann::json::parse(overrides));
  }
  RunConfig cfg = config_from_json(base);
  validate_config(cfg);
  return cfg;
}

py::dict metrics_to_dict(const MetricsReport& rep) {
  py::dict d;
  d["accuracy"] = rep.accuracy;
  d["macro_f1"] = rep.macro_f1;
  d["loss"] = rep.loss;
  d["confusion"] = rep.confusion;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Time-MAGNET multimodal HAR core: tensor ops, encoders, fusion, "
            "federated training simulation";

  py::register_exception<Error>(m, "MagnetError");

  py::class_<Rng>(m, "Rng")
      .def(py::init<uint64_t>(), py::arg("seed"))
      .def("uniform", [](Rng& r) { return r.uniform(); })
      .def("normal", &Rng::normal)
      .def("fork", &Rng::fork, py::arg("stream"));

  m.def("softmax", [](const DoubleArray& x, int axis) {
    return numpy_from_tensor(ops::softmax(tensor_from_numpy(x), axis));
  }, py::arg("x"), py::arg("axis") = -1);
  m.def("matmul", [](const DoubleArray& a, const DoubleArray& b) {
    return numpy_from_tensor(ops::matmul(tensor_from_numpy(a), tensor_from_numpy(b)));
  });
  m.def("relu", [](const DoubleArray& x) { return numpy_from_tensor(ops::relu(tensor_from_numpy(x))); });
  m.def("gelu", [](const DoubleArray& x) { return numpy_from_tensor(ops::gelu(tensor_from_numpy(x))); });
  m.def("silu", [](const DoubleArray& x) { return numpy_from_tensor(ops::silu(tensor_from_numpy(x))); });
  m.def("sigmoid", [](const DoubleArray& x) {
    return numpy_from_tensor(ops::sigmoid(tensor_from_numpy(x)));
  });
  m.def("weighted_cross_entropy",
        [](const DoubleArray& logits, const std::vector<int64_t>& labels,
           const std::vector<double>& weights) {
          return ops::weighted_cross_entropy(tensor_from_numpy(logits), labels, weights).item();
        });
  m.def("sinusoidal_encoding", [](int64_t seq_len, int64_t dim) {
    return numpy_from_tensor(sinusoidal_encoding(seq_len, dim));
  });
  m.def("relative_position_bucket", &relative_position_bucket, py::arg("rel"),
        py::arg("num_buckets") = 32, py::arg("max_distance") = 128);

  m.def("resolve_config",
        [](const std::string& overrides, const std::string& preset) {
          return config_to_json(config_from_string(overrides, preset)).dump(2);
        },
        py::arg("overrides") = "", py::arg("preset") = "desk",
        "Merge JSON overrides into a named preset and return the resolved config");

  m.def("synth",
        [](const std::string& config, const std::string& preset) {
          std::ostringstream log;
          cmd_synth(config_from_string(config, preset), log);
          return log.str();
        },
        py::arg("config"), py::arg("preset") = "desk",
        "Write a synthetic multimodal dataset in the MEx CSV layout");

  m.def("train",
        [](const std::string& config, bool federated, const std::string& preset) {
          std::ostringstream log;
          MetricsReport rep = train_and_export(config_from_string(config, preset), federated, log);
          py::dict d = metrics_to_dict(rep);
          d["log"] = log.str();
          return d;
        },
        py::arg("config"), py::arg("federated") = false, py::arg("preset") = "desk",
        "Run training and return the test-split metrics");

  m.def("evaluate",
        [](const std::string& config, const std::string& checkpoint, const std::string& split,
           bool embeddings, const std::string& preset) {
          std::ostringstream log;
          MetricsReport rep = evaluate_checkpoint(config_from_string(config, preset), checkpoint,
                                                  split, embeddings, log);
          py::dict d = metrics_to_dict(rep);
          d["log"] = log.str();
          return d;
        },
        py::arg("config"), py::arg("checkpoint"), py::arg("split") = "test",
        py::arg("embeddings") = false, py::arg("preset") = "desk");

  m.def("gradcheck",
        [](uint64_t seed) {
          py::dict out;
          for (const auto& [name, rep] : gradcheck_suite(seed)) {
            out[py::str(name)] = rep.max_rel_err;
          }
          return out;
        },
        py::arg("seed") = 42,
        "Run the finite-difference suite; returns per-block max relative errors");

  m.attr("__version__") = "0.1.0";
}
