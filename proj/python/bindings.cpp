// Python bindings. Matrices cross the boundary as 2-D float64 numpy arrays,
// parameter vectors as 1-D arrays, run configurations as dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "ntkmeta/error.hpp"
#include "ntkmeta/harness.hpp"
#include "ntkmeta/linalg.hpp"
#include "ntkmeta/meta.hpp"
#include "ntkmeta/network.hpp"
#include "ntkmeta/ntk.hpp"
#include "ntkmeta/tasks.hpp"
#include "ntkmeta/verification.hpp"

namespace py = pybind11;
using namespace ntkmeta;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() == 1) return Matrix::column({a.data(), static_cast<std::size_t>(a.shape(0))});
  if (a.ndim() != 2) throw Error(ErrorCode::dimension_mismatch, "expected a 1-D or 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Matrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

Array from_matrix(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::memcpy(out.mutable_data(), m.data().data(), m.size() * sizeof(double));
  return out;
}

Vector to_vector(const Array& a) {
  if (a.ndim() != 1) throw Error(ErrorCode::dimension_mismatch, "expected a 1-D array");
  return Vector(a.data(), a.data() + a.shape(0));
}

Array from_vector(const Vector& v) {
  Array out(v.size());
  std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(double));
  return out;
}

Dataset to_dataset(const Array& x, const Array& y) { return {to_matrix(x), to_matrix(y)}; }

nlohmann::json to_json_doc(const py::object& config) {
  if (config.is_none()) return nlohmann::json::object();
  if (py::isinstance<py::str>(config)) return nlohmann::json::parse(config.cast<std::string>());
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(config).cast<std::string>());
}

RunConfig to_config(const py::object& config) {
  RunConfig c = run_config_from_json(to_json_doc(config));
  c.validate();
  return c;
}

py::dict task_dict(const Task& t) {
  py::dict d;
  d["support_x"] = from_matrix(t.support.x);
  d["support_y"] = from_matrix(t.support.y);
  d["query_x"] = from_matrix(t.query.x);
  d["query_y"] = from_matrix(t.query.y);
  d["support_labels"] = t.support_labels;
  d["query_labels"] = t.query_labels;
  d["num_classes"] = t.num_classes;
  return d;
}

AdaptTime to_time(const py::object& t) {
  if (py::isinstance<py::str>(t)) return AdaptTime::parse(t.cast<std::string>());
  return AdaptTime::finite(t.cast<double>());
}

}  // namespace

PYBIND11_MODULE(_ntkmeta, m) {
  m.doc() = "Meta-learning in the NTK function space";

  py::register_exception<Error>(m, "Error", PyExc_ValueError);
  // Registered later, so it runs first and adds the code and field.
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      const std::string field = e.field().empty() ? "" : " (field " + e.field() + ")";
      py::set_error(py::module_::import("ntkmeta._ntkmeta").attr("Error"),
                    (std::string(to_string(e.code())) + ": " + e.what() + field).c_str());
    }
  });

  py::enum_<LossKind>(m, "LossKind")
      .value("squared", LossKind::squared)
      .value("cross_entropy", LossKind::cross_entropy);

  py::class_<NetworkSpec>(m, "NetworkSpec")
      .def_static("mlp", &NetworkSpec::mlp, py::arg("input_dim"), py::arg("hidden"), py::arg("output_dim"),
                  py::arg("bias") = true)
      .def_static("conv", &NetworkSpec::conv, py::arg("input_dim"), py::arg("channels"),
                  py::arg("kernel_width"), py::arg("dense_hidden"), py::arg("output_dim"),
                  py::arg("bias") = true)
      .def_property_readonly("input_dim", &NetworkSpec::input_dim)
      .def_property_readonly("output_dim", &NetworkSpec::output_dim)
      .def_property_readonly("param_count", &NetworkSpec::param_count)
      .def("__repr__", &NetworkSpec::describe);

  m.def("init_params", [](const NetworkSpec& s, std::uint64_t seed) { return from_vector(init_params(s, seed)); },
        py::arg("spec"), py::arg("seed"));
  m.def("predict",
        [](const NetworkSpec& s, const Array& theta, const Array& x) {
          return from_matrix(predict(s, to_vector(theta), to_matrix(x)));
        },
        py::arg("spec"), py::arg("theta"), py::arg("x"));
  m.def("loss",
        [](const NetworkSpec& s, const Array& theta, const Array& x, const Array& y, LossKind k) {
          return loss(s, to_vector(theta), to_dataset(x, y), k);
        },
        py::arg("spec"), py::arg("theta"), py::arg("x"), py::arg("y"), py::arg("kind") = LossKind::squared);
  m.def("grad_loss",
        [](const NetworkSpec& s, const Array& theta, const Array& x, const Array& y, LossKind k) {
          return from_vector(grad_loss(s, to_vector(theta), to_dataset(x, y), k));
        },
        py::arg("spec"), py::arg("theta"), py::arg("x"), py::arg("y"), py::arg("kind") = LossKind::squared);
  m.def("jacobian",
        [](const NetworkSpec& s, const Array& theta, const Array& x) {
          return from_matrix(jacobian(s, to_vector(theta), to_vector(x)));
        },
        py::arg("spec"), py::arg("theta"), py::arg("x"));
  m.def("gram",
        [](const NetworkSpec& s, const Array& theta, const Array& x) {
          return from_matrix(gram(s, to_vector(theta), to_matrix(x)));
        },
        py::arg("spec"), py::arg("theta"), py::arg("x"));
  m.def("functional_grad_norm_sq",
        [](const NetworkSpec& s, const Array& theta, const Array& x, const Array& y, LossKind k) {
          return functional_grad_norm_sq(s, to_vector(theta), to_dataset(x, y), k);
        },
        py::arg("spec"), py::arg("theta"), py::arg("x"), py::arg("y"), py::arg("kind") = LossKind::squared);

  m.def("pade_expm", [](const Array& a, int order) { return from_matrix(pade_expm(to_matrix(a), order)); },
        py::arg("a"), py::arg("order") = 2);
  m.def("expm", [](const Array& a, int order) { return from_matrix(expm_scaled(to_matrix(a), order)); },
        py::arg("a"), py::arg("order") = 2);
  m.def("expm_oracle", [](const Array& a) { return from_matrix(expm_oracle(to_matrix(a))); }, py::arg("a"));

  m.def("adapt_closed_form",
        [](const NetworkSpec& s, const Array& theta, const Array& support_x, const Array& support_y,
           const Array& query_x, const py::object& t, int pade_order) {
          const AdaptedPredictor p = adapt_closed_form(s, to_vector(theta), to_dataset(support_x, support_y),
                                                       to_time(t), pade_order);
          return from_matrix(p.predict(to_matrix(query_x)));
        },
        "Predictions at query_x after closed-form adaptation for time t (a float or 'inf').",
        py::arg("spec"), py::arg("theta"), py::arg("support_x"), py::arg("support_y"), py::arg("query_x"),
        py::arg("t") = 1.0, py::arg("pade_order") = 2);
  m.def("linearized_flow",
        [](const NetworkSpec& s, const Array& theta, const Array& support_x, const Array& support_y,
           const Array& query_x, double t) {
          return from_matrix(
              linearized_flow(s, to_vector(theta), to_dataset(support_x, support_y), to_matrix(query_x), t)
                  .predictions);
        },
        py::arg("spec"), py::arg("theta"), py::arg("support_x"), py::arg("support_y"), py::arg("query_x"),
        py::arg("t"));

  m.def("encode_labels", [](const std::vector<int>& l, std::size_t c) { return from_matrix(encode_labels(l, c)); },
        py::arg("labels"), py::arg("num_classes"));
  m.def("decode_labels", [](const Array& e) { return decode_labels(to_matrix(e)); }, py::arg("encoded"));

  m.def("sample_task",
        [](const py::object& config, std::uint64_t seed) { return task_dict(sample_task(to_config(config).tasks, seed)); },
        "Draws one task from the distribution in a run configuration.", py::arg("config") = py::none(),
        py::arg("seed") = 0);

  m.def("config_json", [](const py::object& config) { return to_json(to_config(config)).dump(); },
        "Canonical JSON of a run configuration with defaults filled in.", py::arg("config") = py::none());
  m.def("config_hash", [](const py::object& config) { return to_config(config).hash(); },
        py::arg("config") = py::none());

  m.def("train",
        [](const py::object& config, const std::string& output_dir) {
          const RunConfig c = to_config(config);
          TrainResult r;
          {
            py::gil_scoped_release release;
            r = train(c, output_dir, !output_dir.empty());
          }
          py::dict d;
          d["theta"] = from_vector(r.checkpoint.theta);
          d["iteration"] = r.checkpoint.iteration;
          d["metrics_csv"] = r.metrics_csv;
          d["failed_iterations"] = r.failed_iterations;
          return d;
        },
        "Meta-trains; writes metrics, wall time and checkpoint when output_dir is given.",
        py::arg("config") = py::none(), py::arg("output_dir") = "");
  m.def("evaluate",
        [](const py::object& config, const py::object& theta) {
          const RunConfig c = to_config(config);
          Checkpoint ck = initial_checkpoint(c);
          if (!theta.is_none()) ck.theta = to_vector(theta.cast<Array>());
          py::gil_scoped_release release;
          return evaluate(c, ck).csv;
        },
        "Evaluation CSV at parameters theta (default: the initialization).", py::arg("config") = py::none(),
        py::arg("theta") = py::none());
  m.def("gradcheck", [](const py::object& config) { return gradcheck(to_config(config)).csv; },
        py::arg("config") = py::none());
  m.def("expm_check", [](const py::object& config) { return expm_check(to_config(config)).csv; },
        py::arg("config") = py::none());
  m.def("theorem_sweep", [](const py::object& config) { return theorem_sweep(to_config(config)).csv; },
        py::arg("config") = py::none());
}
