// Python bindings for the core operations: mixture inference, gradients,
// TD targets, clustering metrics and the simulator. Tensors cross the
// boundary as numpy float64 arrays.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "opc/checks.hpp"
#include "opc/config.hpp"
#include "opc/control.hpp"
#include "opc/env.hpp"
#include "opc/metrics.hpp"
#include "opc/perception.hpp"

namespace py = pybind11;
using namespace opc;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  std::vector<std::size_t> shape(a.ndim());
  for (py::ssize_t d = 0; d < a.ndim(); ++d) shape[d] = static_cast<std::size_t>(a.shape(d));
  std::vector<double> values(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(values));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> a(shape);
  std::copy(t.data(), t.data() + t.size(), a.mutable_data());
  return a;
}

std::vector<double> vector_from_array(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  return std::vector<double>(a.data(), a.data() + a.size());
}

FullConfig config_from_dict(const py::dict& d) {
  KeyValueConfig kv;
  for (const auto& item : d) {
    kv.set(py::str(item.first), py::str(item.second));
  }
  return resolve_config(kv);
}

}  // namespace

PYBIND11_MODULE(_opc, m) {
  m.doc() = "Object-centric perception and control: core operations";

  m.def(
      "e_step",
      [](py::array_t<double> x, py::array_t<double> psi, double sigma2) {
        return array_from_tensor(e_step(vector_from_array(x), tensor_from_array(psi), sigma2));
      },
      py::arg("x"), py::arg("psi"), py::arg("sigma2") = 0.25,
      "Posterior responsibilities [D,K] of pixels x under component predictions psi [K,D].");

  m.def(
      "expected_loglik",
      [](py::array_t<double> x, py::array_t<double> psi, py::array_t<double> eta, double sigma2) {
        return expected_loglik(vector_from_array(x), tensor_from_array(psi),
                               tensor_from_array(eta), sigma2);
      },
      py::arg("x"), py::arg("psi"), py::arg("eta"), py::arg("sigma2") = 0.25);

  m.def(
      "em_input",
      [](py::array_t<double> eta, py::array_t<double> psi, py::array_t<double> x) {
        return array_from_tensor(
            em_input(tensor_from_array(eta), tensor_from_array(psi), vector_from_array(x)));
      },
      py::arg("eta"), py::arg("psi"), py::arg("x"),
      "Per-component network input eta_k * (psi_k - x), shaped [K,D].");

  m.def(
      "analytic_theta_grad",
      [](py::array_t<double> x, py::array_t<double> psi, py::array_t<double> eta,
         py::array_t<double> dpsi_dtheta, double sigma2) {
        return array_from_tensor(analytic_theta_grad(vector_from_array(x), tensor_from_array(psi),
                                                     tensor_from_array(eta),
                                                     tensor_from_array(dpsi_dtheta), sigma2));
      },
      py::arg("x"), py::arg("psi"), py::arg("eta"), py::arg("dpsi_dtheta"),
      py::arg("sigma2") = 0.25);

  m.def("td_target", &td_target, py::arg("reward"), py::arg("gamma"), py::arg("v_next"));
  m.def("nstep_returns", &nstep_returns, py::arg("rewards"), py::arg("values"), py::arg("gamma"),
        py::arg("n"));
  m.def("softmax", &softmax, py::arg("logits"));
  m.def("entropy_of_logits", &entropy_of_logits, py::arg("logits"));

  m.def("adjusted_mutual_info", &adjusted_mutual_info, py::arg("a"), py::arg("b"));
  m.def(
      "period_reward",
      [](const std::vector<std::pair<std::uint64_t, double>>& series, std::uint64_t window) {
        std::vector<RewardPoint> pts;
        pts.reserve(series.size());
        for (const auto& [o, r] : series) pts.push_back({o, r});
        return period_reward(pts, window);
      },
      py::arg("series"), py::arg("window") = 20000,
      "Sums (observation, reward) points into disjoint windows; partial tails dropped.");

  m.def(
      "run_checks",
      [](const std::string& scope) {
        py::list out;
        for (const CheckResult& r : run_checks(scope)) {
          py::dict d;
          d["name"] = r.name;
          d["pass"] = r.pass;
          d["stat"] = r.stat;
          d["detail"] = r.detail;
          out.append(d);
        }
        return out;
      },
      py::arg("scope") = "all", "Oracle suites: grad | estep | emtoy | all.");

  py::class_<StepResult>(m, "StepResult")
      .def_property_readonly("reward", [](const StepResult& s) { return s.reward; })
      .def_property_readonly(
          "pixels",
          [](const StepResult& s) {
            Tensor t({s.frame.side, s.frame.side},
                     std::vector<double>(s.frame.pixels.begin(), s.frame.pixels.end()));
            return array_from_tensor(t);
          })
      .def_property_readonly("labels", [](const StepResult& s) {
        py::array_t<int> a({py::ssize_t(s.frame.side), py::ssize_t(s.frame.side)});
        std::copy(s.frame.labels.begin(), s.frame.labels.end(), a.mutable_data());
        return a;
      });

  py::class_<WaterworldEnv>(m, "WaterworldEnv")
      .def(py::init([](const py::dict& cfg, std::uint64_t seed) {
             return new WaterworldEnv(config_from_dict(cfg).env, seed);
           }),
           py::arg("config") = py::dict(), py::arg("seed") = 1)
      .def(
          "reset",
          [](WaterworldEnv& env, std::uint64_t seed) {
            StepResult r;
            r.frame = env.reset(seed);
            return r;
          },
          py::arg("seed"))
      .def(
          "step",
          [](WaterworldEnv& env, int action) {
            if (action < 0 || action >= kNumActions) throw std::invalid_argument("bad action");
            return env.step(static_cast<Action>(action));
          },
          py::arg("action"))
      .def_property_readonly("step_count", &WaterworldEnv::step_count)
      .def_property_readonly("episode_done", &WaterworldEnv::episode_done)
      .def("serialize_state", &WaterworldEnv::serialize_state)
      .def("restore_state", &WaterworldEnv::restore_state);

  m.def(
      "resolve_config",
      [](const py::dict& d) {
        py::dict out;
        const KeyValueConfig snap = snapshot_config(config_from_dict(d));
        for (const auto& [k, v] : snap.values()) {
          out[py::str(k)] = v;
        }
        return out;
      },
      py::arg("config") = py::dict(),
      "Resolves a flat key=value mapping into the full defaulted key set.");
}
