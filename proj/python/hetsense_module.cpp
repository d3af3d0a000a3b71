#include "hetsense/dynamics.hpp"
#include "hetsense/experiments.hpp"
#include "hetsense/optimizer.hpp"
#include "hetsense/rip.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>
#include <string>

namespace py = pybind11;
using namespace hetsense;

namespace {

ExperimentConfig resolve(const std::map<std::string, std::string>& values, ExperimentKind fallback) {
  KeyValueConfig kv;
  for (const auto& [k, v] : values) kv.set(k, v);
  ExperimentConfig c = build_experiment_config(kv, fallback);
  c.validate();
  return c;
}

py::dict records_to_columns(const std::vector<MetricRecord>& recs) {
  std::vector<Index> t;
  std::vector<std::string> env;
  std::vector<double> loss, s1, smin, q, eop, efro2, err;
  for (const auto& r : recs) {
    t.push_back(r.t);
    env.push_back(r.env_id);
    loss.push_back(r.loss);
    s1.push_back(r.sigma1_r);
    smin.push_back(r.sigma_min_r);
    q.push_back(r.q_fro);
    eop.push_back(r.e_op);
    efro2.push_back(r.e_fro2);
    err.push_back(r.recovery_error);
  }
  py::dict d;
  d["t"] = t;
  d["env_id"] = env;
  d["loss"] = loss;
  d["sigma1_r"] = s1;
  d["sigma_min_r"] = smin;
  d["q_fro"] = q;
  d["e_op"] = eop;
  d["e_fro2"] = efro2;
  d["recovery_error"] = err;
  return d;
}

py::dict metrics_dict(const MetricRecord& r) {
  py::dict d;
  d["sigma1_r"] = r.sigma1_r;
  d["sigma_min_r"] = r.sigma_min_r;
  d["q_fro"] = r.q_fro;
  d["e_op"] = r.e_op;
  d["e_fro2"] = r.e_fro2;
  d["recovery_error"] = r.recovery_error;
  return d;
}

}  // namespace

PYBIND11_MODULE(_hetsense, m) {
  m.doc() = "Heterogeneous-environment matrix sensing simulator";
  m.attr("__version__") = kVersion;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);

  py::class_<GroundTruthModel>(m, "GroundTruthModel")
      .def_property_readonly("d", &GroundTruthModel::d)
      .def_property_readonly("r1", &GroundTruthModel::r1)
      .def_property_readonly("r2", &GroundTruthModel::r2)
      .def_property_readonly("epsilon1", &GroundTruthModel::epsilon1)
      .def_property_readonly("u_star", [](const GroundTruthModel& g) { return g.u_star().columns(); })
      .def_property_readonly("v_star", [](const GroundTruthModel& g) { return g.v_star().columns(); })
      .def("invariant_signal", &GroundTruthModel::invariant_signal);

  m.def(
      "make_ground_truth",
      [](Index d, Index r1, Index r2, std::uint64_t seed, bool orthogonal) {
        return orthogonal ? make_orthogonal_ground_truth(d, r1, r2, seed) : make_ground_truth(d, r1, r2, seed);
      },
      py::arg("d"), py::arg("r1"), py::arg("r2"), py::arg("seed"), py::arg("orthogonal") = false);

  py::class_<EnvironmentDistribution>(m, "EnvironmentDistribution")
      .def_static("uniform_diagonal", &EnvironmentDistribution::uniform_diagonal, py::arg("half_width"),
                  py::arg("r2"))
      .def_static("two_point", &EnvironmentDistribution::two_point, py::arg("magnitude"), py::arg("r2"))
      .def_property_readonly("r2", &EnvironmentDistribution::r2)
      .def("sup_abs_diagonal", &EnvironmentDistribution::sup_abs_diagonal)
      .def("describe", &EnvironmentDistribution::describe)
      .def(
          "sample",
          [](const EnvironmentDistribution& dist, std::uint64_t seed) {
            const auto env = sample_environment(dist, seed);
            return py::make_tuple(env.sigma, env.env_id);
          },
          py::arg("seed"));

  m.def("recovery_error", &recovery_error, py::arg("u"), py::arg("model"));
  m.def(
      "compute_metrics", [](const Matrix& u, const GroundTruthModel& model) { return metrics_dict(compute_metrics(u, model)); },
      py::arg("u"), py::arg("model"));
  m.def(
      "decompose",
      [](const Matrix& u, const GroundTruthModel& model) {
        const auto p = decompose(u, model);
        return py::make_tuple(p.r_mat, p.q_mat, p.e_mat);
      },
      py::arg("u"), py::arg("model"));
  m.def(
      "subspace_angle",
      [](const Matrix& a, const Matrix& b) {
        return subspace_angle(OrthonormalBasis::from_columns(a), OrthonormalBasis::from_columns(b));
      },
      py::arg("a"), py::arg("b"));
  m.def("cr_sequence", &cr_sequence, py::arg("alpha"), py::arg("eta"), py::arg("steps"));
  m.def(
      "check_supermartingale",
      [](const EnvironmentDistribution& dist, double eta, Index n_samples, std::uint64_t seed) {
        const auto r = check_supermartingale(dist, eta, n_samples, seed);
        py::dict d;
        d["estimate"] = r.estimate;
        d["std_error"] = r.std_error;
        d["exact"] = r.exact;
        d["pass"] = r.pass;
        return d;
      },
      py::arg("dist"), py::arg("eta"), py::arg("n_samples"), py::arg("seed"));

  m.def("known_config_keys", &known_config_keys);
  m.def(
      "resolve_config",
      [](const std::map<std::string, std::string>& values, const std::string& fallback) {
        const auto c = resolve(values, parse_experiment_kind(fallback));
        return to_key_values(c).values();
      },
      py::arg("values"), py::arg("fallback") = "single-run");
  m.def(
      "config_digest",
      [](const std::map<std::string, std::string>& values, const std::string& fallback) {
        return experiment_digest(resolve(values, parse_experiment_kind(fallback)));
      },
      py::arg("values"), py::arg("fallback") = "single-run");

  m.def(
      "run_single",
      [](const std::map<std::string, std::string>& values, std::uint64_t seed) {
        const auto c = resolve(values, ExperimentKind::kSingleRun);
        Trajectory traj;
        SummaryRow row;
        {
          py::gil_scoped_release release;
          row = run_cell(c, to_string(c.mode), c.dist.het, seed, &traj);
        }
        py::dict out;
        out["records"] = records_to_columns(traj.records);
        out["final_u"] = traj.final_state.u;
        out["digest"] = traj.config_digest;
        out["diverged"] = row.diverged;
        return out;
      },
      py::arg("values"), py::arg("seed"));

  m.def(
      "run_experiment",
      [](const std::map<std::string, std::string>& values, const std::string& fallback) {
        const auto c = resolve(values, parse_experiment_kind(fallback));
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(c);
        }
        py::dict out;
        out["exit_code"] = r.exit_code;
        out["files"] = r.files;
        out["report"] = r.report;
        return out;
      },
      py::arg("values"), py::arg("fallback") = "single-run");
}
