#include "trj/experiment.hpp"
#include "trj/samplers.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace trj;

namespace {

// pybind11 holders cannot be shared_ptr<const T>; maps and targets are
// immutable, so the casts are harmless.
using PyMap = std::shared_ptr<TransportMap>;
using PyTarget = std::shared_ptr<TransdimensionalTarget>;

PyMap py_map(const MapPtr& p) { return std::const_pointer_cast<TransportMap>(p); }

std::vector<PyMap> py_maps(const std::vector<MapPtr>& v) {
  std::vector<PyMap> out;
  for (const auto& p : v) out.push_back(py_map(p));
  return out;
}

std::vector<MapPtr> cpp_maps(const std::vector<PyMap>& v) { return {v.begin(), v.end()}; }

}  // namespace

PYBIND11_MODULE(_trj, m) {
  m.doc() = "Transport reversible jump MCMC";
  m.attr("__version__") = "0.1.0";

  py::class_<Rng>(m, "Rng").def(py::init([](std::uint64_t seed, std::uint64_t stream) {
                                  return make_stream(seed, stream);
                                }),
                                py::arg("seed"), py::arg("stream") = 0);

  // ---- maps
  py::class_<TransportMap, PyMap>(m, "TransportMap")
      .def_property_readonly("dim", &TransportMap::dim)
      .def_property_readonly("kind", [](const TransportMap& t) { return std::string(to_string(t.kind())); })
      .def("forward", [](const TransportMap& t, const Vec& x) {
        auto r = t.forward(x);
        return py::make_tuple(r.value, r.logdet);
      }, "target -> reference; returns (z, log|det J|)")
      .def("inverse", [](const TransportMap& t, const Vec& z) {
        auto r = t.inverse(z);
        return py::make_tuple(r.value, r.logdet);
      })
      .def("log_density", [](const TransportMap& t, const Vec& x) { return flow_log_density(t, x); });
  py::class_<AffineMap, TransportMap, std::shared_ptr<AffineMap>>(m, "AffineMap")
      .def(py::init<Vec, Mat>(), py::arg("shift"), py::arg("chol"));
  py::class_<SplineFlowMap, TransportMap, std::shared_ptr<SplineFlowMap>>(m, "SplineFlowMap");
  m.def("fit_affine", [](const Mat& s) { return py_map(fit_affine(s)); }, py::arg("samples"));

  py::class_<FlowConfig>(m, "FlowConfig")
      .def(py::init<>())
      .def_readwrite("layers", &FlowConfig::layers)
      .def_readwrite("bins", &FlowConfig::bins)
      .def_readwrite("hidden", &FlowConfig::hidden);
  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("cosine_decay", &TrainConfig::cosine_decay)
      .def_readwrite("validation_fraction", &TrainConfig::validation_fraction)
      .def_readwrite("patience", &TrainConfig::patience)
      .def_readwrite("grad_clip", &TrainConfig::grad_clip)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("flow", &TrainConfig::flow);
  py::class_<TrainReport>(m, "TrainReport")
      .def_readonly("train_nll", &TrainReport::train_nll)
      .def_readonly("val_nll", &TrainReport::val_nll)
      .def_readonly("best_epoch", &TrainReport::best_epoch)
      .def_readonly("epochs_run", &TrainReport::epochs_run);
  m.def("fit_flow", [](const Mat& samples, const TrainConfig& c) {
    auto r = fit_flow(samples, c);
    return py::make_tuple(py_map(r.map), r.report);
  }, py::arg("samples"), py::arg("config") = TrainConfig{}, "returns (map, report)");

  // ---- targets
  py::class_<TransdimensionalTarget, PyTarget>(m, "Target")
      .def_property_readonly("name", &TransdimensionalTarget::name)
      .def_property_readonly("num_models", &TransdimensionalTarget::num_models)
      .def("dim", &TransdimensionalTarget::dim)
      .def("model_label", &TransdimensionalTarget::model_label)
      .def("log_density", py::overload_cast<std::size_t, const Vec&>(&TransdimensionalTarget::log_density, py::const_))
      .def("true_marginals", &TransdimensionalTarget::true_marginals)
      .def("has_exact_sampler", &TransdimensionalTarget::has_exact_sampler)
      .def("sample_model", &TransdimensionalTarget::sample_model)
      .def("sample_models", [](const TransdimensionalTarget& t, std::size_t k, std::size_t n, Rng& rng) {
        Mat s(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(t.dim(k)));
        for (Eigen::Index r = 0; r < s.rows(); ++r) s.row(r) = t.sample_model(k, rng).transpose();
        return s;
      }, py::arg("k"), py::arg("n"), py::arg("rng"));
  py::class_<SasTarget, TransdimensionalTarget, std::shared_ptr<SasTarget>>(m, "SasTarget")
      .def("exact_maps", [](const SasTarget& t) { return py_maps(t.exact_maps()); });
  py::class_<GaussianToyTarget, TransdimensionalTarget, std::shared_ptr<GaussianToyTarget>>(m, "GaussianToyTarget")
      .def("exact_maps", [](const GaussianToyTarget& t) { return py_maps(t.exact_maps()); })
      .def("log_evidence", &GaussianToyTarget::log_evidence)
      .def("posterior_mean", &GaussianToyTarget::posterior_mean)
      .def("posterior_chol", &GaussianToyTarget::posterior_chol);
  m.def("sas_target", [] { return std::const_pointer_cast<SasTarget>(sas_target()); });
  m.def("gaussian_toy", [](std::uint64_t seed, std::size_t n_obs) {
    return std::const_pointer_cast<GaussianToyTarget>(gaussian_toy(seed, n_obs));
  }, py::arg("seed"), py::arg("n_obs") = 30);

  // ---- samplers
  py::class_<JumpDistribution>(m, "JumpDistribution")
      .def(py::init<Mat>())
      .def_static("uniform_others", &JumpDistribution::uniform_others)
      .def_static("from_marginals", &JumpDistribution::from_marginals)
      .def_property_readonly("matrix", &JumpDistribution::matrix);
  py::class_<AcrossMove, std::shared_ptr<AcrossMove>>(m, "AcrossMove").def_property_readonly("kind", &AcrossMove::kind);
  py::class_<TrjMove, AcrossMove, std::shared_ptr<TrjMove>>(m, "TrjMove")
      .def(py::init([](const std::vector<PyMap>& maps, double aux_scale) {
             return std::make_shared<TrjMove>(cpp_maps(maps), Reference(aux_scale));
           }),
           py::arg("maps"), py::arg("aux_scale") = 1.0);
  m.def("acceptance_reduced", &acceptance_reduced);
  m.def("propose_alpha", [](const TransdimensionalTarget& t, const AcrossMove& move, std::size_t k, const Vec& theta,
                            std::size_t to, const JumpDistribution& j, Rng& rng) {
    const auto c = move.propose(t, make_state(t, k, theta, move.draw_aux(t, k, rng)), to, j, rng);
    return py::make_tuple(c.record.alpha, c.state.theta);
  }, "acceptance probability and proposed parameters of one across-model move");
  m.def("run_chain", [](const TransdimensionalTarget& t, const AcrossMove& move, const JumpDistribution& j,
                        std::size_t k0, const Vec& theta0, double rw_scale, std::size_t steps, Rng& rng) {
    ChainConfig cfg;
    cfg.steps = steps;
    const auto rw = RandomWalkKernel::isotropic(t, rw_scale);
    auto out = run_chain(t, make_state(t, k0, theta0, move.draw_aux(t, k0, rng)), move, j, rw, cfg, rng);
    return out.trajectory;
  }, py::arg("target"), py::arg("move"), py::arg("jump"), py::arg("k0"), py::arg("theta0"), py::arg("rw_scale"),
        py::arg("steps"), py::arg("rng"), "model index after each step");
  m.def("power_ladder", &power_ladder, py::arg("n"), py::arg("power") = 4.0);
  m.def("tempered_log_evidence", [](const TransdimensionalTarget& t, std::size_t k, std::size_t rungs,
                                    std::size_t samples, std::size_t burn_in, Rng& rng) {
    TemperingConfig c;
    c.betas = power_ladder(rungs);
    c.samples = samples;
    c.burn_in = burn_in;
    c.thin = 1;
    const auto run = parallel_tempering(t, k, c, rng);
    return stepping_stone_log_evidence(c.betas, run.log_lik);
  }, py::arg("target"), py::arg("k"), py::arg("rungs"), py::arg("samples"), py::arg("burn_in"), py::arg("rng"));

  // ---- estimators
  py::class_<ModelProbEstimate>(m, "ModelProbEstimate")
      .def_readonly("pi", &ModelProbEstimate::pi)
      .def_readonly("valid", &ModelProbEstimate::valid)
      .def_readonly("flags", &ModelProbEstimate::flags)
      .def_readonly("provenance", &ModelProbEstimate::provenance);
  m.def("mbe_from_samples", [](const TransdimensionalTarget& t, const std::vector<Mat>& samples, const AcrossMove& move,
                               const JumpDistribution& j, Rng& rng) {
    return mbe_from_samples(t, samples, move, j, rng);
  });
  m.def("occupancy", &occupancy);
  m.def("model_probs", &model_probs, py::arg("bf"), py::arg("pivot") = 0);

  // ---- experiments
  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def_static("from_json", [](const std::string& s) { return ExperimentConfig::from_json(nlohmann::json::parse(s)); })
      .def_static("load", &ExperimentConfig::load)
      .def("to_json", [](const ExperimentConfig& c) { return c.to_json().dump(); })
      .def("validate", &ExperimentConfig::validate)
      .def("hash", &ExperimentConfig::hash)
      .def_readwrite("seed", &ExperimentConfig::seed)
      .def_readwrite("out_dir", &ExperimentConfig::out_dir);
  py::class_<GroundTruth>(m, "GroundTruth")
      .def_readonly("pi", &GroundTruth::pi)
      .def_readonly("se", &GroundTruth::se)
      .def_readonly("method", &GroundTruth::method);
  m.def("ground_truth", [](const TransdimensionalTarget& t, std::size_t budget, std::uint64_t seed, const std::string& method) {
    GroundTruthOptions o;
    o.method = method;
    return ground_truth(t, budget, seed, o);
  }, py::arg("target"), py::arg("budget"), py::arg("seed"), py::arg("method") = "auto");
  m.def("run_experiment", [](const ExperimentConfig& c, std::size_t threads, bool dry_run) {
    py::gil_scoped_release nogil;
    const auto r = run_experiment(c, threads, dry_run);
    std::map<std::string, std::vector<Vec>> mbe;
    for (const auto& [kind, est] : r.mbe) {
      for (const auto& e : est) mbe[kind].push_back(e.pi);
    }
    return std::make_tuple(mbe, r.chain_occupancy, r.manifest.to_json().dump());
  }, py::arg("config"), py::arg("threads") = 1, py::arg("dry_run") = false,
        "returns (mbe estimates per kind, chain occupancy per kind, manifest JSON)");
}
