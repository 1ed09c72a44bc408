// Python module fishersft._core.

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fishersft/baselines.hpp"
#include "fishersft/datagen.hpp"
#include "fishersft/design.hpp"
#include "fishersft/errors.hpp"
#include "fishersft/eval.hpp"
#include "fishersft/selection.hpp"
#include "fishersft/softmax.hpp"

namespace py = pybind11;
using namespace fishersft;

namespace {

py::dict selection_dict(const SelectionResult& r) {
  py::dict d;
  d["method"] = r.method;
  d["seed"] = r.seed;
  d["n"] = r.chosen.size();
  d["sigma0"] = r.sigma0;
  d["batch_size"] = r.batch_size;
  d["chosen"] = r.chosen;
  d["round_gains"] = r.round_gains;
  if (!r.weights.empty()) {
    d["weights"] = r.weights;
  }
  d["gain_evaluations"] = r.gain_evaluations;
  d["wall_ms"] = r.wall_ms;
  return d;
}

DensityMode density_mode(const std::string& name) {
  if (name == "inverse") {
    return DensityMode::kInverse;
  }
  if (name == "proportional") {
    return DensityMode::kProportional;
  }
  throw InvalidArgument("density mode must be \"inverse\" or \"proportional\"");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Greedy log-det sentence selection, softmax fitting and baselines";

  auto invalid_argument = py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<UnsupportedSize>(m, "UnsupportedSize", invalid_argument);
  auto invalid_state = py::register_exception<InvalidState>(m, "InvalidState", PyExc_RuntimeError);
  py::register_exception<PartialResultsError>(m, "PartialResultsError", invalid_state);
  py::register_exception<NumericalFailure>(m, "NumericalFailure", PyExc_ArithmeticError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);

  py::class_<DesignMatrix>(m, "DesignMatrix")
      .def(py::init<Eigen::Index, double>(), py::arg("dim"), py::arg("sigma0") = 1.0)
      .def_property_readonly("dim", &DesignMatrix::dim)
      .def_property_readonly("sigma0", &DesignMatrix::sigma0)
      .def_property_readonly("values", &DesignMatrix::values)
      .def_property_readonly("logdet", &DesignMatrix::logdet)
      .def("gain", &DesignMatrix::gain, py::arg("x"), "log det(V + X X^T) - log det(V) for a d x M block")
      .def("commit", &DesignMatrix::commit, py::arg("x"));

  py::class_<Sentence>(m, "Sentence")
      .def(py::init([](std::vector<std::uint32_t> tokens, Eigen::MatrixXf features) {
             return Sentence{std::move(tokens), std::move(features)};
           }),
           py::arg("tokens"), py::arg("features"))
      .def_readwrite("tokens", &Sentence::tokens)
      .def_readwrite("features", &Sentence::features);

  py::class_<Dataset>(m, "Dataset")
      .def(py::init([](std::uint32_t dim, std::uint32_t vocab_size, std::vector<Sentence> sentences) {
             Dataset d{dim, vocab_size, std::move(sentences)};
             validate(d);
             return d;
           }),
           py::arg("dim"), py::arg("vocab_size"), py::arg("sentences") = std::vector<Sentence>{})
      .def_readonly("dim", &Dataset::dim)
      .def_readonly("vocab_size", &Dataset::vocab_size)
      .def_readonly("sentences", &Dataset::sentences)
      .def("__len__", &Dataset::size)
      .def("__eq__", [](const Dataset& a, const Dataset& b) { return a == b; });

  m.def("read_dataset", &read_dataset, py::arg("path"));
  m.def("write_dataset", &write_dataset, py::arg("path"), py::arg("data"));
  m.def("design_groups", &design_groups, py::arg("data"));

  m.def(
      "generate_problem",
      [](std::uint64_t seed, Eigen::Index vocab, Eigen::Index dim, std::size_t sentences, std::uint32_t len_min,
         std::uint32_t len_max, bool normalize) {
        SyntheticConfig cfg;
        cfg.vocab = vocab;
        cfg.dim = dim;
        cfg.sentences = sentences;
        cfg.lengths = {len_min, len_max};
        cfg.normalize = normalize;
        SyntheticProblem p = generate_problem(cfg, seed);
        return py::make_tuple(std::move(p.data), std::move(p.theta_star.theta), std::move(p.vocab.vectors));
      },
      py::arg("seed"), py::arg("vocab") = 20, py::arg("dim") = 10, py::arg("sentences") = 5000,
      py::arg("len_min") = 5, py::arg("len_max") = 20, py::arg("normalize") = false,
      "Returns (dataset, theta_star d x L, vocabulary embeddings L x d)");

  m.def(
      "greedy_naive",
      [](const Dataset& data, std::size_t n, double sigma0) {
        const auto groups = design_groups(data);
        SelectionResult r;
        {
          py::gil_scoped_release release;
          r = greedy_naive(groups, n, sigma0);
        }
        return selection_dict(r);
      },
      py::arg("data"), py::arg("n"), py::arg("sigma0") = 1.0);

  m.def(
      "fisher_sft",
      [](const Dataset& data, std::size_t n, double sigma0, std::size_t batch_size, unsigned threads) {
        const auto groups = design_groups(data);
        LazyGreedyOptions opts;
        opts.sigma0 = sigma0;
        opts.batch_size = batch_size;
        opts.threads = threads;
        SelectionResult r;
        {
          py::gil_scoped_release release;
          r = fisher_sft(groups, n, opts);
        }
        return selection_dict(r);
      },
      py::arg("data"), py::arg("n"), py::arg("sigma0") = 1.0, py::arg("batch_size") = 32, py::arg("threads") = 1);

  m.def(
      "uniform_select",
      [](std::size_t count, std::size_t n, std::uint64_t seed) { return selection_dict(uniform_select(count, n, seed)); },
      py::arg("count"), py::arg("n"), py::arg("seed") = 0);

  m.def(
      "sentence_od",
      [](const Dataset& data, std::size_t n, double sigma0) { return selection_dict(sentence_od(data, n, sigma0)); },
      py::arg("data"), py::arg("n"), py::arg("sigma0") = 1.0);

  m.def(
      "density_sampling",
      [](const Dataset& data, std::size_t n, std::uint64_t seed, const std::string& mode, std::size_t rows,
         std::size_t bins) {
        DensityParams p;
        p.seed = seed;
        p.mode = density_mode(mode);
        p.rows = rows;
        p.bins = bins;
        return selection_dict(density_sampling(data, n, p));
      },
      py::arg("data"), py::arg("n"), py::arg("seed") = 0, py::arg("mode") = "inverse", py::arg("rows") = 50,
      py::arg("bins") = 1024);

  m.def(
      "clustered_sensitivity",
      [](const Dataset& data, std::size_t n, std::uint64_t seed, std::size_t k, double z) {
        ClusterParams p;
        p.seed = seed;
        p.k = k;
        p.z = z;
        return selection_dict(clustered_sensitivity(data, n, p));
      },
      py::arg("data"), py::arg("n"), py::arg("seed") = 0, py::arg("clusters") = 10, py::arg("z") = 2.0);

  m.def("ask_llm_prompt", &ask_llm_prompt, py::arg("text"));

  m.def(
      "ask_llm_select",
      [](const std::vector<std::string>& texts, std::size_t n, std::function<double(const std::string&)> score,
         int attempts, long backoff_ms, unsigned max_in_flight) {
        StubScorer scorer([&score](const std::string& prompt) {
          py::gil_scoped_acquire acquire;
          try {
            return score(prompt);
          } catch (py::error_already_set& e) {
            throw std::runtime_error(e.what());
          }
        });
        AskLlmOptions opts;
        opts.attempts = attempts;
        opts.initial_backoff = std::chrono::milliseconds(backoff_ms);
        opts.max_in_flight = max_in_flight;
        SelectionResult r;
        {
          py::gil_scoped_release release;
          r = ask_llm_select(texts, n, scorer, opts);
        }
        return selection_dict(r);
      },
      py::arg("texts"), py::arg("n"), py::arg("score"), py::arg("attempts") = 3, py::arg("backoff_ms") = 1000,
      py::arg("max_in_flight") = 4, "score(prompt) -> P(yes); returns the top n texts by score");

  m.def(
      "subset_nll",
      [](const Eigen::MatrixXd& theta, const Dataset& data, std::vector<std::size_t> indices) {
        return subset_nll(ParamMatrix{theta}, make_subset_data(data, indices));
      },
      py::arg("theta"), py::arg("data"), py::arg("indices"));

  m.def(
      "nll_gradient",
      [](const Eigen::MatrixXd& theta, const Dataset& data, std::vector<std::size_t> indices) {
        return nll_gradient(ParamMatrix{theta}, make_subset_data(data, indices));
      },
      py::arg("theta"), py::arg("data"), py::arg("indices"));

  m.def(
      "fit_mle",
      [](const Dataset& data, std::vector<std::size_t> indices, std::size_t max_iters, double grad_tol) {
        FitOptions opts;
        opts.max_iters = max_iters;
        opts.grad_tol = grad_tol;
        const SubsetData train = make_subset_data(data, indices);
        FitResult r;
        {
          py::gil_scoped_release release;
          r = fit_mle(train, ParamMatrix::zeros(data.dim, data.vocab_size), opts);
        }
        py::dict d;
        d["theta"] = r.params.theta;
        d["status"] = to_string(r.status);
        d["iterations"] = r.iterations;
        d["nll"] = r.nll;
        d["grad_inf_norm"] = r.grad_inf_norm;
        return d;
      },
      py::arg("data"), py::arg("indices"), py::arg("max_iters") = 5000, py::arg("grad_tol") = 1e-6);

  m.def(
      "prediction_errors",
      [](Eigen::MatrixXd theta_star, const Eigen::MatrixXd& theta_hat, const Dataset& data) {
        const PredictionErrors e = prediction_errors(ParamMatrix{theta_star}, ParamMatrix{theta_hat}, data);
        return py::make_tuple(e.max, e.mean);
      },
      py::arg("theta_star"), py::arg("theta_hat"), py::arg("data"), "Returns (e_max, e_mean)");

  m.def("project_zero_sum", [](Eigen::MatrixXd theta) {
    project_zero_sum(theta);
    return theta;
  });

  m.def("read_params", [](const std::string& path) { return read_params(path).theta; }, py::arg("path"));
  m.def(
      "write_params", [](const std::string& path, const Eigen::MatrixXd& theta) { write_params(path, {theta}); },
      py::arg("path"), py::arg("theta"));
}
