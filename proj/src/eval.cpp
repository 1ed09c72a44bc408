#include "fishersft/eval.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <tuple>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "fishersft/errors.hpp"
#include "fishersft/parallel.hpp"
#include "fishersft/rng.hpp"

namespace fishersft {
namespace {

void check_shapes(const ParamMatrix& a, const ParamMatrix& b, const Dataset& data) {
  if (a.dim() != b.dim() || a.vocab_size() != b.vocab_size() || a.dim() != static_cast<Eigen::Index>(data.dim)) {
    throw InvalidArgument(fmt::format("prediction error: shapes {}x{}, {}x{} and d={} disagree", a.dim(),
                                      a.vocab_size(), b.dim(), b.vocab_size(), data.dim));
  }
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) {
    return "";
  }
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const std::string v = trim(value);
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw InvalidArgument(fmt::format("config: {}={} is not a valid number", key, value));
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (v == "true" || v == "1" || v == "yes") {
    return true;
  }
  if (v == "false" || v == "0" || v == "no") {
    return false;
  }
  throw InvalidArgument(fmt::format("config: {}={} is not a boolean", key, value));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) {
      out.push_back(item);
    }
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& items) {
  return fmt::format("{}", fmt::join(items, ","));
}

}  // namespace

PredictionErrors prediction_errors(const ParamMatrix& theta_star, const ParamMatrix& theta_hat, const Dataset& data) {
  check_shapes(theta_star, theta_hat, data);
  const Eigen::MatrixXd delta = theta_star.theta - theta_hat.theta;
  PredictionErrors out;
  double total = 0.0;
  for (const Sentence& s : data.sentences) {
    double sentence = 0.0;
    for (Eigen::Index j = 0; j < s.features.cols(); ++j) {
      sentence += (delta.transpose() * s.features.col(j).cast<double>()).norm();
    }
    out.max = std::max(out.max, sentence);
    total += sentence;
  }
  out.mean = data.size() == 0 ? 0.0 : total / static_cast<double>(data.size());
  return out;
}

double max_pred_error(const ParamMatrix& theta_star, const ParamMatrix& theta_hat, const Dataset& data) {
  return prediction_errors(theta_star, theta_hat, data).max;
}

double mean_pred_error(const ParamMatrix& theta_star, const ParamMatrix& theta_hat, const Dataset& data) {
  return prediction_errors(theta_star, theta_hat, data).mean;
}

const std::vector<std::string>& experiment_methods() {
  static const std::vector<std::string> methods{"fisher-sft", "greedy-naive", "uniform",
                                                "sentence-od", "density",      "clustered"};
  return methods;
}

SelectionResult run_selection(const std::string& method, const Dataset& data, std::size_t n, std::uint64_t seed,
                              const ExperimentConfig& cfg) {
  SelectionResult r;
  if (method == "fisher-sft") {
    LazyGreedyOptions opts;
    opts.sigma0 = cfg.sigma0;
    opts.batch_size = cfg.batch_size;
    opts.threads = cfg.threads;
    r = fisher_sft(design_groups(data), n, opts);
  } else if (method == "greedy-naive") {
    r = greedy_naive(design_groups(data), n, cfg.sigma0);
  } else if (method == "uniform") {
    r = uniform_select(data.size(), n, seed);
  } else if (method == "sentence-od") {
    r = sentence_od(data, n, cfg.sigma0, cfg.threads);
  } else if (method == "density") {
    DensityParams p = cfg.density;
    p.seed = seed;
    r = density_sampling(data, n, p);
  } else if (method == "clustered") {
    ClusterParams p = cfg.cluster;
    p.seed = seed;
    r = clustered_sensitivity(data, n, p);
  } else {
    throw InvalidArgument(fmt::format("unknown method \"{}\"", method));
  }
  r.seed = seed;
  return r;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  for (const auto& m : cfg.methods) {
    if (std::find(experiment_methods().begin(), experiment_methods().end(), m) == experiment_methods().end()) {
      throw InvalidArgument(fmt::format("run_experiment: unknown method \"{}\"", m));
    }
  }
  std::vector<std::uint64_t> seeds = cfg.seeds;
  if (seeds.empty()) {
    for (std::uint64_t s = 0; s < 20; ++s) {
      seeds.push_back(s);
    }
  }

  // One problem per seed, shared by every (method, n) cell of that seed.
  // Theta_* is compared in its zero-sum representative: adding a vector to
  // every column leaves the model unchanged and the fit cannot recover it.
  std::vector<ParamMatrix> stars(seeds.size());
  std::vector<Dataset> datasets(seeds.size());
  if (cfg.dataset_path) {
    if (!cfg.theta_star_path) {
      throw InvalidArgument("run_experiment: a dataset path needs a matching theta-star path");
    }
    const Dataset data = read_dataset(*cfg.dataset_path);
    validate(data);
    ParamMatrix star = read_params(*cfg.theta_star_path);
    project_zero_sum(star.theta);
    std::fill(datasets.begin(), datasets.end(), data);
    std::fill(stars.begin(), stars.end(), star);
  } else {
    std::optional<EmbeddingTable> table;
    if (cfg.generator.embedding_table) {
      table = load_embedding_table(*cfg.generator.embedding_table);
    }
    parallel_for(0, seeds.size(), cfg.threads, [&](std::size_t s) {
      SyntheticProblem p = generate_problem(cfg.generator, table ? &*table : nullptr, seeds[s]);
      stars[s] = std::move(p.theta_star);
      project_zero_sum(stars[s].theta);
      datasets[s] = std::move(p.data);
    });
  }

  struct Cell {
    std::size_t method;
    std::size_t n;
    std::size_t seed_index;
  };
  std::vector<Cell> cells;
  for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
    for (std::size_t n : cfg.n_grid) {
      for (std::size_t s = 0; s < seeds.size(); ++s) {
        cells.push_back({m, n, s});
      }
    }
  }

  // Cells already run in parallel; each selection stays single-threaded.
  ExperimentConfig cell_cfg = cfg;
  cell_cfg.threads = 1;
  ExperimentReport report;
  report.records.resize(cells.size());
  parallel_for(0, cells.size(), cfg.threads, [&](std::size_t c) {
    const Cell& cell = cells[c];
    const std::string& method = cfg.methods[cell.method];
    const Dataset& data = datasets[cell.seed_index];
    const std::uint64_t seed = seeds[cell.seed_index];
    const auto start = std::chrono::steady_clock::now();

    ExperimentRecord rec;
    rec.method = method;
    rec.n = cell.n;
    rec.seed = seed;
    const std::uint64_t selection_seed = derive_seed(seed, fmt::format("select:{}:{}", method, cell.n));
    const SelectionResult sel = run_selection(method, data, cell.n, selection_seed, cell_cfg);
    try {
      const SubsetData train = make_subset_data(data, sel.chosen);
      const FitResult fit = fit_mle(train, ParamMatrix::zeros(data.dim, data.vocab_size), cfg.fit);
      const PredictionErrors err = prediction_errors(stars[cell.seed_index], fit.params, data);
      rec.e_max = err.max;
      rec.e_mean = err.mean;
      rec.fit_status = to_string(fit.status);
    } catch (const NumericalFailure&) {
      rec.e_max = rec.e_mean = std::numeric_limits<double>::quiet_NaN();
      rec.fit_status = "numerical_failure";
    } catch (const InvalidArgument&) {
      rec.e_max = rec.e_mean = std::numeric_limits<double>::quiet_NaN();
      rec.fit_status = "empty_subset";
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    report.records[c] = std::move(rec);
  });

  std::sort(report.records.begin(), report.records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.method, a.n, a.seed) < std::tie(b.method, b.n, b.seed);
  });
  report.aggregates = aggregate(report.records);
  return report;
}

std::vector<AggregateRow> aggregate(const std::vector<ExperimentRecord>& records) {
  std::map<std::pair<std::string, std::size_t>, std::vector<const ExperimentRecord*>> groups;
  for (const auto& r : records) {
    groups[{r.method, r.n}].push_back(&r);
  }
  std::vector<AggregateRow> rows;
  for (const auto& [key, members] : groups) {
    AggregateRow row;
    row.method = key.first;
    row.n = key.second;
    std::vector<double> emax;
    std::vector<double> emean;
    for (const auto* r : members) {
      if (std::isfinite(r->e_max) && std::isfinite(r->e_mean)) {
        emax.push_back(r->e_max);
        emean.push_back(r->e_mean);
      } else {
        ++row.failed;
      }
    }
    row.runs = emax.size();
    const auto mean_se = [](const std::vector<double>& v) -> std::pair<double, double> {
      if (v.empty()) {
        return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
      }
      double m = 0.0;
      for (double x : v) {
        m += x;
      }
      m /= static_cast<double>(v.size());
      if (v.size() < 2) {
        return {m, 0.0};
      }
      double ss = 0.0;
      for (double x : v) {
        ss += (x - m) * (x - m);
      }
      const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
      return {m, sd / std::sqrt(static_cast<double>(v.size()))};
    };
    std::tie(row.e_max_mean, row.e_max_se) = mean_se(emax);
    std::tie(row.e_mean_mean, row.e_mean_se) = mean_se(emean);
    rows.push_back(row);
  }
  return rows;
}

std::string records_csv(const std::vector<ExperimentRecord>& records) {
  std::string out = "method,n,seed,e_max,e_mean,fit_status,wall_ms\n";
  for (const auto& r : records) {
    out += fmt::format("{},{},{},{},{},{},{:.3f}\n", r.method, r.n, r.seed, r.e_max, r.e_mean, r.fit_status,
                       r.wall_ms);
  }
  return out;
}

std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
  std::string out = "method,n,e_max_mean,e_max_se,e_mean_mean,e_mean_se\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{}\n", r.method, r.n, r.e_max_mean, r.e_max_se, r.e_mean_mean, r.e_mean_se);
  }
  return out;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(ss, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) {
      line.erase(hash);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(ParseErrorKind::kMalformed, fmt::format("config line {}: expected key=value", line_no), line_no);
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

void apply_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "methods") {
    cfg.methods = split_list(value);
  } else if (key == "n-grid") {
    cfg.n_grid.clear();
    for (const auto& item : split_list(value)) {
      cfg.n_grid.push_back(parse_number<std::size_t>(key, item));
    }
  } else if (key == "seeds") {
    cfg.seeds.clear();
    for (const auto& item : split_list(value)) {
      if (const auto dots = item.find(".."); dots != std::string::npos) {
        const auto lo = parse_number<std::uint64_t>(key, item.substr(0, dots));
        const auto hi = parse_number<std::uint64_t>(key, item.substr(dots + 2));
        for (std::uint64_t s = lo; s <= hi; ++s) {
          cfg.seeds.push_back(s);
        }
      } else {
        cfg.seeds.push_back(parse_number<std::uint64_t>(key, item));
      }
    }
  } else if (key == "vocab") {
    cfg.generator.vocab = parse_number<Eigen::Index>(key, value);
  } else if (key == "dim") {
    cfg.generator.dim = parse_number<Eigen::Index>(key, value);
  } else if (key == "sentences") {
    cfg.generator.sentences = parse_number<std::size_t>(key, value);
  } else if (key == "len-min") {
    cfg.generator.lengths.lo = parse_number<std::uint32_t>(key, value);
  } else if (key == "len-max") {
    cfg.generator.lengths.hi = parse_number<std::uint32_t>(key, value);
  } else if (key == "normalize") {
    cfg.generator.normalize = parse_bool(key, value);
  } else if (key == "embedding-table") {
    cfg.generator.embedding_table = value.empty() ? std::nullopt : std::optional<std::string>(value);
  } else if (key == "dataset") {
    cfg.dataset_path = value.empty() ? std::nullopt : std::optional<std::string>(value);
  } else if (key == "theta-star") {
    cfg.theta_star_path = value.empty() ? std::nullopt : std::optional<std::string>(value);
  } else if (key == "sigma0") {
    cfg.sigma0 = parse_number<double>(key, value);
  } else if (key == "batch-size") {
    cfg.batch_size = parse_number<std::size_t>(key, value);
  } else if (key == "max-iters") {
    cfg.fit.max_iters = parse_number<std::size_t>(key, value);
  } else if (key == "grad-tol") {
    cfg.fit.grad_tol = parse_number<double>(key, value);
  } else if (key == "density-mode") {
    if (value == "inverse") {
      cfg.density.mode = DensityMode::kInverse;
    } else if (value == "proportional") {
      cfg.density.mode = DensityMode::kProportional;
    } else {
      throw InvalidArgument(fmt::format("config: density-mode must be inverse or proportional, got {}", value));
    }
  } else if (key == "density-rows") {
    cfg.density.rows = parse_number<std::size_t>(key, value);
  } else if (key == "density-bins") {
    cfg.density.bins = parse_number<std::size_t>(key, value);
  } else if (key == "clusters") {
    cfg.cluster.k = parse_number<std::size_t>(key, value);
  } else if (key == "cluster-z") {
    cfg.cluster.z = parse_number<double>(key, value);
  } else if (key == "threads") {
    cfg.threads = parse_number<unsigned>(key, value);
  } else {
    throw InvalidArgument(fmt::format("config: unknown key \"{}\"", key));
  }
}

ExperimentConfig config_from_key_values(const std::map<std::string, std::string>& kv) {
  ExperimentConfig cfg;
  for (const auto& [k, v] : kv) {
    apply_config_key(cfg, k, v);
  }
  return cfg;
}

std::string config_to_key_values(const ExperimentConfig& cfg) {
  std::string out;
  const auto line = [&out](std::string_view k, const std::string& v) { out += fmt::format("{}={}\n", k, v); };
  line("methods", join(cfg.methods));
  line("n-grid", join(cfg.n_grid));
  line("seeds", join(cfg.seeds));
  line("vocab", std::to_string(cfg.generator.vocab));
  line("dim", std::to_string(cfg.generator.dim));
  line("sentences", std::to_string(cfg.generator.sentences));
  line("len-min", std::to_string(cfg.generator.lengths.lo));
  line("len-max", std::to_string(cfg.generator.lengths.hi));
  line("normalize", cfg.generator.normalize ? "true" : "false");
  line("embedding-table", cfg.generator.embedding_table.value_or(""));
  line("dataset", cfg.dataset_path.value_or(""));
  line("theta-star", cfg.theta_star_path.value_or(""));
  line("sigma0", fmt::format("{}", cfg.sigma0));
  line("batch-size", std::to_string(cfg.batch_size));
  line("max-iters", std::to_string(cfg.fit.max_iters));
  line("grad-tol", fmt::format("{}", cfg.fit.grad_tol));
  line("density-mode", cfg.density.mode == DensityMode::kInverse ? "inverse" : "proportional");
  line("density-rows", std::to_string(cfg.density.rows));
  line("density-bins", std::to_string(cfg.density.bins));
  line("clusters", std::to_string(cfg.cluster.k));
  line("cluster-z", fmt::format("{}", cfg.cluster.z));
  line("threads", std::to_string(cfg.threads));
  return out;
}

}  // namespace fishersft
