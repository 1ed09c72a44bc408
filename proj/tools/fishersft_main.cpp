// fishersft: generate corpora, select sentences, fit, evaluate, benchmark.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
// Every command writes its fully resolved settings as key=value lines next to
// its output; passing that file back through --config repeats the run.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "fishersft/baselines.hpp"
#include "fishersft/binio.hpp"
#include "fishersft/datagen.hpp"
#include "fishersft/errors.hpp"
#include "fishersft/eval.hpp"
#include "fishersft/parallel.hpp"
#include "fishersft/selection.hpp"
#include "fishersft/softmax.hpp"

namespace fs = std::filesystem;
using namespace fishersft;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// String-valued options of one subcommand, kept in registration order so the
// audit file lists them predictably.
struct Command {
  CLI::App* app = nullptr;
  std::vector<std::string> keys;
  std::map<std::string, std::string> values;
  std::string config_path;

  void add(const std::string& key, const std::string& fallback, const std::string& help) {
    keys.push_back(key);
    values[key] = fallback;
    app->add_option("--" + key, values[key], help)->default_str(fallback);
  }

  const std::string& get(const std::string& key) const { return values.at(key); }
  bool has(const std::string& key) const { return !values.at(key).empty(); }

  std::string audit() const {
    std::string out;
    for (const auto& k : keys) {
      if (!values.at(k).empty()) {
        out += fmt::format("{}={}\n", k, values.at(k));
      }
    }
    return out;
  }
};

template <typename T>
T number(const Command& cmd, const std::string& key) {
  const std::string& v = cmd.get(key);
  std::istringstream in(v);
  T out{};
  if (!(in >> out) || !in.eof()) {
    throw UsageError(fmt::format("--{} expects a number, got \"{}\"", key, v));
  }
  return out;
}

std::string require(const Command& cmd, const std::string& key) {
  if (!cmd.has(key)) {
    throw UsageError(fmt::format("--{} is required", key));
  }
  return cmd.get(key);
}

// Applies the keys this command shares with the experiment configuration.
ExperimentConfig experiment_config(const Command& cmd) {
  ExperimentConfig cfg;
  const std::string defaults = config_to_key_values(ExperimentConfig{});
  for (const auto& [key, unused] : parse_key_values(defaults)) {
    if (cmd.values.count(key) > 0) {
      try {
        apply_config_key(cfg, key, cmd.get(key));
      } catch (const InvalidArgument& e) {
        throw UsageError(e.what());
      }
    }
  }
  return cfg;
}

void add_experiment_key(Command& cmd, const std::string& key, const std::string& help) {
  static const auto defaults = parse_key_values(config_to_key_values(ExperimentConfig{}));
  cmd.add(key, defaults.at(key), help);
}

Dataset load_dataset(const std::string& path) {
  Dataset data = read_dataset(path);
  try {
    validate(data);
  } catch (const InvalidArgument& e) {
    throw DataError(fmt::format("{}: {}", path, e.what()));
  }
  return data;
}

void write_text(const std::string& path, const std::string& text) { binio::write_file(path, text); }

void write_audit(const std::string& path, const Command& cmd) {
  write_text(path, fmt::format("# fishersft {}\n{}", cmd.app->get_name(), cmd.audit()));
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) {
    fs::create_directories(parent);
  }
}

// ---- gen -----------------------------------------------------------------

void run_gen(const Command& cmd) {
  const std::string out = require(cmd, "out");
  const ExperimentConfig cfg = experiment_config(cmd);
  const auto seed = number<std::uint64_t>(cmd, "seed");
  const SyntheticProblem problem = generate_problem(cfg.generator, seed);
  ensure_parent(out);
  write_dataset(out, problem.data);
  const std::string theta_out = cmd.has("theta-out") ? cmd.get("theta-out") : out + ".theta";
  write_params(theta_out, problem.theta_star);
  if (!problem.words.empty()) {
    std::string words;
    for (const auto& w : problem.words) {
      words += w + "\n";
    }
    write_text(out + ".words", words);
  }
  write_audit(out + ".cfg", cmd);
  std::size_t positions = 0;
  for (const auto& s : problem.data.sentences) {
    positions += s.positions();
  }
  fmt::print("wrote {} sentences ({} positions, d={}, L={}) to {}\n", problem.data.size(), positions,
             problem.data.dim, problem.data.vocab_size, out);
  fmt::print("theta_star: {}\n", theta_out);
}

// ---- select --------------------------------------------------------------

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ParseError(ParseErrorKind::kIo, fmt::format("cannot open {}", path));
  }
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    lines.push_back(line);
  }
  return lines;
}

SelectionResult select_ask_llm(const Command& cmd, std::size_t n) {
  const std::vector<std::string> texts = read_lines(require(cmd, "texts"));
  if (cmd.has("dataset")) {
    const Dataset data = load_dataset(cmd.get("dataset"));
    if (data.size() != texts.size()) {
      throw DataError(fmt::format("--texts has {} lines but the dataset has {} sentences", texts.size(), data.size()));
    }
  }
  AskLlmOptions opts;
  opts.attempts = number<int>(cmd, "attempts");
  opts.initial_backoff = std::chrono::milliseconds(number<long>(cmd, "backoff-ms"));
  opts.max_in_flight = number<unsigned>(cmd, "max-in-flight");
  if (cmd.has("scorer-fixture")) {
    auto scorer = FixtureScorer::from_file(cmd.get("scorer-fixture"));
    return ask_llm_select(texts, n, scorer, opts);
  }
  if (cmd.has("scorer-url")) {
    HttpScorer scorer(cmd.get("scorer-url"), std::chrono::milliseconds(number<long>(cmd, "scorer-timeout-ms")));
    return ask_llm_select(texts, n, scorer, opts);
  }
  throw UsageError("ask-llm needs --scorer-url or --scorer-fixture");
}

void run_select(const Command& cmd) {
  const std::string method = require(cmd, "method");
  const auto n = number<std::size_t>(cmd, "n");
  const auto seed = number<std::uint64_t>(cmd, "seed");
  SelectionResult r;
  if (method == "ask-llm") {
    r = select_ask_llm(cmd, n);
    r.seed = seed;
  } else {
    const auto& known = experiment_methods();
    if (std::find(known.begin(), known.end(), method) == known.end()) {
      throw UsageError(fmt::format("unknown method \"{}\" (expected one of {}, ask-llm)", method,
                                   fmt::format("{}", fmt::join(known, ", "))));
    }
    ExperimentConfig cfg = experiment_config(cmd);
    const Dataset data = load_dataset(require(cmd, "dataset"));
    r = run_selection(method, data, n, seed, cfg);
  }
  const std::string json = to_json(r).dump(2) + "\n";
  if (cmd.has("out")) {
    ensure_parent(cmd.get("out"));
    write_text(cmd.get("out"), json);
    write_audit(cmd.get("out") + ".cfg", cmd);
    fmt::print("{}: chose {} sentences with {} gain evaluations in {:.1f} ms -> {}\n", r.method, r.chosen.size(),
               r.gain_evaluations, r.wall_ms, cmd.get("out"));
  } else {
    std::fputs(json.c_str(), stdout);
  }
}

// ---- fit -----------------------------------------------------------------

void run_fit(const Command& cmd) {
  const std::string out = require(cmd, "out");
  const Dataset data = load_dataset(require(cmd, "dataset"));
  std::vector<std::size_t> indices;
  if (cmd.has("selection")) {
    const std::string text = binio::read_file(cmd.get("selection"));
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(ParseErrorKind::kMalformed, fmt::format("{}: {}", cmd.get("selection"), e.what()));
    }
    indices = selection_from_json(j).chosen;
    for (std::size_t i : indices) {
      if (i >= data.size()) {
        throw DataError(fmt::format("selection index {} outside the dataset of {} sentences", i, data.size()));
      }
    }
  } else {
    indices.resize(data.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      indices[i] = i;
    }
  }
  if (indices.empty()) {
    throw UsageError("cannot fit on an empty selection");
  }
  FitOptions opts;
  opts.max_iters = number<std::size_t>(cmd, "max-iters");
  opts.grad_tol = number<double>(cmd, "grad-tol");
  const SubsetData train = make_subset_data(data, indices);
  const FitResult fit = fit_mle(train, ParamMatrix::zeros(data.dim, data.vocab_size), opts);
  ensure_parent(out);
  write_params(out, fit.params);
  write_audit(out + ".cfg", cmd);
  fmt::print("status: {}\niterations: {}\nnll: {}\ngrad_inf_norm: {:.3e}\nsentences: {}\n", to_string(fit.status),
             fit.iterations, fit.nll, fit.grad_inf_norm, indices.size());
}

// ---- eval ----------------------------------------------------------------

void run_eval(const Command& cmd) {
  const Dataset data = load_dataset(require(cmd, "dataset"));
  ParamMatrix star = read_params(require(cmd, "theta-star"));
  const ParamMatrix hat = read_params(require(cmd, "theta-hat"));
  if (star.dim() != hat.dim() || star.vocab_size() != hat.vocab_size() ||
      star.dim() != static_cast<Eigen::Index>(data.dim)) {
    throw DataError(fmt::format("shapes disagree: theta-star {}x{}, theta-hat {}x{}, dataset d={}", star.dim(),
                                star.vocab_size(), hat.dim(), hat.vocab_size(), data.dim));
  }
  project_zero_sum(star.theta);
  const PredictionErrors err = prediction_errors(star, hat, data);
  const std::string csv = fmt::format("e_max,e_mean\n{},{}\n", err.max, err.mean);
  if (cmd.has("out")) {
    ensure_parent(cmd.get("out"));
    write_text(cmd.get("out"), csv);
    write_audit(cmd.get("out") + ".cfg", cmd);
  }
  std::fputs(csv.c_str(), stdout);
}

// ---- bench ---------------------------------------------------------------

void run_bench(const Command& cmd) {
  Dataset data;
  const auto seed = number<std::uint64_t>(cmd, "seed");
  if (cmd.has("dataset")) {
    data = load_dataset(cmd.get("dataset"));
  } else {
    const ExperimentConfig cfg = experiment_config(cmd);
    data = generate_problem(cfg.generator, seed).data;
  }
  const auto n = number<std::size_t>(cmd, "n");
  LazyGreedyOptions opts;
  opts.sigma0 = number<double>(cmd, "sigma0");
  opts.batch_size = number<std::size_t>(cmd, "batch-size");
  opts.threads = number<unsigned>(cmd, "threads");
  const auto groups = design_groups(data);
  const SelectionResult naive = greedy_naive(groups, n, opts.sigma0);
  const SelectionResult lazy = fisher_sft(groups, n, opts);
  const bool identical = naive.chosen == lazy.chosen && naive.round_gains == lazy.round_gains;
  const double eval_ratio =
      naive.gain_evaluations == 0 ? 1.0 : static_cast<double>(lazy.gain_evaluations) / naive.gain_evaluations;
  const double time_ratio = naive.wall_ms > 0.0 ? lazy.wall_ms / naive.wall_ms : 1.0;

  nlohmann::ordered_json j;
  j["sentences"] = data.size();
  j["n"] = n;
  j["batch_size"] = opts.batch_size;
  j["identical"] = identical;
  j["naive_evaluations"] = naive.gain_evaluations;
  j["lazy_evaluations"] = lazy.gain_evaluations;
  j["evaluation_ratio"] = eval_ratio;
  j["naive_ms"] = naive.wall_ms;
  j["lazy_ms"] = lazy.wall_ms;
  j["wall_time_ratio"] = time_ratio;
  if (cmd.has("out")) {
    ensure_parent(cmd.get("out"));
    write_text(cmd.get("out"), j.dump(2) + "\n");
    write_audit(cmd.get("out") + ".cfg", cmd);
  }
  fmt::print("sentences: {}\nn: {}\nidentical: {}\nnaive_evaluations: {}\nlazy_evaluations: {}\n"
             "evaluation_ratio: {:.4f}\nnaive_ms: {:.1f}\nlazy_ms: {:.1f}\nwall_time_ratio: {:.4f}\n",
             data.size(), n, identical, naive.gain_evaluations, lazy.gain_evaluations, eval_ratio, naive.wall_ms,
             lazy.wall_ms, time_ratio);
  if (!identical) {
    throw NumericalFailure("lazy and naive greedy selections differ");
  }
}

// ---- pipeline ------------------------------------------------------------

void run_pipeline(const Command& cmd) {
  const std::string out_dir = require(cmd, "out-dir");
  ExperimentConfig cfg = experiment_config(cmd);
  if (cfg.dataset_path.has_value() != cfg.theta_star_path.has_value()) {
    throw UsageError("--dataset and --theta-star must be given together");
  }
  fs::create_directories(out_dir);
  const auto start = std::chrono::steady_clock::now();
  const ExperimentReport report = run_experiment(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text((fs::path(out_dir) / "records.csv").string(), records_csv(report.records));
  write_text((fs::path(out_dir) / "aggregate.csv").string(), aggregate_csv(report.aggregates));
  write_audit((fs::path(out_dir) / "run.cfg").string(), cmd);

  fmt::print("{:<14} {:>6} {:>12} {:>10} {:>12} {:>10} {:>6} {:>7}\n", "method", "n", "e_max", "se", "e_mean", "se",
             "runs", "failed");
  for (const auto& row : report.aggregates) {
    fmt::print("{:<14} {:>6} {:>12.4f} {:>10.4f} {:>12.4f} {:>10.4f} {:>6} {:>7}\n", row.method, row.n,
               row.e_max_mean, row.e_max_se, row.e_mean_mean, row.e_mean_se, row.runs, row.failed);
  }
  fmt::print("{} records in {:.1f} s -> {}\n", report.records.size(), secs, out_dir);
}

// ---- argument handling ----------------------------------------------------

// Inserts --key=value for every config-file key the subcommand knows and the
// command line does not already set. Other keys are skipped so one file can
// serve several subcommands. Output paths only come from the command line.
std::vector<std::string> merge_config(const std::vector<std::string>& args,
                                      const std::map<std::string, Command>& commands) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    }
  }
  if (path.empty()) {
    return args;
  }
  const Command* target = nullptr;
  for (const auto& a : args) {
    if (auto it = commands.find(a); it != commands.end()) {
      target = &it->second;
      break;
    }
  }
  if (target == nullptr) {
    return args;
  }
  const auto kv = parse_key_values(binio::read_file(path));
  std::vector<std::string> merged = args;
  for (const auto& [key, value] : kv) {
    if (target->values.count(key) == 0 || key == "out" || key == "theta-out" || key == "out-dir") {
      continue;
    }
    const std::string flag = "--" + key;
    const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
    if (!given) {
      merged.push_back(flag + "=" + value);
    }
  }
  return merged;
}

int run(int argc, char** argv) {
  CLI::App app{"Sentence selection for fine-tuning by greedy log-det optimal design", "fishersft"};
  app.require_subcommand(1);
  const std::string threads = std::to_string(default_threads());

  std::map<std::string, Command> commands;
  const auto sub = [&](const std::string& name, const std::string& help) -> Command& {
    Command& c = commands[name];
    c.app = app.add_subcommand(name, help);
    c.app->add_option("--config", c.config_path, "key=value file; flags on the command line win");
    return c;
  };

  Command& gen = sub("gen", "generate a synthetic corpus and its Theta_*");
  gen.add("out", "", "dataset path (.bin, or .jsonl for JSON lines)");
  gen.add("theta-out", "", "Theta_* parameter file (default: <out>.theta)");
  gen.add("seed", "0", "master seed");
  for (const char* k : {"vocab", "dim", "sentences", "len-min", "len-max", "normalize", "embedding-table"}) {
    add_experiment_key(gen, k, "generator setting");
  }

  Command& sel = sub("select", "select n sentences with one method");
  sel.add("dataset", "", "dataset path");
  sel.add("method", "fisher-sft",
          "fisher-sft, greedy-naive, uniform, sentence-od, density, clustered or ask-llm");
  sel.add("n", "100", "number of sentences to select");
  sel.add("seed", "0", "seed for randomized methods");
  sel.add("out", "", "selection JSON (stdout when omitted)");
  sel.add("threads", threads, "worker threads (default: FISHERSFT_THREADS or 1)");
  for (const char* k : {"sigma0", "batch-size", "density-mode", "density-rows", "density-bins", "clusters",
                        "cluster-z"}) {
    add_experiment_key(sel, k, "method setting");
  }
  sel.add("texts", "", "ask-llm: one text per line, aligned with the dataset");
  sel.add("scorer-url", "", "ask-llm: scorer endpoint, http://host:port/path");
  sel.add("scorer-fixture", "", "ask-llm: recorded responses JSON");
  sel.add("scorer-timeout-ms", "30000", "ask-llm: per-request timeout");
  sel.add("attempts", "3", "ask-llm: attempts per item");
  sel.add("backoff-ms", "1000", "ask-llm: first retry delay, doubled each retry");
  sel.add("max-in-flight", "4", "ask-llm: concurrent scorer requests");

  Command& fit = sub("fit", "fit the softmax model on a selection");
  fit.add("dataset", "", "dataset path");
  fit.add("selection", "", "selection JSON (whole dataset when omitted)");
  fit.add("out", "", "parameter file to write");
  add_experiment_key(fit, "max-iters", "gradient descent iteration cap");
  add_experiment_key(fit, "grad-tol", "gradient infinity-norm tolerance");

  Command& ev = sub("eval", "prediction errors of a fitted model");
  ev.add("dataset", "", "dataset path");
  ev.add("theta-star", "", "true parameter file");
  ev.add("theta-hat", "", "fitted parameter file");
  ev.add("out", "", "metrics CSV");

  Command& bench = sub("bench", "lazy vs naive greedy on one dataset");
  bench.add("dataset", "", "dataset path (synthetic when omitted)");
  bench.add("seed", "0", "generator seed when no dataset is given");
  bench.add("n", "100", "number of sentences to select");
  bench.add("threads", threads, "worker threads for the lazy variant");
  bench.add("out", "", "JSON report");
  bench.add("sentences", "2000", "synthetic corpus size");
  for (const char* k : {"vocab", "dim", "len-min", "len-max", "sigma0", "batch-size"}) {
    add_experiment_key(bench, k, "setting");
  }

  Command& pipe = sub("pipeline", "select, fit and evaluate over methods, budgets and seeds");
  pipe.add("out-dir", "", "directory for records.csv, aggregate.csv and run.cfg");
  for (const auto& [key, value] : parse_key_values(config_to_key_values(ExperimentConfig{}))) {
    if (key == "seeds") {
      pipe.add(key, "0..19", "seed list, e.g. 0..19 or 1,5,9");
    } else if (key == "threads") {
      pipe.add(key, threads, "worker threads (default: FISHERSFT_THREADS or 1)");
    } else {
      pipe.add(key, value, "experiment setting");
    }
  }

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    args = merge_config(args, commands);
  } catch (const ParseError& e) {
    throw UsageError(fmt::format("--config: {}", e.what()));
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }

  for (auto& [name, cmd] : commands) {
    if (!cmd.app->parsed()) {
      continue;
    }
    if (name == "gen") {
      run_gen(cmd);
    } else if (name == "select") {
      run_select(cmd);
    } else if (name == "fit") {
      run_fit(cmd);
    } else if (name == "eval") {
      run_eval(cmd);
    } else if (name == "bench") {
      run_bench(cmd);
    } else if (name == "pipeline") {
      run_pipeline(cmd);
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return 1;
  } catch (const InvalidArgument& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return 1;
  } catch (const UnsupportedSize& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return 1;
  } catch (const ParseError& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return 2;
  } catch (const DataError& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return 2;
  } catch (const PartialResultsError& e) {
    fmt::print(stderr, "scorer error: {}\n", e.what());
    return 2;
  } catch (const NumericalFailure& e) {
    fmt::print(stderr, "numerical error: {}\n", e.what());
    return 3;
  } catch (const InvalidState& e) {
    fmt::print(stderr, "state error: {}\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  }
}
