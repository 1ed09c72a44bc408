#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fishersft/baselines.hpp"
#include "fishersft/datagen.hpp"
#include "fishersft/softmax.hpp"

namespace fishersft {

struct PredictionErrors {
  double max = 0.0;   // max_i sum_j ||(Theta_* - Theta_hat)^T x_ij||_2
  double mean = 0.0;  // (1/N) sum_i sum_j ||(Theta_* - Theta_hat)^T x_ij||_2
};

// Both metrics in one pass over every sentence of `data`.
PredictionErrors prediction_errors(const ParamMatrix& theta_star, const ParamMatrix& theta_hat, const Dataset& data);
double max_pred_error(const ParamMatrix& theta_star, const ParamMatrix& theta_hat, const Dataset& data);
double mean_pred_error(const ParamMatrix& theta_star, const ParamMatrix& theta_hat, const Dataset& data);

struct ExperimentRecord {
  std::string method;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  double e_max = 0.0;
  double e_mean = 0.0;
  std::string fit_status;
  double wall_ms = 0.0;
};

struct AggregateRow {
  std::string method;
  std::size_t n = 0;
  double e_max_mean = 0.0;
  double e_max_se = 0.0;
  double e_mean_mean = 0.0;
  double e_mean_se = 0.0;
  std::size_t runs = 0;    // records that entered the averages
  std::size_t failed = 0;  // records excluded because the fit failed
};

struct ExperimentConfig {
  std::vector<std::string> methods{"fisher-sft", "uniform", "sentence-od", "density", "clustered"};
  std::vector<std::size_t> n_grid{250, 500, 1000, 2000};
  std::vector<std::uint64_t> seeds;  // empty: 0..19
  SyntheticConfig generator{};
  // When set, every seed uses this dataset and Theta_* instead of generating.
  std::optional<std::string> dataset_path;
  std::optional<std::string> theta_star_path;
  double sigma0 = 1.0;
  std::size_t batch_size = 32;
  FitOptions fit{};
  DensityParams density{};
  ClusterParams cluster{};
  unsigned threads = 1;
};

struct ExperimentReport {
  std::vector<ExperimentRecord> records;  // sorted by (method, n, seed)
  std::vector<AggregateRow> aggregates;   // sorted by (method, n)
};

// Methods accepted by run_experiment.
const std::vector<std::string>& experiment_methods();

// Runs one selection with the experiment's settings; `seed` drives any randomness.
SelectionResult run_selection(const std::string& method, const Dataset& data, std::size_t n, std::uint64_t seed,
                              const ExperimentConfig& cfg);

ExperimentReport run_experiment(const ExperimentConfig& cfg);
std::vector<AggregateRow> aggregate(const std::vector<ExperimentRecord>& records);

// "method,n,seed,e_max,e_mean,fit_status,wall_ms"
std::string records_csv(const std::vector<ExperimentRecord>& records);
// "method,n,e_max_mean,e_max_se,e_mean_mean,e_mean_se"
std::string aggregate_csv(const std::vector<AggregateRow>& rows);

// key=value lines; '#' starts a comment. Later keys override earlier ones.
std::map<std::string, std::string> parse_key_values(const std::string& text);
// Applies one key; throws InvalidArgument for unknown keys or bad values.
void apply_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value);
ExperimentConfig config_from_key_values(const std::map<std::string, std::string>& kv);
std::string config_to_key_values(const ExperimentConfig& cfg);

}  // namespace fishersft
