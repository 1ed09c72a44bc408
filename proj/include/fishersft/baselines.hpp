#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fishersft/dataset.hpp"
#include "fishersft/errors.hpp"
#include "fishersft/rng.hpp"
#include "fishersft/selection.hpp"

namespace fishersft {

// Uniformly random n of N, by a partial Fisher-Yates shuffle.
SelectionResult uniform_select(std::size_t count, std::size_t n, std::uint64_t seed);

// Greedy log-det selection where each sentence is represented by the sum of
// its position embeddings. Same output as greedy_naive on summed_groups().
SelectionResult sentence_od(const Dataset& data, std::size_t n, double sigma0 = 1.0, unsigned threads = 1);

// Exponential-keys weighted sampling without replacement: key_i = -ln(u_i) / w_i,
// the n smallest keys win (lowest index on ties). Items with zero weight are
// only taken, in index order, once all positive-weight items are used up.
// Throws InvalidState if every weight is zero.
std::vector<std::size_t> weighted_sample_without_replacement(std::span<const double> weights, std::size_t n,
                                                             Rng& rng);

// RACE sketch with signed-random-projection hashes: each row hashes a vector
// to the sign pattern of ceil(log2 B) Gaussian projections, reduced mod B.
class RaceSketch {
 public:
  RaceSketch(std::size_t rows, std::size_t bins, Eigen::Index dim, std::uint64_t seed);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t bins() const noexcept { return bins_; }
  std::uint64_t inserted() const noexcept { return inserted_; }
  std::uint64_t count(std::size_t row, std::size_t bin) const { return counts_[row * bins_ + bin]; }
  std::uint64_t row_sum(std::size_t row) const;

  std::size_t bin(std::size_t row, const Eigen::Ref<const Eigen::VectorXd>& x) const;
  void insert(const Eigen::Ref<const Eigen::VectorXd>& x);
  // (1/R) sum_r counts[r, h_r(x)].
  double score(const Eigen::Ref<const Eigen::VectorXd>& x) const;

 private:
  std::size_t rows_;
  std::size_t bins_;
  int bits_;
  std::vector<Eigen::MatrixXd> planes_;  // per row: bits x d
  std::vector<std::uint64_t> counts_;
  std::uint64_t inserted_ = 0;
};

enum class DensityMode { kInverse, kProportional };

struct DensityParams {
  std::size_t rows = 50;
  std::size_t bins = 1024;
  std::uint64_t seed = 0;
  DensityMode mode = DensityMode::kInverse;
};

// Sketch scores of the given embeddings (one column each) after inserting all of them.
std::vector<double> density_scores(const Eigen::MatrixXd& embeddings, const DensityParams& params);

// Inverse-propensity (or proportional) sampling on sentence-sum embeddings.
SelectionResult density_sampling(const Dataset& data, std::size_t n, const DensityParams& params);
SelectionResult density_sampling(const Eigen::MatrixXd& embeddings, std::size_t n, const DensityParams& params);

struct KMeansResult {
  Eigen::MatrixXd centers;  // d x k
  std::vector<std::size_t> assignment;
  std::size_t iterations = 0;
};

// Lloyd's iterations from greedy k-means++ seeding. Stops after `max_iters`
// or when no center moves by more than `tol` times the largest center norm
// (at least 1). Points are finally assigned to their nearest center.
KMeansResult kmeans(const Eigen::MatrixXd& points, std::size_t k, std::uint64_t seed, std::size_t max_iters = 100,
                    double tol = 1e-6);

struct ClusterParams {
  std::size_t k = 10;
  double z = 2.0;
  std::vector<double> lambdas;     // per cluster; empty means all ones
  std::vector<double> loss_table;  // per-cluster proxy loss; empty means zero
  std::uint64_t seed = 0;
};

// p_e = (loss(c_i) + Lambda_i ||e - c_i||^z) / (sum_i Lambda_i Phi_i + sum_x loss(x)).
std::vector<double> sensitivity_probabilities(const Eigen::MatrixXd& points, const KMeansResult& clusters,
                                              const ClusterParams& params);

// Clustering-based sensitivity sampling on sentence-sum embeddings. Weights
// 1 / (n p_e) are reported per chosen sentence.
SelectionResult clustered_sensitivity(const Dataset& data, std::size_t n, const ClusterParams& params);
SelectionResult clustered_sensitivity(const Eigen::MatrixXd& embeddings, std::size_t n, const ClusterParams& params);

// Sentence-sum embeddings as columns (d x N).
Eigen::MatrixXd sentence_embeddings(const Dataset& data);

// ---- ASK-LLM -------------------------------------------------------------

// Prompt sent to the proxy model for one candidate text.
std::string ask_llm_prompt(const std::string& text);

// Returns P("yes") for a prompt. Implementations must be thread-safe and may
// throw on transport failure.
class YesScorer {
 public:
  virtual ~YesScorer() = default;
  virtual double yes_probability(const std::string& prompt) = 0;
};

// Wraps a callable; the offline stand-in used by tests.
class StubScorer : public YesScorer {
 public:
  explicit StubScorer(std::function<double(const std::string&)> fn) : fn_(std::move(fn)) {}
  double yes_probability(const std::string& prompt) override { return fn_(prompt); }

 private:
  std::function<double(const std::string&)> fn_;
};

// Recorded responses: {"responses":[{"text":..., "yes_probability":...}, ...]}.
class FixtureScorer : public YesScorer {
 public:
  static FixtureScorer from_file(const std::string& path);
  static FixtureScorer from_json(const nlohmann::json& j);
  double yes_probability(const std::string& prompt) override;

 private:
  std::vector<std::pair<std::string, double>> by_prompt_;
};

// POSTs {"prompt": ...} to http://host:port/path and reads
// {"yes_probability": p} from the response body.
class HttpScorer : public YesScorer {
 public:
  HttpScorer(std::string url, std::chrono::milliseconds timeout = std::chrono::seconds(30));
  double yes_probability(const std::string& prompt) override;

 private:
  std::string origin_;
  std::string path_;
  std::chrono::milliseconds timeout_;
};

struct AskLlmOptions {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{1000};
  double max_failure_fraction = 0.1;
  unsigned max_in_flight = 4;
};

// Thrown when too many items could not be scored; carries what was obtained.
class PartialResultsError : public InvalidState {
 public:
  PartialResultsError(const std::string& what, std::vector<double> scores, std::vector<std::size_t> failed)
      : InvalidState(what), scores_(std::move(scores)), failed_(std::move(failed)) {}
  const std::vector<double>& scores() const noexcept { return scores_; }
  const std::vector<std::size_t>& failed() const noexcept { return failed_; }

 private:
  std::vector<double> scores_;
  std::vector<std::size_t> failed_;
};

// Top n by P("yes"), lowest index on ties; unscored items rank last.
SelectionResult ask_llm_select(const std::vector<std::string>& texts, std::size_t n, YesScorer& scorer,
                               const AskLlmOptions& opts = {});

}  // namespace fishersft
