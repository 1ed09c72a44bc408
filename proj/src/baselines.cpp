#include "fishersft/baselines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>

#include "fishersft/binio.hpp"
#include "fishersft/parallel.hpp"

namespace fishersft {
namespace {

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

void check_budget(std::size_t count, std::size_t n, const char* method) {
  if (n > count) {
    throw InvalidArgument(fmt::format("{}: requested n={} exceeds dataset size N={}", method, n, count));
  }
}

double squared_distance(const Eigen::MatrixXd& a, Eigen::Index i, const Eigen::MatrixXd& b, Eigen::Index j) {
  return (a.col(i) - b.col(j)).squaredNorm();
}

std::size_t nearest(const Eigen::MatrixXd& points, Eigen::Index i, const Eigen::MatrixXd& centers) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centers.cols(); ++c) {
    const double dist = squared_distance(points, i, centers, c);
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<std::size_t>(c);
    }
  }
  return best;
}

}  // namespace

SelectionResult uniform_select(std::size_t count, std::size_t n, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  check_budget(count, n, "uniform");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    std::swap(order[k], order[k + rng.below(count - k)]);
  }
  SelectionResult r;
  r.method = "uniform";
  r.seed = seed;
  r.chosen.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  r.round_gains.assign(n, 0.0);
  r.wall_ms = elapsed_ms(start);
  return r;
}

SelectionResult sentence_od(const Dataset& data, std::size_t n, double sigma0, unsigned threads) {
  const std::vector<EmbeddingGroup> groups = summed_groups(data);
  LazyGreedyOptions opts;
  opts.sigma0 = sigma0;
  opts.threads = threads;
  SelectionResult r = fisher_sft(groups, n, opts);
  r.method = "sentence-od";
  return r;
}

std::vector<std::size_t> weighted_sample_without_replacement(std::span<const double> weights, std::size_t n,
                                                             Rng& rng) {
  check_budget(weights.size(), n, "weighted sampling");
  const bool any_positive = std::any_of(weights.begin(), weights.end(), [](double w) { return w > 0.0; });
  if (!any_positive && n > 0) {
    throw InvalidState("weighted sampling: total weight is zero");
  }
  std::vector<std::pair<double, std::size_t>> keys(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double w = weights[i];
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw InvalidArgument(fmt::format("weighted sampling: weight {} of item {} is not a finite non-negative number",
                                        w, i));
    }
    // Draw for every item so the stream does not depend on the weights.
    const double e = -std::log(rng.uniform_pos());
    keys[i] = {w > 0.0 ? e / w : std::numeric_limits<double>::infinity(), i};
  }
  std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(n), keys.end());
  std::vector<std::size_t> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    out[k] = keys[k].second;
  }
  return out;
}

RaceSketch::RaceSketch(std::size_t rows, std::size_t bins, Eigen::Index dim, std::uint64_t seed)
    : rows_(rows), bins_(bins), bits_(0) {
  if (rows < 1 || bins < 1) {
    throw InvalidArgument(fmt::format("RaceSketch: rows={} and bins={} must both be positive", rows, bins));
  }
  if (dim < 1) {
    throw InvalidArgument("RaceSketch: dimension must be positive");
  }
  while ((std::size_t{1} << bits_) < bins) {
    ++bits_;
  }
  Rng rng(seed);
  planes_.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Eigen::MatrixXd planes(bits_, dim);
    for (int b = 0; b < bits_; ++b) {
      for (Eigen::Index f = 0; f < dim; ++f) {
        planes(b, f) = rng.normal();
      }
    }
    planes_.push_back(std::move(planes));
  }
  counts_.assign(rows * bins, 0);
}

std::uint64_t RaceSketch::row_sum(std::size_t row) const {
  std::uint64_t total = 0;
  for (std::size_t b = 0; b < bins_; ++b) {
    total += count(row, b);
  }
  return total;
}

std::size_t RaceSketch::bin(std::size_t row, const Eigen::Ref<const Eigen::VectorXd>& x) const {
  if (x.size() != planes_[row].cols()) {
    throw InvalidArgument(fmt::format("RaceSketch: vector of length {}, expected {}", x.size(), planes_[row].cols()));
  }
  const Eigen::VectorXd proj = planes_[row] * x;
  std::size_t code = 0;
  for (int b = 0; b < bits_; ++b) {
    if (proj(b) >= 0.0) {
      code |= std::size_t{1} << b;
    }
  }
  return code % bins_;
}

void RaceSketch::insert(const Eigen::Ref<const Eigen::VectorXd>& x) {
  for (std::size_t r = 0; r < rows_; ++r) {
    ++counts_[r * bins_ + bin(r, x)];
  }
  ++inserted_;
}

double RaceSketch::score(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  double total = 0.0;
  for (std::size_t r = 0; r < rows_; ++r) {
    total += static_cast<double>(count(r, bin(r, x)));
  }
  return total / static_cast<double>(rows_);
}

Eigen::MatrixXd sentence_embeddings(const Dataset& data) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(data.dim, static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sentence& s = data.sentences[i];
    for (Eigen::Index j = 0; j < s.features.cols(); ++j) {
      out.col(static_cast<Eigen::Index>(i)) += s.features.col(j).cast<double>();
    }
  }
  return out;
}

std::vector<double> density_scores(const Eigen::MatrixXd& embeddings, const DensityParams& params) {
  RaceSketch sketch(params.rows, params.bins, embeddings.rows(), params.seed);
  for (Eigen::Index i = 0; i < embeddings.cols(); ++i) {
    sketch.insert(embeddings.col(i));
  }
  std::vector<double> scores(static_cast<std::size_t>(embeddings.cols()));
  for (Eigen::Index i = 0; i < embeddings.cols(); ++i) {
    scores[static_cast<std::size_t>(i)] = sketch.score(embeddings.col(i));
  }
  return scores;
}

SelectionResult density_sampling(const Dataset& data, std::size_t n, const DensityParams& params) {
  return density_sampling(sentence_embeddings(data), n, params);
}

SelectionResult density_sampling(const Eigen::MatrixXd& embeddings, std::size_t n, const DensityParams& params) {
  const auto start = std::chrono::steady_clock::now();
  const auto count = static_cast<std::size_t>(embeddings.cols());
  check_budget(count, n, "density");
  const std::vector<double> scores = density_scores(embeddings, params);
  std::vector<double> weights(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    weights[i] = params.mode == DensityMode::kInverse ? (scores[i] > 0.0 ? 1.0 / scores[i] : 0.0) : scores[i];
  }
  Rng rng(derive_seed(params.seed, "density-sample"));
  SelectionResult r;
  r.method = "density";
  r.seed = params.seed;
  r.chosen = weighted_sample_without_replacement(weights, n, rng);
  for (std::size_t i : r.chosen) {
    r.round_gains.push_back(weights[i]);
  }
  r.wall_ms = elapsed_ms(start);
  return r;
}

KMeansResult kmeans(const Eigen::MatrixXd& points, std::size_t k, std::uint64_t seed, std::size_t max_iters,
                    double tol) {
  const auto count = static_cast<std::size_t>(points.cols());
  if (k < 1 || k > count) {
    throw InvalidArgument(fmt::format("kmeans: k={} must be in [1, N={}]", k, count));
  }
  Rng rng(seed);
  KMeansResult out;
  out.centers.resize(points.rows(), static_cast<Eigen::Index>(k));

  // Greedy k-means++: sample several D^2-weighted candidates per step and
  // keep the one that lowers the potential most.
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  const auto first = static_cast<Eigen::Index>(rng.below(count));
  out.centers.col(0) = points.col(first);
  Eigen::VectorXd closest(static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i) {
    closest(static_cast<Eigen::Index>(i)) = squared_distance(points, static_cast<Eigen::Index>(i), out.centers, 0);
  }
  for (std::size_t c = 1; c < k; ++c) {
    const double potential = closest.sum();
    Eigen::Index best_candidate = -1;
    double best_potential = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_closest;
    for (std::size_t t = 0; t < trials; ++t) {
      Eigen::Index candidate = 0;
      if (potential > 0.0) {
        const double target = rng.uniform() * potential;
        double acc = 0.0;
        candidate = static_cast<Eigen::Index>(count) - 1;
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(count); ++i) {
          acc += closest(i);
          if (target < acc) {
            candidate = i;
            break;
          }
        }
      } else {
        candidate = static_cast<Eigen::Index>(rng.below(count));
      }
      Eigen::VectorXd trial = closest;
      for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(count); ++i) {
        trial(i) = std::min(trial(i), (points.col(i) - points.col(candidate)).squaredNorm());
      }
      const double p = trial.sum();
      if (p < best_potential) {
        best_potential = p;
        best_candidate = candidate;
        best_closest = std::move(trial);
      }
    }
    out.centers.col(static_cast<Eigen::Index>(c)) = points.col(best_candidate);
    closest = std::move(best_closest);
  }

  out.assignment.assign(count, 0);
  for (out.iterations = 0; out.iterations < max_iters; ++out.iterations) {
    for (std::size_t i = 0; i < count; ++i) {
      out.assignment[i] = nearest(points, static_cast<Eigen::Index>(i), out.centers);
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(points.rows(), static_cast<Eigen::Index>(k));
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t i = 0; i < count; ++i) {
      sums.col(static_cast<Eigen::Index>(out.assignment[i])) += points.col(static_cast<Eigen::Index>(i));
      ++sizes[out.assignment[i]];
    }
    double shift = 0.0;
    double scale = 1.0;
    for (std::size_t c = 0; c < k; ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      scale = std::max(scale, out.centers.col(ci).norm());
      if (sizes[c] == 0) {
        continue;  // empty cluster keeps its center
      }
      const Eigen::VectorXd updated = sums.col(ci) / static_cast<double>(sizes[c]);
      shift = std::max(shift, (updated - out.centers.col(ci)).norm());
      out.centers.col(ci) = updated;
    }
    if (shift <= tol * scale) {
      ++out.iterations;
      break;
    }
  }
  for (std::size_t i = 0; i < count; ++i) {
    out.assignment[i] = nearest(points, static_cast<Eigen::Index>(i), out.centers);
  }
  return out;
}

std::vector<double> sensitivity_probabilities(const Eigen::MatrixXd& points, const KMeansResult& clusters,
                                              const ClusterParams& params) {
  const auto k = static_cast<std::size_t>(clusters.centers.cols());
  if (!params.lambdas.empty() && params.lambdas.size() != k) {
    throw InvalidArgument(fmt::format("clustered: {} lambdas for {} clusters", params.lambdas.size(), k));
  }
  if (!params.loss_table.empty() && params.loss_table.size() != k) {
    throw InvalidArgument(fmt::format("clustered: {} losses for {} clusters", params.loss_table.size(), k));
  }
  const auto lambda = [&](std::size_t c) { return params.lambdas.empty() ? 1.0 : params.lambdas[c]; };
  const auto loss = [&](std::size_t c) { return params.loss_table.empty() ? 0.0 : params.loss_table[c]; };

  std::vector<double> numer(clusters.assignment.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < numer.size(); ++i) {
    const std::size_t c = clusters.assignment[i];
    const double dist = (points.col(static_cast<Eigen::Index>(i)) - clusters.centers.col(static_cast<Eigen::Index>(c)))
                            .norm();
    const double v = std::pow(dist, params.z);
    // The denominator sum_i Lambda_i Phi(C_i) + sum_x loss(x) regroups the same terms.
    numer[i] = loss(c) + lambda(c) * v;
    denom += numer[i];
  }
  if (!(denom > 0.0)) {
    throw InvalidState("clustered: every sampling probability is zero");
  }
  for (double& p : numer) {
    p /= denom;
  }
  return numer;
}

SelectionResult clustered_sensitivity(const Dataset& data, std::size_t n, const ClusterParams& params) {
  return clustered_sensitivity(sentence_embeddings(data), n, params);
}

SelectionResult clustered_sensitivity(const Eigen::MatrixXd& embeddings, std::size_t n, const ClusterParams& params) {
  const auto start = std::chrono::steady_clock::now();
  const auto count = static_cast<std::size_t>(embeddings.cols());
  check_budget(count, n, "clustered");
  const KMeansResult clusters = kmeans(embeddings, params.k, derive_seed(params.seed, "kmeans"));
  const std::vector<double> probs = sensitivity_probabilities(embeddings, clusters, params);
  Rng rng(derive_seed(params.seed, "sensitivity-sample"));
  SelectionResult r;
  r.method = "clustered";
  r.seed = params.seed;
  // Independent draws from p with repeats discarded are successive sampling
  // without replacement, which the exponential-keys sampler draws exactly.
  r.chosen = weighted_sample_without_replacement(probs, n, rng);
  for (std::size_t i : r.chosen) {
    r.round_gains.push_back(probs[i]);
    r.weights.push_back(probs[i] > 0.0 ? 1.0 / (static_cast<double>(n) * probs[i])
                                       : std::numeric_limits<double>::infinity());
  }
  r.wall_ms = elapsed_ms(start);
  return r;
}

std::string ask_llm_prompt(const std::string& text) {
  return text +
         "\n\nDoes the previous paragraph contain informative signal for fine-tuning a large-language model?\n"
         "An informative datapoint should be well-formatted, contain some usable knowledge of the world, and "
         "strictly NOT have any harmful, racist, sexist, etc. content. OPTIONS: yes, no";
}

FixtureScorer FixtureScorer::from_file(const std::string& path) {
  const std::string text = binio::read_file(path);
  try {
    return from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseErrorKind::kMalformed, fmt::format("scorer fixture {}: {}", path, e.what()));
  }
}

FixtureScorer FixtureScorer::from_json(const nlohmann::json& j) {
  FixtureScorer s;
  for (const auto& entry : j.at("responses")) {
    s.by_prompt_.emplace_back(ask_llm_prompt(entry.at("text").get<std::string>()),
                              entry.at("yes_probability").get<double>());
  }
  return s;
}

double FixtureScorer::yes_probability(const std::string& prompt) {
  for (const auto& [p, prob] : by_prompt_) {
    if (p == prompt) {
      return prob;
    }
  }
  throw InvalidState("fixture scorer: no recorded response for prompt");
}

HttpScorer::HttpScorer(std::string url, std::chrono::milliseconds timeout) : timeout_(timeout) {
  const std::size_t scheme = url.find("://");
  const std::size_t path_start = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path_start == std::string::npos) {
    origin_ = url;
    path_ = "/";
  } else {
    origin_ = url.substr(0, path_start);
    path_ = url.substr(path_start);
  }
}

double HttpScorer::yes_probability(const std::string& prompt) {
  httplib::Client client(origin_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  const std::string body = nlohmann::json{{"prompt", prompt}}.dump();
  auto res = client.Post(path_, body, "application/json");
  if (!res) {
    throw InvalidState(fmt::format("scorer request to {}{} failed: {}", origin_, path_, httplib::to_string(res.error())));
  }
  if (res->status != 200) {
    throw InvalidState(fmt::format("scorer returned HTTP {}", res->status));
  }
  return nlohmann::json::parse(res->body).at("yes_probability").get<double>();
}

SelectionResult ask_llm_select(const std::vector<std::string>& texts, std::size_t n, YesScorer& scorer,
                               const AskLlmOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  check_budget(texts.size(), n, "ask-llm");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> scores(texts.size(), nan);

  parallel_for(0, texts.size(), std::max(1U, opts.max_in_flight), [&](std::size_t i) {
    const std::string prompt = ask_llm_prompt(texts[i]);
    auto backoff = opts.initial_backoff;
    for (int attempt = 1; attempt <= std::max(1, opts.attempts); ++attempt) {
      try {
        const double p = scorer.yes_probability(prompt);
        if (p >= 0.0 && p <= 1.0) {
          scores[i] = p;
          return;
        }
      } catch (const std::exception&) {
        // retried below
      }
      if (attempt < opts.attempts) {
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
    }
  });

  std::vector<std::size_t> failed;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) {
      failed.push_back(i);
    }
  }
  if (!texts.empty() &&
      static_cast<double>(failed.size()) > opts.max_failure_fraction * static_cast<double>(texts.size())) {
    throw PartialResultsError(
        fmt::format("ask-llm: {} of {} items could not be scored", failed.size(), texts.size()), scores, failed);
  }

  std::vector<std::size_t> order(texts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = std::isnan(scores[a]) ? -1.0 : scores[a];
    const double sb = std::isnan(scores[b]) ? -1.0 : scores[b];
    return sa > sb;
  });
  SelectionResult r;
  r.method = "ask-llm";
  r.chosen.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  for (std::size_t i : r.chosen) {
    r.round_gains.push_back(std::isnan(scores[i]) ? 0.0 : scores[i]);
  }
  r.gain_evaluations = texts.size() - failed.size();
  r.wall_ms = elapsed_ms(start);
  return r;
}

}  // namespace fishersft
