#include "fishersft/selection.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "fishersft/errors.hpp"
#include "fishersft/parallel.hpp"

namespace fishersft {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Half-width of the window around the running maximum inside which a cached
// gain is always recomputed. Fresh and cached values of a mathematically
// unchanged gain can differ in the last few bits; recomputing inside this
// window keeps the lazy scan exact in floating point.
double tie_window(double reference) { return 1e-10 * std::max(1.0, std::abs(reference)); }

Eigen::Index check_groups(std::span<const EmbeddingGroup> groups, std::size_t n, const char* method) {
  if (groups.empty()) {
    throw InvalidArgument(fmt::format("{}: dataset is empty", method));
  }
  if (n > groups.size()) {
    throw InvalidArgument(fmt::format("{}: requested n={} exceeds dataset size N={}", method, n, groups.size()));
  }
  const Eigen::Index d = groups.front().rows();
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i].rows() != d) {
      throw InvalidArgument(fmt::format("{}: sentence {} has dimension {}, expected {}", method, i,
                                        groups[i].rows(), d));
    }
  }
  if (d < 1) {
    throw InvalidArgument(fmt::format("{}: embedding dimension must be positive", method));
  }
  return d;
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

nlohmann::ordered_json to_json(const SelectionResult& r) {
  nlohmann::ordered_json j;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["n"] = r.chosen.size();
  j["sigma0"] = r.sigma0;
  j["batch_size"] = r.batch_size;
  j["chosen"] = r.chosen;
  j["round_gains"] = r.round_gains;
  j["gain_evaluations"] = r.gain_evaluations;
  j["wall_ms"] = r.wall_ms;
  if (!r.weights.empty()) {
    j["weights"] = r.weights;
  }
  return j;
}

SelectionResult selection_from_json(const nlohmann::json& j) {
  SelectionResult r;
  try {
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.sigma0 = j.at("sigma0").get<double>();
    r.batch_size = j.at("batch_size").get<std::size_t>();
    r.chosen = j.at("chosen").get<std::vector<std::size_t>>();
    r.round_gains = j.at("round_gains").get<std::vector<double>>();
    r.gain_evaluations = j.at("gain_evaluations").get<std::uint64_t>();
    r.wall_ms = j.at("wall_ms").get<double>();
    if (j.contains("weights")) {
      r.weights = j.at("weights").get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseErrorKind::kMalformed, fmt::format("selection json: {}", e.what()));
  }
  if (j.at("n").get<std::size_t>() != r.chosen.size() || r.round_gains.size() != r.chosen.size()) {
    throw ParseError(ParseErrorKind::kDimensionMismatch, "selection json: n, chosen and round_gains disagree");
  }
  return r;
}

SelectionResult greedy_naive(std::span<const EmbeddingGroup> groups, std::size_t n, double sigma0) {
  const auto start = std::chrono::steady_clock::now();
  const Eigen::Index d = check_groups(groups, n, "greedy_naive");
  DesignMatrix design(d, sigma0);

  SelectionResult result;
  result.method = "greedy-naive";
  result.sigma0 = sigma0;
  std::vector<bool> taken(groups.size(), false);
  for (std::size_t round = 0; round < n; ++round) {
    std::size_t best = groups.size();
    double best_gain = -kInf;
    for (std::size_t i = 0; i < groups.size(); ++i) {
      if (taken[i]) {
        continue;
      }
      const double g = design.gain(groups[i]);
      ++result.gain_evaluations;
      if (g > best_gain) {
        best_gain = g;
        best = i;
      }
    }
    taken[best] = true;
    design.commit(groups[best]);
    result.chosen.push_back(best);
    result.round_gains.push_back(best_gain);
  }
  result.wall_ms = elapsed_ms(start);
  return result;
}

SelectionResult fisher_sft(std::span<const EmbeddingGroup> groups, std::size_t n, const LazyGreedyOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  const Eigen::Index d = check_groups(groups, n, "fisher_sft");
  if (opts.batch_size < 1) {
    throw InvalidArgument("fisher_sft: batch size must be at least 1");
  }
  DesignMatrix design(d, opts.sigma0);
  const std::size_t count = groups.size();
  const std::size_t batch = opts.batch_size;

  SelectionResult result;
  result.method = "fisher-sft";
  result.sigma0 = opts.sigma0;
  result.batch_size = batch;

  // Cached upper bounds on the current gains; selected entries hold -inf.
  std::vector<double> cache(count, kInf);
  // Round in which the entry was last recomputed.
  std::vector<std::size_t> fresh_round(count, std::numeric_limits<std::size_t>::max());
  std::vector<char> recompute(count, 0);

  for (std::size_t round = 0; round < n; ++round) {
    double running_max = 0.0;
    for (std::size_t lo = 0; lo < count; lo += batch) {
      const std::size_t hi = std::min(count, lo + batch);
      const double threshold = running_max - tie_window(running_max);
      for (std::size_t i = lo; i < hi; ++i) {
        recompute[i] = cache[i] > threshold ? 1 : 0;
      }
      if (opts.verify_laziness) {
        for (std::size_t i = lo; i < hi; ++i) {
          if (!recompute[i] && cache[i] != -kInf && design.gain(groups[i]) > running_max) {
            throw InvalidState(fmt::format("fisher_sft: skipped sentence {} has a fresh gain above {}", i, running_max));
          }
        }
      }
      parallel_for(lo, hi, opts.threads, [&](std::size_t i) {
        if (recompute[i]) {
          cache[i] = design.gain(groups[i]);
        }
      });
      for (std::size_t i = lo; i < hi; ++i) {
        if (recompute[i]) {
          ++result.gain_evaluations;
          fresh_round[i] = round;
        }
        running_max = std::max(running_max, cache[i]);
      }
    }

    // Argmax over the cache. A stale entry within the tie window of the
    // maximum could still beat or tie the leader once refreshed, so refresh
    // those until the leader is fresh and has no stale rival.
    std::size_t best = count;
    for (;;) {
      best = count;
      double best_gain = -kInf;
      for (std::size_t i = 0; i < count; ++i) {
        if (cache[i] > best_gain) {
          best_gain = cache[i];
          best = i;
        }
      }
      const double floor = best_gain - tie_window(best_gain);
      bool refreshed = false;
      for (std::size_t i = 0; i < count; ++i) {
        if (cache[i] != -kInf && fresh_round[i] != round && cache[i] >= floor) {
          cache[i] = design.gain(groups[i]);
          fresh_round[i] = round;
          ++result.gain_evaluations;
          refreshed = true;
        }
      }
      if (!refreshed) {
        break;
      }
    }

    result.chosen.push_back(best);
    result.round_gains.push_back(cache[best]);
    design.commit(groups[best]);
    cache[best] = -kInf;
  }
  result.wall_ms = elapsed_ms(start);
  return result;
}

std::vector<double> replay_gains(std::span<const EmbeddingGroup> groups, const std::vector<std::size_t>& order,
                                 double sigma0) {
  if (groups.empty()) {
    return {};
  }
  DesignMatrix design(groups.front().rows(), sigma0);
  std::vector<double> gains;
  gains.reserve(order.size());
  for (std::size_t i : order) {
    if (i >= groups.size()) {
      throw InvalidArgument(fmt::format("replay_gains: index {} outside [0, {})", i, groups.size()));
    }
    gains.push_back(design.gain(groups[i]));
    design.commit(groups[i]);
  }
  return gains;
}

}  // namespace fishersft
