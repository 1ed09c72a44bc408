#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fishersft/design.hpp"

namespace fishersft {

struct SelectionResult {
  std::string method;
  std::uint64_t seed = 0;
  double sigma0 = 1.0;
  std::size_t batch_size = 0;  // 0 for methods without batching
  std::vector<std::size_t> chosen;
  std::vector<double> round_gains;  // parallel to `chosen`
  std::vector<double> weights;      // importance weights; only sensitivity sampling fills these
  std::uint64_t gain_evaluations = 0;
  double wall_ms = 0.0;
};

// {"method","seed","n","sigma0","batch_size","chosen","round_gains",
//  "gain_evaluations","wall_ms"} in that order; "weights" is appended only
// when present.
nlohmann::ordered_json to_json(const SelectionResult& r);
SelectionResult selection_from_json(const nlohmann::json& j);

struct LazyGreedyOptions {
  double sigma0 = 1.0;
  std::size_t batch_size = 32;
  unsigned threads = 1;
  // Recompute every skipped entry and throw InvalidState if its fresh gain
  // exceeds the threshold it was skipped against. Debug aid; not counted in
  // gain_evaluations.
  bool verify_laziness = false;
};

// Plain greedy: every round evaluates every unselected group and takes the
// largest gain, lowest index on ties.
SelectionResult greedy_naive(std::span<const EmbeddingGroup> groups, std::size_t n, double sigma0 = 1.0);

// Lazy batched greedy over cached upper bounds on the gains. Produces the
// same chosen sequence and round gains as greedy_naive, bit for bit.
SelectionResult fisher_sft(std::span<const EmbeddingGroup> groups, std::size_t n, const LazyGreedyOptions& opts = {});

// Log-det gain of each item when committed in the given order, starting from
// sigma0^2 I. Used to report round gains for non-greedy selectors.
std::vector<double> replay_gains(std::span<const EmbeddingGroup> groups, const std::vector<std::size_t>& order,
                                 double sigma0 = 1.0);

}  // namespace fishersft
