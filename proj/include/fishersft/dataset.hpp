#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "fishersft/design.hpp"

namespace fishersft {

// One sentence as its modeled (history, next-token) pairs: column j of
// `features` is the history embedding that predicts `tokens[j]`. The first
// token of a generated sentence has no history feature, so it only appears
// as the history of the first pair.
struct Sentence {
  std::vector<std::uint32_t> tokens;
  Eigen::MatrixXf features;  // dim x tokens.size()

  std::size_t positions() const noexcept { return tokens.size(); }
};

// Bitwise equality of tokens and stored features.
bool operator==(const Sentence& a, const Sentence& b);

struct Dataset {
  std::uint32_t dim = 0;
  std::uint32_t vocab_size = 0;
  std::vector<Sentence> sentences;

  std::size_t size() const noexcept { return sentences.size(); }
  bool operator==(const Dataset&) const = default;
};

// Token l -> x_l, stored row-major by token: row l is the embedding of token l.
struct VocabEmbeddings {
  Eigen::MatrixXd vectors;  // L x d

  Eigen::Index vocab_size() const noexcept { return vectors.rows(); }
  Eigen::Index dim() const noexcept { return vectors.cols(); }
};

// Throws InvalidArgument on inconsistent shapes, out-of-range tokens or
// non-finite features.
void validate(const Dataset& data);

// Per-sentence embedding groups promoted to double, as consumed by the
// design matrix and the selectors.
std::vector<EmbeddingGroup> design_groups(const Dataset& data);

// One column per sentence: the sum of its position embeddings.
std::vector<EmbeddingGroup> summed_groups(const Dataset& data);

// Subset of sentences, in the given order.
Dataset subset(const Dataset& data, const std::vector<std::size_t>& indices);

}  // namespace fishersft
