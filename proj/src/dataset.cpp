#include "fishersft/dataset.hpp"

#include <cstring>

#include <fmt/format.h>

#include "fishersft/errors.hpp"

namespace fishersft {

bool operator==(const Sentence& a, const Sentence& b) {
  if (a.tokens != b.tokens || a.features.rows() != b.features.rows() || a.features.cols() != b.features.cols()) {
    return false;
  }
  const auto bytes = static_cast<std::size_t>(a.features.size()) * sizeof(float);
  return bytes == 0 || std::memcmp(a.features.data(), b.features.data(), bytes) == 0;
}

void validate(const Dataset& data) {
  if (data.dim == 0 && !data.sentences.empty()) {
    throw InvalidArgument("dataset: embedding dimension must be positive");
  }
  for (std::size_t i = 0; i < data.sentences.size(); ++i) {
    const Sentence& s = data.sentences[i];
    if (s.features.cols() != static_cast<Eigen::Index>(s.tokens.size()) ||
        (s.features.cols() > 0 && s.features.rows() != static_cast<Eigen::Index>(data.dim))) {
      throw InvalidArgument(fmt::format("dataset: sentence {} has a {}x{} feature block for {} tokens (d={})", i,
                                        s.features.rows(), s.features.cols(), s.tokens.size(), data.dim));
    }
    for (std::uint32_t t : s.tokens) {
      if (t >= data.vocab_size) {
        throw InvalidArgument(fmt::format("dataset: sentence {} has token {} outside [0, {})", i, t, data.vocab_size));
      }
    }
    if (!s.features.allFinite()) {
      throw InvalidArgument(fmt::format("dataset: sentence {} has non-finite features", i));
    }
  }
}

std::vector<EmbeddingGroup> design_groups(const Dataset& data) {
  std::vector<EmbeddingGroup> groups;
  groups.reserve(data.size());
  for (const Sentence& s : data.sentences) {
    EmbeddingGroup g = s.features.cast<double>();
    if (g.cols() == 0) {
      g.resize(data.dim, 0);
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

std::vector<EmbeddingGroup> summed_groups(const Dataset& data) {
  std::vector<EmbeddingGroup> groups;
  groups.reserve(data.size());
  for (const Sentence& s : data.sentences) {
    EmbeddingGroup g = EmbeddingGroup::Zero(data.dim, 1);
    for (Eigen::Index j = 0; j < s.features.cols(); ++j) {
      g.col(0) += s.features.col(j).cast<double>();
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

Dataset subset(const Dataset& data, const std::vector<std::size_t>& indices) {
  Dataset out{data.dim, data.vocab_size, {}};
  out.sentences.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= data.size()) {
      throw InvalidArgument(fmt::format("subset: index {} outside dataset of size {}", i, data.size()));
    }
    out.sentences.push_back(data.sentences[i]);
  }
  return out;
}

}  // namespace fishersft
