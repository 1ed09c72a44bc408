#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "fishersft/dataset.hpp"
#include "fishersft/softmax.hpp"

namespace fishersft {

// L x d independent standard normal draws.
VocabEmbeddings gen_vocab(Eigen::Index vocab, Eigen::Index dim, std::uint64_t seed);

// d x L independent standard normal draws, not gauge-projected.
ParamMatrix gen_theta_star(Eigen::Index dim, Eigen::Index vocab, std::uint64_t seed);

// Rescale every embedding whose norm exceeds 1 onto the unit sphere.
void clip_to_unit_ball(VocabEmbeddings& v);

struct LengthRange {
  std::uint32_t lo = 5;
  std::uint32_t hi = 20;
};

// Sentences of length U[lo, hi]; the first token is uniform over the
// vocabulary and each later token is drawn from the softmax model with the
// previous token's embedding as history. Each sentence keeps length - 1
// modeled pairs.
Dataset gen_corpus(const VocabEmbeddings& vocab, const ParamMatrix& theta_star, std::size_t count, LengthRange lengths,
                   std::uint64_t seed);

// Pre-trained word vectors: "word v1 ... vD" per line. A leading
// "<count> <dim>" header line is skipped.
struct EmbeddingTable {
  std::vector<std::string> words;
  Eigen::MatrixXd vectors;  // words.size() x D
};

EmbeddingTable parse_embedding_table(std::istream& in, std::string_view source = "<stream>");
EmbeddingTable load_embedding_table(const std::string& path);

// `count` distinct rows picked uniformly without replacement.
VocabEmbeddings select_words(const EmbeddingTable& table, Eigen::Index count, std::uint64_t seed,
                             std::vector<std::string>* chosen = nullptr);

// Maps each embedding x to P^T x with P (D x d_target) i.i.d. N(0, 1/d_target)
// drawn from `seed`. `override_projection` replaces P (test hook).
VocabEmbeddings random_project(const VocabEmbeddings& v, Eigen::Index d_target, std::uint64_t seed,
                               const Eigen::MatrixXd* override_projection = nullptr);

// Full synthetic problem from one master seed; streams for the vocabulary,
// Theta_* and the corpus are derived from it.
struct SyntheticConfig {
  Eigen::Index vocab = 20;
  Eigen::Index dim = 10;
  std::size_t sentences = 5000;
  LengthRange lengths{};
  bool normalize = false;
  std::optional<std::string> embedding_table;  // word-vector variant when set
};

struct SyntheticProblem {
  VocabEmbeddings vocab;
  ParamMatrix theta_star;
  Dataset data;
  std::vector<std::string> words;  // only for the word-vector variant
};

SyntheticProblem generate_problem(const SyntheticConfig& cfg, std::uint64_t seed);
SyntheticProblem generate_problem(const SyntheticConfig& cfg, const EmbeddingTable* table, std::uint64_t seed);

// Binary container: "FSFTEMB1", u32 version = 1, u64 N, u32 d, u32 L, then
// per sentence u32 M followed by M records of (u32 token, d x f32).
std::string encode_dataset(const Dataset& data);
Dataset decode_dataset(std::string_view bytes);

// JSON lines: optional header {"format":"fsftemb","version":1,"d":..,"L":..}
// then one {"tokens":[...],"embeddings":[[...],...]} object per sentence.
std::string encode_dataset_jsonl(const Dataset& data);
Dataset decode_dataset_jsonl(std::string_view text);

// Format chosen by extension: .jsonl / .json -> JSON lines, otherwise binary.
void write_dataset(const std::string& path, const Dataset& data);
Dataset read_dataset(const std::string& path);

}  // namespace fishersft
