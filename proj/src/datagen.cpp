#include "fishersft/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "fishersft/binio.hpp"
#include "fishersft/errors.hpp"
#include "fishersft/rng.hpp"

namespace fishersft {
namespace {

constexpr std::string_view kDatasetMagic = "FSFTEMB1";

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool parse_double(std::string_view token, double& out) {
  const char* first = token.data();
  const char* last = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

}  // namespace

VocabEmbeddings gen_vocab(Eigen::Index vocab, Eigen::Index dim, std::uint64_t seed) {
  if (vocab < 1 || dim < 1) {
    throw InvalidArgument(fmt::format("gen_vocab: L={} and d={} must both be positive", vocab, dim));
  }
  Rng rng(seed);
  VocabEmbeddings v{Eigen::MatrixXd(vocab, dim)};
  for (Eigen::Index l = 0; l < vocab; ++l) {
    for (Eigen::Index f = 0; f < dim; ++f) {
      v.vectors(l, f) = rng.normal();
    }
  }
  return v;
}

ParamMatrix gen_theta_star(Eigen::Index dim, Eigen::Index vocab, std::uint64_t seed) {
  if (vocab < 1 || dim < 1) {
    throw InvalidArgument(fmt::format("gen_theta_star: d={} and L={} must both be positive", dim, vocab));
  }
  Rng rng(seed);
  ParamMatrix p{Eigen::MatrixXd(dim, vocab)};
  for (Eigen::Index l = 0; l < vocab; ++l) {
    for (Eigen::Index f = 0; f < dim; ++f) {
      p.theta(f, l) = rng.normal();
    }
  }
  return p;
}

void clip_to_unit_ball(VocabEmbeddings& v) {
  for (Eigen::Index l = 0; l < v.vectors.rows(); ++l) {
    const double norm = v.vectors.row(l).norm();
    if (norm > 1.0) {
      v.vectors.row(l) /= norm;
    }
  }
}

Dataset gen_corpus(const VocabEmbeddings& vocab, const ParamMatrix& theta_star, std::size_t count, LengthRange lengths,
                   std::uint64_t seed) {
  if (lengths.lo < 2 || lengths.hi < lengths.lo) {
    throw InvalidArgument(
        fmt::format("gen_corpus: length range [{}, {}] must satisfy 2 <= lo <= hi", lengths.lo, lengths.hi));
  }
  if (theta_star.dim() != vocab.dim() || theta_star.vocab_size() != vocab.vocab_size()) {
    throw InvalidArgument("gen_corpus: Theta_* shape does not match the vocabulary embeddings");
  }
  const Eigen::Index d = vocab.dim();
  const Eigen::Index vocab_size = vocab.vocab_size();
  // Features are stored as f32; sample from exactly what is stored.
  const Eigen::MatrixXf stored = vocab.vectors.cast<float>();
  Eigen::MatrixXd probs(vocab_size, vocab_size);  // column a: next-token law after token a
  for (Eigen::Index a = 0; a < vocab_size; ++a) {
    const Eigen::VectorXd x = stored.row(a).transpose().cast<double>();
    probs.col(a) = softmax_prob(theta_star, x);
  }

  Rng rng(seed);
  Dataset data{static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(vocab_size), {}};
  data.sentences.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto length = lengths.lo + static_cast<std::uint32_t>(rng.below(lengths.hi - lengths.lo + 1));
    auto prev = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(vocab_size)));
    Sentence s;
    s.tokens.resize(length - 1);
    s.features.resize(d, length - 1);
    for (std::uint32_t j = 0; j + 1 < length; ++j) {
      const double u = rng.uniform();
      Eigen::Index next = vocab_size - 1;
      double acc = 0.0;
      for (Eigen::Index l = 0; l < vocab_size; ++l) {
        acc += probs(l, prev);
        if (u < acc) {
          next = l;
          break;
        }
      }
      s.features.col(j) = stored.row(prev).transpose();
      s.tokens[j] = static_cast<std::uint32_t>(next);
      prev = next;
    }
    data.sentences.push_back(std::move(s));
  }
  return data;
}

EmbeddingTable parse_embedding_table(std::istream& in, std::string_view source) {
  EmbeddingTable table;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  Eigen::Index width = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    std::istringstream fields(line);
    std::vector<std::string> tokens;
    for (std::string t; fields >> t;) {
      tokens.push_back(std::move(t));
    }
    if (tokens.empty()) {
      continue;
    }
    if (line_no == 1 && tokens.size() == 2) {
      double a = 0.0;
      double b = 0.0;
      if (parse_double(tokens[0], a) && parse_double(tokens[1], b) && a == std::floor(a) && b == std::floor(b)) {
        continue;  // "<count> <dim>" header
      }
    }
    if (tokens.size() < 2) {
      throw ParseError(ParseErrorKind::kMalformed, fmt::format("{}:{}: expected a word followed by values", source,
                                                               line_no),
                       line_no);
    }
    const auto dims = static_cast<Eigen::Index>(tokens.size() - 1);
    if (width >= 0 && dims != width) {
      throw ParseError(ParseErrorKind::kDimensionMismatch,
                       fmt::format("{}:{}: {} values, earlier lines have {}", source, line_no, dims, width), line_no);
    }
    width = dims;
    std::vector<double> row(tokens.size() - 1);
    for (std::size_t k = 1; k < tokens.size(); ++k) {
      if (!parse_double(tokens[k], row[k - 1]) || !std::isfinite(row[k - 1])) {
        throw ParseError(ParseErrorKind::kMalformed,
                         fmt::format("{}:{}: field {} (\"{}\") is not a finite number", source, line_no, k + 1,
                                     tokens[k]),
                         line_no);
      }
    }
    table.words.push_back(tokens[0]);
    rows.push_back(std::move(row));
  }
  table.vectors.resize(static_cast<Eigen::Index>(rows.size()), std::max<Eigen::Index>(width, 0));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (Eigen::Index c = 0; c < width; ++c) {
      table.vectors(static_cast<Eigen::Index>(r), c) = rows[r][c];
    }
  }
  return table;
}

EmbeddingTable load_embedding_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ParseError(ParseErrorKind::kIo, fmt::format("cannot open embedding table {}", path));
  }
  return parse_embedding_table(in, path);
}

VocabEmbeddings select_words(const EmbeddingTable& table, Eigen::Index count, std::uint64_t seed,
                             std::vector<std::string>* chosen) {
  const auto available = static_cast<Eigen::Index>(table.words.size());
  if (count < 1 || count > available) {
    throw InvalidArgument(fmt::format("select_words: cannot pick {} words from a table of {}", count, available));
  }
  std::vector<std::size_t> order(table.words.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (Eigen::Index k = 0; k < count; ++k) {
    const auto j = static_cast<std::size_t>(k) + rng.below(order.size() - static_cast<std::size_t>(k));
    std::swap(order[static_cast<std::size_t>(k)], order[j]);
  }
  VocabEmbeddings v{Eigen::MatrixXd(count, table.vectors.cols())};
  if (chosen != nullptr) {
    chosen->clear();
  }
  for (Eigen::Index k = 0; k < count; ++k) {
    v.vectors.row(k) = table.vectors.row(static_cast<Eigen::Index>(order[static_cast<std::size_t>(k)]));
    if (chosen != nullptr) {
      chosen->push_back(table.words[order[static_cast<std::size_t>(k)]]);
    }
  }
  return v;
}

VocabEmbeddings random_project(const VocabEmbeddings& v, Eigen::Index d_target, std::uint64_t seed,
                               const Eigen::MatrixXd* override_projection) {
  if (d_target < 1 || d_target > v.dim()) {
    throw InvalidArgument(
        fmt::format("random_project: target dimension {} must be in [1, {}]", d_target, v.dim()));
  }
  Eigen::MatrixXd projection;
  if (override_projection != nullptr) {
    if (override_projection->rows() != v.dim() || override_projection->cols() != d_target) {
      throw InvalidArgument("random_project: override projection has the wrong shape");
    }
    projection = *override_projection;
  } else {
    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_target));
    projection.resize(v.dim(), d_target);
    for (Eigen::Index c = 0; c < d_target; ++c) {
      for (Eigen::Index r = 0; r < v.dim(); ++r) {
        projection(r, c) = scale * rng.normal();
      }
    }
  }
  // Row l of the output is (P^T x_l)^T = x_l^T P.
  return VocabEmbeddings{v.vectors * projection};
}

SyntheticProblem generate_problem(const SyntheticConfig& cfg, std::uint64_t seed) {
  if (cfg.embedding_table) {
    const EmbeddingTable table = load_embedding_table(*cfg.embedding_table);
    return generate_problem(cfg, &table, seed);
  }
  return generate_problem(cfg, nullptr, seed);
}

SyntheticProblem generate_problem(const SyntheticConfig& cfg, const EmbeddingTable* table, std::uint64_t seed) {
  SyntheticProblem out;
  if (table != nullptr) {
    const VocabEmbeddings words = select_words(*table, cfg.vocab, derive_seed(seed, "words"), &out.words);
    out.vocab = random_project(words, cfg.dim, derive_seed(seed, "projection"));
  } else {
    out.vocab = gen_vocab(cfg.vocab, cfg.dim, derive_seed(seed, "vocab"));
  }
  if (cfg.normalize) {
    clip_to_unit_ball(out.vocab);
  }
  out.theta_star = gen_theta_star(cfg.dim, cfg.vocab, derive_seed(seed, "theta"));
  out.data = gen_corpus(out.vocab, out.theta_star, cfg.sentences, cfg.lengths, derive_seed(seed, "corpus"));
  return out;
}

std::string encode_dataset(const Dataset& data) {
  validate(data);
  std::string out(kDatasetMagic);
  binio::put_u32(out, 1);
  binio::put_u64(out, data.size());
  binio::put_u32(out, data.dim);
  binio::put_u32(out, data.vocab_size);
  for (const Sentence& s : data.sentences) {
    binio::put_u32(out, static_cast<std::uint32_t>(s.tokens.size()));
    for (std::size_t j = 0; j < s.tokens.size(); ++j) {
      binio::put_u32(out, s.tokens[j]);
      for (std::uint32_t f = 0; f < data.dim; ++f) {
        binio::put_f32(out, s.features(f, static_cast<Eigen::Index>(j)));
      }
    }
  }
  return out;
}

Dataset decode_dataset(std::string_view bytes) {
  binio::Reader in(bytes, "dataset");
  in.expect_magic(kDatasetMagic);
  const std::uint32_t version = in.u32("version");
  if (version != 1) {
    throw ParseError(ParseErrorKind::kMalformed, fmt::format("dataset: unsupported version {}", version), 0, 8);
  }
  const std::uint64_t count = in.u64("N");
  Dataset data;
  data.dim = in.u32("d");
  data.vocab_size = in.u32("L");
  if (data.dim == 0 && count > 0) {
    throw ParseError(ParseErrorKind::kDimensionMismatch, "dataset: d = 0 with a non-empty corpus", 0, in.offset());
  }
  const std::size_t record = 4 + 4 * static_cast<std::size_t>(data.dim);
  // Every sentence needs at least its u32 length.
  if (count > in.remaining() / 4) {
    throw ParseError(ParseErrorKind::kTruncated,
                     fmt::format("dataset: header declares {} sentences but only {} bytes follow", count,
                                 in.remaining()),
                     0, in.offset());
  }
  data.sentences.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t m = in.u32("sentence length");
    in.need(static_cast<std::size_t>(m) * record, "sentence records");
    Sentence s;
    s.tokens.resize(m);
    s.features.resize(data.dim, m);
    for (std::uint32_t j = 0; j < m; ++j) {
      const std::size_t at = in.offset();
      s.tokens[j] = in.u32("token id");
      if (s.tokens[j] >= data.vocab_size) {
        throw ParseError(ParseErrorKind::kDimensionMismatch,
                         fmt::format("dataset: sentence {} token {} outside [0, {})", i, s.tokens[j], data.vocab_size),
                         0, at);
      }
      for (std::uint32_t f = 0; f < data.dim; ++f) {
        s.features(f, j) = in.f32("embedding");
      }
    }
    data.sentences.push_back(std::move(s));
  }
  if (in.remaining() != 0) {
    throw ParseError(ParseErrorKind::kDimensionMismatch,
                     fmt::format("dataset: {} trailing bytes after {} sentences", in.remaining(), count), 0,
                     in.offset());
  }
  return data;
}

std::string encode_dataset_jsonl(const Dataset& data) {
  validate(data);
  std::string out = nlohmann::json{{"format", "fsftemb"}, {"version", 1}, {"d", data.dim}, {"L", data.vocab_size}}
                        .dump();
  out.push_back('\n');
  for (const Sentence& s : data.sentences) {
    nlohmann::json embeddings = nlohmann::json::array();
    for (Eigen::Index j = 0; j < s.features.cols(); ++j) {
      std::vector<float> col(s.features.col(j).data(), s.features.col(j).data() + s.features.rows());
      embeddings.push_back(col);
    }
    out += nlohmann::json{{"tokens", s.tokens}, {"embeddings", embeddings}}.dump();
    out.push_back('\n');
  }
  return out;
}

Dataset decode_dataset_jsonl(std::string_view text) {
  Dataset data;
  bool have_header = false;
  bool have_dim = false;
  std::uint32_t max_token = 0;
  bool any_token = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(ParseErrorKind::kMalformed, fmt::format("dataset jsonl:{}: {}", line_no, e.what()), line_no);
    }
    try {
      if (j.contains("format")) {
        if (j.at("format") != "fsftemb") {
          throw ParseError(ParseErrorKind::kMagicMismatch,
                           fmt::format("dataset jsonl:{}: unknown format {}", line_no, j.at("format").dump()),
                           line_no);
        }
        data.dim = j.at("d").get<std::uint32_t>();
        data.vocab_size = j.at("L").get<std::uint32_t>();
        have_header = have_dim = true;
        continue;
      }
      Sentence s;
      s.tokens = j.at("tokens").get<std::vector<std::uint32_t>>();
      const auto& emb = j.at("embeddings");
      if (emb.size() != s.tokens.size()) {
        throw ParseError(ParseErrorKind::kDimensionMismatch,
                         fmt::format("dataset jsonl:{}: {} tokens but {} embeddings", line_no, s.tokens.size(),
                                     emb.size()),
                         line_no);
      }
      for (const auto& col : emb) {
        if (!have_dim) {
          data.dim = static_cast<std::uint32_t>(col.size());
          have_dim = true;
        }
        if (col.size() != data.dim) {
          throw ParseError(ParseErrorKind::kDimensionMismatch,
                           fmt::format("dataset jsonl:{}: embedding of length {}, expected {}", line_no, col.size(),
                                       data.dim),
                           line_no);
        }
      }
      s.features.resize(data.dim, static_cast<Eigen::Index>(s.tokens.size()));
      for (std::size_t c = 0; c < emb.size(); ++c) {
        for (std::uint32_t f = 0; f < data.dim; ++f) {
          s.features(f, static_cast<Eigen::Index>(c)) = emb[c][f].get<float>();
        }
      }
      for (std::uint32_t t : s.tokens) {
        if (have_header && t >= data.vocab_size) {
          throw ParseError(ParseErrorKind::kDimensionMismatch,
                           fmt::format("dataset jsonl:{}: token {} outside [0, {})", line_no, t, data.vocab_size),
                           line_no);
        }
        max_token = std::max(max_token, t);
        any_token = true;
      }
      data.sentences.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(ParseErrorKind::kMalformed, fmt::format("dataset jsonl:{}: {}", line_no, e.what()), line_no);
    }
  }
  if (!have_header) {
    data.vocab_size = any_token ? max_token + 1 : 0;
  }
  return data;
}

void write_dataset(const std::string& path, const Dataset& data) {
  if (ends_with(path, ".jsonl") || ends_with(path, ".json")) {
    binio::write_file(path, encode_dataset_jsonl(data));
  } else {
    binio::write_file(path, encode_dataset(data));
  }
}

Dataset read_dataset(const std::string& path) {
  const std::string bytes = binio::read_file(path);
  if (ends_with(path, ".jsonl") || ends_with(path, ".json")) {
    return decode_dataset_jsonl(bytes);
  }
  return decode_dataset(bytes);
}

}  // namespace fishersft
