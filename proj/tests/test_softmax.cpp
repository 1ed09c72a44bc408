#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include <doctest.h>

#include "fishersft/binio.hpp"
#include "fishersft/datagen.hpp"
#include "fishersft/errors.hpp"
#include "fishersft/softmax.hpp"
#include "oracles.hpp"

using fishersft::Dataset;
using fishersft::ParamMatrix;
using fishersft::Rng;
using fishersft::SubsetData;

namespace {

ParamMatrix random_params(Rng& rng, Eigen::Index d, Eigen::Index vocab, double scale = 1.0) {
  return {oracle::random_matrix(rng, d, vocab, scale)};
}

Dataset one_pair(const Eigen::VectorXf& x, std::uint32_t token, std::uint32_t vocab) {
  Dataset data{static_cast<std::uint32_t>(x.size()), vocab, {}};
  fishersft::Sentence s;
  s.tokens = {token};
  s.features = x;
  data.sentences.push_back(s);
  return data;
}

Eigen::MatrixXd fd_gradient(const ParamMatrix& p, const SubsetData& data, double h) {
  Eigen::MatrixXd g(p.dim(), p.vocab_size());
  for (Eigen::Index l = 0; l < p.vocab_size(); ++l) {
    for (Eigen::Index f = 0; f < p.dim(); ++f) {
      ParamMatrix plus = p;
      ParamMatrix minus = p;
      plus.theta(f, l) += h;
      minus.theta(f, l) -= h;
      g(f, l) = (fishersft::subset_nll(plus, data) - fishersft::subset_nll(minus, data)) / (2.0 * h);
    }
  }
  return g;
}

Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("softmax probabilities") {
  const ParamMatrix zero = ParamMatrix::zeros(3, 4);
  const Eigen::VectorXd x = Eigen::VectorXd::Ones(3);
  const Eigen::VectorXd p = fishersft::softmax_prob(zero, x);
  for (Eigen::Index l = 0; l < 4; ++l) {
    CHECK(p(l) == doctest::Approx(0.25).epsilon(1e-15));
  }

  // L = 2 reduces to the logistic function of the column difference.
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const ParamMatrix two = random_params(rng, 3, 2, 2.0);
    const Eigen::VectorXd v = oracle::random_matrix(rng, 3, 1);
    const double z = (two.theta.col(1) - two.theta.col(0)).dot(v);
    CHECK(std::abs(fishersft::softmax_prob(two, v)(1) - 1.0 / (1.0 + std::exp(-z))) <= 1e-12);
  }

  // Against the unstabilized definition, and no overflow for large logits.
  for (int trial = 0; trial < 20; ++trial) {
    const ParamMatrix q = random_params(rng, 4, 5);
    const Eigen::VectorXd v = oracle::random_matrix(rng, 4, 1);
    const Eigen::ArrayXd e = (q.theta.transpose() * v).array().exp();
    CHECK((fishersft::softmax_prob(q, v).array() - e / e.sum()).abs().maxCoeff() <= 1e-12);
  }
  ParamMatrix big = ParamMatrix::zeros(1, 3);
  big.theta << 1000.0, 0.0, -1000.0;
  const Eigen::VectorXd pb = fishersft::softmax_prob(big, Eigen::VectorXd::Ones(1));
  CHECK(pb.allFinite());
  CHECK(pb(0) == doctest::Approx(1.0));
}

TEST_CASE("gauge invariance") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const ParamMatrix p = random_params(rng, 3, 5);
    ParamMatrix shifted = p;
    const Eigen::VectorXd c = oracle::random_matrix(rng, 3, 1, 5.0);
    shifted.theta.colwise() += c;
    const Eigen::VectorXd x = oracle::random_matrix(rng, 3, 1);
    CHECK((fishersft::softmax_prob(p, x) - fishersft::softmax_prob(shifted, x)).cwiseAbs().maxCoeff() <= 1e-12);
  }
  ParamMatrix p = random_params(rng, 3, 5);
  fishersft::project_zero_sum(p.theta);
  CHECK(p.theta.rowwise().sum().cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("subset nll") {
  Rng rng(5);
  const Dataset data = oracle::random_dataset(rng, 12, 3, 4, 6);
  const SubsetData all = fishersft::make_subset_data(data);
  CHECK(all.sentences == 12);

  const double positions = all.positions();
  CHECK(fishersft::subset_nll(ParamMatrix::zeros(3, 4), all) ==
        doctest::Approx(positions / 12.0 * std::log(4.0)).epsilon(1e-13));

  for (int trial = 0; trial < 10; ++trial) {
    const ParamMatrix p = random_params(rng, 3, 4);
    CHECK(fishersft::subset_nll(p, all) == doctest::Approx(oracle::direct_nll(p.theta, data)).epsilon(1e-11));
  }

  // Subset normalization uses the subset size.
  const SubsetData part = fishersft::make_subset_data(data, {2, 5, 7});
  const ParamMatrix p = random_params(rng, 3, 4);
  CHECK(fishersft::subset_nll(p, part) ==
        doctest::Approx(oracle::direct_nll(p.theta, fishersft::subset(data, {2, 5, 7}))).epsilon(1e-11));

  SUBCASE("repeated features merge") {
    Dataset rep{2, 3, {}};
    fishersft::Sentence s;
    s.tokens = {0, 1, 0};
    s.features.resize(2, 3);
    s.features << 1, 1, 2, 2, 2, 1;  // columns (1,2), (1,2), (2,1)
    rep.sentences.push_back(s);
    const SubsetData merged = fishersft::make_subset_data(rep);
    CHECK(merged.features.cols() == 2);
    CHECK(merged.positions() == 3.0);
    const ParamMatrix q = random_params(rng, 2, 3);
    CHECK(fishersft::subset_nll(q, merged) == doctest::Approx(oracle::direct_nll(q.theta, rep)).epsilon(1e-13));
  }
  CHECK_THROWS_AS(fishersft::subset_nll(ParamMatrix::zeros(3, 4), fishersft::make_subset_data(data, {})),
                  fishersft::InvalidArgument);
  CHECK_THROWS_AS(fishersft::make_subset_data(data, {99}), fishersft::InvalidArgument);
  CHECK_THROWS_AS(fishersft::subset_nll(ParamMatrix::zeros(2, 4), all), fishersft::InvalidArgument);
}

TEST_CASE("gradient") {
  SUBCASE("uniform single pair") {
    Eigen::VectorXf x(2);
    x << 1.5f, -2.0f;
    const SubsetData data = fishersft::make_subset_data(one_pair(x, 1, 2));
    const Eigen::MatrixXd g = fishersft::nll_gradient(ParamMatrix::zeros(2, 2), data);
    CHECK((g.col(1) - (0.5 - 1.0) * x.cast<double>()).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK((g.col(0) - 0.5 * x.cast<double>()).cwiseAbs().maxCoeff() <= 1e-15);
  }
  SUBCASE("finite differences") {
    Rng rng(6);
    const SubsetData data = fishersft::make_subset_data(oracle::random_dataset(rng, 10, 3, 4, 5));
    for (int trial = 0; trial < 20; ++trial) {
      const ParamMatrix p = random_params(rng, 3, 4);
      const Eigen::MatrixXd g = fishersft::nll_gradient(p, data);
      const Eigen::MatrixXd fd = fd_gradient(p, data, 1e-5);
      CHECK((g - fd).norm() <= 1e-5 * std::max(g.norm(), 1e-3));
      CHECK(g.rowwise().sum().cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("hessian") {
  Rng rng(7);
  SUBCASE("finite differences of the gradient, d = 2, L = 3") {
    for (int trial = 0; trial < 10; ++trial) {
      const SubsetData data = fishersft::make_subset_data(oracle::random_dataset(rng, 6, 2, 3, 4));
      const ParamMatrix p = random_params(rng, 2, 3);
      const Eigen::MatrixXd h = fishersft::nll_hessian_dense(p, data);
      const double step = 1e-5;
      Eigen::MatrixXd fd(6, 6);
      for (Eigen::Index l = 0; l < 3; ++l) {
        for (Eigen::Index f = 0; f < 2; ++f) {
          ParamMatrix plus = p;
          ParamMatrix minus = p;
          plus.theta(f, l) += step;
          minus.theta(f, l) -= step;
          const Eigen::MatrixXd diff =
              (fishersft::nll_gradient(plus, data) - fishersft::nll_gradient(minus, data)) / (2.0 * step);
          // Column-major gradient storage is exactly the token-major index l * d + f.
          fd.col(l * 2 + f) = Eigen::Map<const Eigen::VectorXd>(diff.data(), 6);
        }
      }
      CHECK((h - fd).cwiseAbs().maxCoeff() <= 1e-4);
    }
  }
  SUBCASE("uniform single pair block structure") {
    Eigen::VectorXf xf(2);
    xf << 0.5f, 2.0f;
    const Eigen::VectorXd x = xf.cast<double>();
    const SubsetData data = fishersft::make_subset_data(one_pair(xf, 0, 3));
    const Eigen::MatrixXd h = fishersft::nll_hessian_dense(ParamMatrix::zeros(2, 3), data);
    const Eigen::MatrixXd a =
        Eigen::MatrixXd::Identity(3, 3) / 3.0 - Eigen::MatrixXd::Constant(3, 3, 1.0 / 9.0);
    CHECK((h - kron(a, x * x.transpose())).cwiseAbs().maxCoeff() <= 1e-15);
  }
  SUBCASE("PSD with the 1_L (x) v null space") {
    for (int trial = 0; trial < 20; ++trial) {
      const SubsetData data = fishersft::make_subset_data(oracle::random_dataset(rng, 8, 3, 4, 5));
      const ParamMatrix p = random_params(rng, 3, 4, 2.0);
      const Eigen::MatrixXd h = fishersft::nll_hessian_dense(p, data);
      CHECK((h - h.transpose()).cwiseAbs().maxCoeff() <= 1e-14);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(h, Eigen::EigenvaluesOnly);
      CHECK(eig.eigenvalues()(0) >= -1e-10);
      const Eigen::VectorXd v = oracle::random_matrix(rng, 3, 1);
      Eigen::VectorXd lifted(12);
      for (Eigen::Index l = 0; l < 4; ++l) {
        lifted.segment(l * 3, 3) = v;
      }
      CHECK((h * lifted).cwiseAbs().maxCoeff() <= 1e-12);

      // (diag(p) - p p^T) 1 = 0 at every position.
      for (Eigen::Index u = 0; u < data.features.cols(); ++u) {
        const Eigen::VectorXd pu = fishersft::softmax_prob(p, data.features.col(u));
        Eigen::MatrixXd a = -pu * pu.transpose();
        a.diagonal() += pu;
        CHECK((a * Eigen::VectorXd::Ones(4)).cwiseAbs().maxCoeff() <= 1e-15);
      }
    }
  }
  SUBCASE("size limit") {
    const SubsetData data = fishersft::make_subset_data(oracle::random_dataset(rng, 2, 8, 9, 2));
    CHECK_THROWS_AS(fishersft::nll_hessian_dense(ParamMatrix::zeros(8, 9), data), fishersft::UnsupportedSize);
  }
}

TEST_CASE("convexity along random segments") {
  Rng rng(8);
  const SubsetData data = fishersft::make_subset_data(oracle::random_dataset(rng, 10, 3, 5, 6));
  for (int trial = 0; trial < 50; ++trial) {
    const ParamMatrix a = random_params(rng, 3, 5, 3.0);
    const ParamMatrix b = random_params(rng, 3, 5, 3.0);
    const ParamMatrix mid{0.5 * (a.theta + b.theta)};
    CHECK(fishersft::subset_nll(mid, data) <=
          0.5 * (fishersft::subset_nll(a, data) + fishersft::subset_nll(b, data)) + 1e-10);
  }
}

TEST_CASE("fit_mle") {
  SUBCASE("first-order optimality and gauge") {
    Rng rng(9);
    const SubsetData data = fishersft::make_subset_data(oracle::random_dataset(rng, 60, 3, 4, 6));
    const auto fit = fishersft::fit_mle(data, ParamMatrix::zeros(3, 4));
    CHECK(fit.status == fishersft::FitStatus::kConverged);
    CHECK(fit.grad_inf_norm <= 1e-6);
    CHECK(fishersft::nll_gradient(fit.params, data).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(fit.params.theta.rowwise().sum().cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(fit.nll == doctest::Approx(fishersft::subset_nll(fit.params, data)).epsilon(1e-14));
    for (int trial = 0; trial < 10; ++trial) {
      const ParamMatrix nearby{fit.params.theta + oracle::random_matrix(rng, 3, 4, 1e-2)};
      CHECK(fishersft::subset_nll(nearby, data) >= fit.nll - 1e-12);
    }
  }
  SUBCASE("deterministic token beats uniform") {
    Eigen::VectorXf x(2);
    x << 1.0f, 0.5f;
    const SubsetData data = fishersft::make_subset_data(one_pair(x, 2, 3));
    const auto fit = fishersft::fit_mle(data, ParamMatrix::zeros(2, 3), {.max_iters = 200});
    CHECK(fit.nll < fishersft::subset_nll(ParamMatrix::zeros(2, 3), data));
  }
  SUBCASE("consistency under a zero truth") {
    // L = 5, d = 4, about 2e4 positions, averaged over seeds.
    const std::uint32_t vocab = 5;
    const Eigen::Index d = 4;
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(d, vocab);
    const int seeds = 5;
    for (int seed = 0; seed < seeds; ++seed) {
      const auto v = fishersft::gen_vocab(vocab, d, 100 + seed);
      const Dataset data =
          fishersft::gen_corpus(v, ParamMatrix::zeros(d, vocab), 1500, {5, 20}, 200 + seed);
      const SubsetData sd = fishersft::make_subset_data(data);
      REQUIRE(sd.positions() >= 1e4);
      const auto fit = fishersft::fit_mle(sd, ParamMatrix::zeros(d, vocab));
      mean += fit.params.theta / seeds;
    }
    CHECK(mean.cwiseAbs().maxCoeff() <= 0.1);
  }
}

TEST_CASE("log-det lower bound diagnostic") {
  SUBCASE("uniform p, L = 3") {
    Rng rng(10);
    const SubsetData data = fishersft::make_subset_data(oracle::random_dataset(rng, 5, 2, 3, 4));
    const auto r = fishersft::lemma1_diagnostic(ParamMatrix::zeros(2, 3), data);
    CHECK(r.gamma == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(r.holds);
  }
  SUBCASE("restricted Hessian log-det against an eigen oracle") {
    Rng rng(11);
    const SubsetData data = fishersft::make_subset_data(oracle::random_dataset(rng, 6, 2, 3, 4));
    const ParamMatrix p = random_params(rng, 2, 3);
    const auto r = fishersft::lemma1_diagnostic(p, data);
    // The nonzero spectrum of H equals that of the restricted Hessian.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(fishersft::nll_hessian_dense(p, data),
                                                      Eigen::EigenvaluesOnly);
    double acc = 0.0;
    for (Eigen::Index k = 2; k < 6; ++k) {  // two zero eigenvalues from the 1_L (x) v directions
      acc += std::log(eig.eigenvalues()(k));
    }
    CHECK(r.lhs == doctest::Approx(acc).epsilon(1e-9));
  }
  SUBCASE("random instances") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
      const std::uint32_t d = 2 + static_cast<std::uint32_t>(rng.below(2));
      const std::uint32_t vocab = 3 + static_cast<std::uint32_t>(rng.below(4));
      const SubsetData data = fishersft::make_subset_data(oracle::random_dataset(rng, 8, d, vocab, 5));
      const auto r = fishersft::lemma1_diagnostic(random_params(rng, d, vocab), data);
      REQUIRE(r.gamma > 0.0);
      CHECK(r.holds);
    }
  }
  SUBCASE("degenerate probabilities") {
    Eigen::VectorXf x(2);
    x << 1.0f, 1.0f;
    ParamMatrix p = ParamMatrix::zeros(2, 3);
    p.theta(0, 0) = 800.0;
    const auto r = fishersft::lemma1_diagnostic(p, fishersft::make_subset_data(one_pair(x, 0, 3)));
    CHECK_FALSE(r.holds);
    CHECK_FALSE(r.reason.empty());
  }
}

TEST_CASE("parameter files") {
  Rng rng(13);
  const ParamMatrix p = random_params(rng, 3, 4);
  const std::string bytes = fishersft::encode_params(p);
  CHECK(bytes.size() == 8 + 4 + 4 + 4 + 12 * 8);
  CHECK(bytes.substr(0, 8) == "FSFTPAR1");
  const ParamMatrix back = fishersft::decode_params(bytes);
  CHECK(back.theta == p.theta);
  // Column-major: the second stored value is theta(1, 0).
  double second = 0.0;
  std::memcpy(&second, bytes.data() + 20 + 8, 8);
  CHECK(second == p.theta(1, 0));

  const auto kind_of = [](const std::string& b) {
    try {
      fishersft::decode_params(b);
    } catch (const fishersft::ParseError& e) {
      return e.kind();
    }
    FAIL("expected a parse error");
    return fishersft::ParseErrorKind::kIo;
  };
  CHECK(kind_of("FSFTPAR2" + bytes.substr(8)) == fishersft::ParseErrorKind::kMagicMismatch);
  CHECK(kind_of(bytes.substr(0, bytes.size() - 3)) == fishersft::ParseErrorKind::kTruncated);
  CHECK(kind_of(bytes + std::string(8, '\0')) == fishersft::ParseErrorKind::kDimensionMismatch);
  CHECK(kind_of(bytes.substr(0, 10)) == fishersft::ParseErrorKind::kTruncated);

  const auto path = std::filesystem::temp_directory_path() / "fsft_params_test.bin";
  fishersft::write_params(path.string(), p);
  CHECK(fishersft::read_params(path.string()).theta == p.theta);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(fishersft::read_params("/nonexistent/dir/params.bin"), fishersft::ParseError);
}
