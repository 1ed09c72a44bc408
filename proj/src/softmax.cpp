#include "fishersft/softmax.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <string_view>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <fmt/format.h>

#include "fishersft/binio.hpp"
#include "fishersft/errors.hpp"

namespace fishersft {
namespace {

void require_nonempty(const SubsetData& data, const char* op) {
  if (data.sentences == 0) {
    throw InvalidArgument(fmt::format("{}: the selected subset is empty", op));
  }
}

void require_compatible(const ParamMatrix& p, const SubsetData& data, const char* op) {
  if (p.dim() != data.dim() || p.vocab_size() != data.vocab_size()) {
    throw InvalidArgument(fmt::format("{}: parameters are {}x{} but data has d={}, L={}", op, p.dim(),
                                      p.vocab_size(), data.dim(), data.vocab_size()));
  }
}

// Column-wise softmax of theta^T F; also returns log-sum-exp per column.
Eigen::MatrixXd column_softmax(const ParamMatrix& p, const Eigen::MatrixXd& features, Eigen::VectorXd* lse) {
  Eigen::MatrixXd z = p.theta.transpose() * features;
  if (lse != nullptr) {
    lse->resize(z.cols());
  }
  for (Eigen::Index u = 0; u < z.cols(); ++u) {
    const double m = z.col(u).maxCoeff();
    z.col(u) = (z.col(u).array() - m).exp().matrix();
    const double s = z.col(u).sum();
    z.col(u) /= s;
    if (lse != nullptr) {
      (*lse)(u) = m + std::log(s);
    }
  }
  return z;
}

double log_pseudo_det(const Eigen::MatrixXd& sym) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym, Eigen::EigenvaluesOnly);
  double acc = 0.0;
  for (Eigen::Index k = 0; k < eig.eigenvalues().size(); ++k) {
    const double lambda = eig.eigenvalues()(k);
    if (!(lambda > 0.0)) {
      return -std::numeric_limits<double>::infinity();
    }
    acc += std::log(lambda);
  }
  return acc;
}

}  // namespace

void project_zero_sum(Eigen::Ref<Eigen::MatrixXd> theta) {
  if (theta.cols() == 0) {
    return;
  }
  const Eigen::VectorXd mean = theta.rowwise().mean();
  theta.colwise() -= mean;
}

Eigen::VectorXd softmax_prob(const ParamMatrix& p, const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() != p.dim()) {
    throw InvalidArgument(fmt::format("softmax_prob: x has length {}, expected {}", x.size(), p.dim()));
  }
  if (!x.allFinite() || !p.theta.allFinite()) {
    throw InvalidArgument("softmax_prob: non-finite input");
  }
  Eigen::VectorXd z = p.theta.transpose() * x;
  z = (z.array() - z.maxCoeff()).exp().matrix();
  return z / z.sum();
}

SubsetData make_subset_data(const Dataset& data, const std::vector<std::size_t>& indices) {
  SubsetData out;
  out.sentences = indices.size();
  const auto d = static_cast<Eigen::Index>(data.dim);
  const auto vocab = static_cast<Eigen::Index>(data.vocab_size);

  // Ordered by the feature bytes, so the result does not depend on the order of `indices`.
  std::map<std::string, Eigen::Index> slot;
  std::vector<const float*> columns;
  std::vector<std::vector<double>> tallies;
  for (std::size_t i : indices) {
    if (i >= data.size()) {
      throw InvalidArgument(fmt::format("make_subset_data: index {} outside dataset of size {}", i, data.size()));
    }
    const Sentence& s = data.sentences[i];
    for (Eigen::Index j = 0; j < s.features.cols(); ++j) {
      const float* col = s.features.col(j).data();
      std::string key(reinterpret_cast<const char*>(col), sizeof(float) * static_cast<std::size_t>(d));
      auto [it, inserted] = slot.try_emplace(std::move(key), static_cast<Eigen::Index>(columns.size()));
      if (inserted) {
        columns.push_back(col);
        tallies.emplace_back(data.vocab_size, 0.0);
      }
      if (s.tokens[j] >= data.vocab_size) {
        throw InvalidArgument(fmt::format("make_subset_data: token {} outside [0, {})", s.tokens[j], vocab));
      }
      tallies[it->second][s.tokens[j]] += 1.0;
    }
  }
  const auto unique = static_cast<Eigen::Index>(columns.size());
  out.features.resize(d, unique);
  out.counts = Eigen::MatrixXd::Zero(unique, vocab);
  Eigen::Index u = 0;
  for (const auto& [key, k] : slot) {
    out.features.col(u) = Eigen::Map<const Eigen::VectorXf>(columns[k], d).cast<double>();
    for (Eigen::Index l = 0; l < vocab; ++l) {
      out.counts(u, l) = tallies[k][l];
    }
    ++u;
  }
  return out;
}

SubsetData make_subset_data(const Dataset& data) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    all[i] = i;
  }
  return make_subset_data(data, all);
}

double subset_nll(const ParamMatrix& p, const SubsetData& data) {
  require_nonempty(data, "subset_nll");
  require_compatible(p, data, "subset_nll");
  const Eigen::MatrixXd z = p.theta.transpose() * data.features;  // L x U
  double total = 0.0;
  for (Eigen::Index u = 0; u < z.cols(); ++u) {
    const double m = z.col(u).maxCoeff();
    const double lse = m + std::log((z.col(u).array() - m).exp().sum());
    const double c = data.counts.row(u).sum();
    total += c * lse - data.counts.row(u).dot(z.col(u));
  }
  return total / static_cast<double>(data.sentences);
}

Eigen::MatrixXd nll_gradient(const ParamMatrix& p, const SubsetData& data) {
  require_nonempty(data, "nll_gradient");
  require_compatible(p, data, "nll_gradient");
  const Eigen::MatrixXd probs = column_softmax(p, data.features, nullptr);  // L x U
  const Eigen::VectorXd totals = data.counts.rowwise().sum();
  // residual(u, l) = c_u p_l(x_u) - counts(u, l)
  const Eigen::MatrixXd residual = totals.asDiagonal() * probs.transpose() - data.counts;
  return data.features * residual / static_cast<double>(data.sentences);
}

Eigen::MatrixXd nll_hessian_dense(const ParamMatrix& p, const SubsetData& data) {
  require_nonempty(data, "nll_hessian_dense");
  require_compatible(p, data, "nll_hessian_dense");
  const Eigen::Index d = data.dim();
  const Eigen::Index vocab = data.vocab_size();
  if (d * vocab > kMaxDenseHessianParams) {
    throw UnsupportedSize(fmt::format("nll_hessian_dense: d*L = {} exceeds {}", d * vocab, kMaxDenseHessianParams));
  }
  const Eigen::MatrixXd probs = column_softmax(p, data.features, nullptr);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(d * vocab, d * vocab);
  for (Eigen::Index u = 0; u < data.features.cols(); ++u) {
    const double c = data.counts.row(u).sum();
    if (c == 0.0) {
      continue;
    }
    const Eigen::VectorXd& pu = probs.col(u);
    Eigen::MatrixXd a = -pu * pu.transpose();
    a.diagonal() += pu;
    const Eigen::MatrixXd xx = data.features.col(u) * data.features.col(u).transpose();
    for (Eigen::Index l = 0; l < vocab; ++l) {
      for (Eigen::Index m = 0; m < vocab; ++m) {
        h.block(l * d, m * d, d, d) += (c * a(l, m)) * xx;
      }
    }
  }
  return h / static_cast<double>(data.sentences);
}

std::string to_string(FitStatus s) {
  switch (s) {
    case FitStatus::kConverged:
      return "converged";
    case FitStatus::kMaxIterations:
      return "max_iters";
    case FitStatus::kStalled:
      return "stalled";
  }
  return "unknown";
}

FitResult fit_mle(const SubsetData& data, const ParamMatrix& init, const FitOptions& opts) {
  require_nonempty(data, "fit_mle");
  require_compatible(init, data, "fit_mle");
  constexpr int kDivergenceRun = 50;

  FitResult out;
  out.params = init;
  project_zero_sum(out.params.theta);
  double f = subset_nll(out.params, data);
  if (!std::isfinite(f)) {
    throw NumericalFailure("fit_mle: initial loss is not finite");
  }
  double step = opts.initial_step;
  int rising = 0;
  ParamMatrix trial = out.params;

  for (out.iterations = 0;; ++out.iterations) {
    Eigen::MatrixXd g = nll_gradient(out.params, data);
    project_zero_sum(g);
    out.grad_inf_norm = g.cwiseAbs().maxCoeff();
    if (out.grad_inf_norm <= opts.grad_tol) {
      out.status = FitStatus::kConverged;
      break;
    }
    if (out.iterations >= opts.max_iters) {
      out.status = FitStatus::kMaxIterations;
      break;
    }
    const double g2 = g.squaredNorm();
    double t = std::min(2.0 * step, 1e6);
    double f_new = 0.0;
    for (;;) {
      trial.theta = out.params.theta - t * g;
      project_zero_sum(trial.theta);
      f_new = subset_nll(trial, data);
      if (std::isfinite(f_new) && f_new <= f - opts.armijo * t * g2) {
        break;
      }
      t *= 0.5;
      if (t < 1e-30) {
        break;
      }
    }
    if (t < 1e-30) {
      out.status = FitStatus::kStalled;
      break;
    }
    if (!std::isfinite(f_new)) {
      throw NumericalFailure("fit_mle: loss became non-finite");
    }
    rising = f_new > f ? rising + 1 : 0;
    if (rising >= kDivergenceRun) {
      throw NumericalFailure(fmt::format("fit_mle: loss rose for {} consecutive steps", kDivergenceRun));
    }
    std::swap(out.params.theta, trial.theta);
    f = f_new;
    step = t;
  }
  out.nll = f;
  return out;
}

Eigen::MatrixXd ones_complement_basis(Eigen::Index vocab) {
  const Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(vocab, 1);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(ones);
  const Eigen::MatrixXd q = qr.householderQ();
  return q.rightCols(vocab - 1);
}

namespace {
constexpr double kLowerBoundSlack = 1e-9;
}  // namespace

Lemma1Report lemma1_diagnostic(const ParamMatrix& p, const SubsetData& data, double sigma_floor) {
  const Eigen::MatrixXd h = nll_hessian_dense(p, data);
  const Eigen::Index d = data.dim();
  const Eigen::Index vocab = data.vocab_size();
  const Eigen::MatrixXd q = ones_complement_basis(vocab);
  const Eigen::MatrixXd probs = column_softmax(p, data.features, nullptr);

  Lemma1Report report;
  report.gamma = std::numeric_limits<double>::infinity();
  Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index u = 0; u < data.features.cols(); ++u) {
    const double c = data.counts.row(u).sum();
    if (c == 0.0) {
      continue;
    }
    const Eigen::VectorXd& pu = probs.col(u);
    Eigen::MatrixXd a = -pu * pu.transpose();
    a.diagonal() += pu;
    const Eigen::MatrixXd restricted = q.transpose() * a * q;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(restricted, Eigen::EigenvaluesOnly);
    report.gamma = std::min(report.gamma, eig.eigenvalues()(0));
    scatter += c * data.features.col(u) * data.features.col(u).transpose();
  }

  // T = Q (x) I_d in token-major layout: T((l, f), (m, f)) = Q(l, m).
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(d * vocab, d * (vocab - 1));
  for (Eigen::Index l = 0; l < vocab; ++l) {
    for (Eigen::Index m = 0; m < vocab - 1; ++m) {
      t.block(l * d, m * d, d, d).diagonal().setConstant(q(l, m));
    }
  }
  report.lhs = log_pseudo_det(t.transpose() * h * t);

  if (!(report.gamma > 0.0)) {
    report.rhs = std::numeric_limits<double>::quiet_NaN();
    report.holds = false;
    report.reason = fmt::format("gamma = {} is not positive on the subspace orthogonal to 1_L", report.gamma);
    return report;
  }
  Eigen::MatrixXd g = (report.gamma / static_cast<double>(data.sentences)) * scatter;
  g.diagonal().array() += sigma_floor;
  report.rhs = static_cast<double>(d) * log_pseudo_det(g);
  // Equality is attained at uniform p when L - 1 = d; allow for rounding.
  report.holds = report.lhs >= report.rhs - kLowerBoundSlack * std::max(1.0, std::abs(report.rhs));
  if (!report.holds) {
    report.reason = fmt::format("lhs {} < rhs {}", report.lhs, report.rhs);
  }
  return report;
}

std::string encode_params(const ParamMatrix& p) {
  std::string out = "FSFTPAR1";
  binio::put_u32(out, 1);
  binio::put_u32(out, static_cast<std::uint32_t>(p.dim()));
  binio::put_u32(out, static_cast<std::uint32_t>(p.vocab_size()));
  for (Eigen::Index k = 0; k < p.theta.size(); ++k) {
    binio::put_f64(out, p.theta.data()[k]);
  }
  return out;
}

ParamMatrix decode_params(std::string_view bytes) {
  binio::Reader in(bytes, "parameter file");
  in.expect_magic("FSFTPAR1");
  const std::uint32_t version = in.u32("version");
  if (version != 1) {
    throw ParseError(ParseErrorKind::kMalformed, fmt::format("parameter file: unsupported version {}", version), 0, 8);
  }
  const std::uint32_t d = in.u32("d");
  const std::uint32_t vocab = in.u32("L");
  const std::uint64_t expected = static_cast<std::uint64_t>(d) * vocab * 8;
  if (in.remaining() != expected) {
    const auto kind = in.remaining() < expected ? ParseErrorKind::kTruncated : ParseErrorKind::kDimensionMismatch;
    throw ParseError(kind,
                     fmt::format("parameter file: header says {}x{} ({} bytes) but {} bytes follow", d, vocab,
                                 expected, in.remaining()),
                     0, in.offset());
  }
  ParamMatrix p{Eigen::MatrixXd(d, vocab)};
  for (Eigen::Index k = 0; k < p.theta.size(); ++k) {
    p.theta.data()[k] = in.f64("theta");
  }
  return p;
}

void write_params(const std::string& path, const ParamMatrix& p) { binio::write_file(path, encode_params(p)); }

ParamMatrix read_params(const std::string& path) { return decode_params(binio::read_file(path)); }

}  // namespace fishersft
