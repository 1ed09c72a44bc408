#include "fishersft/design.hpp"

#include <cmath>
#include <string>

#include <Eigen/Cholesky>
#include <fmt/format.h>

#include "fishersft/errors.hpp"

namespace fishersft {

void cholesky_rank_one_update(Eigen::Ref<Eigen::MatrixXd> chol, Eigen::Ref<Eigen::VectorXd> v) {
  const Eigen::Index n = chol.rows();
  for (Eigen::Index k = 0; k < n; ++k) {
    const double lkk = chol(k, k);
    const double r = std::hypot(lkk, v(k));
    const double c = r / lkk;
    const double s = v(k) / lkk;
    chol(k, k) = r;
    for (Eigen::Index i = k + 1; i < n; ++i) {
      chol(i, k) = (chol(i, k) + s * v(i)) / c;
      v(i) = c * v(i) - s * chol(i, k);
    }
  }
}

DesignMatrix::DesignMatrix(Eigen::Index dim, double sigma0) : sigma0_(sigma0) {
  if (dim < 1) {
    throw InvalidArgument("new_design: dimension must be at least 1");
  }
  if (!(sigma0 > 0.0) || !std::isfinite(sigma0)) {
    throw InvalidArgument(fmt::format("new_design: sigma0 must be positive and finite, got {}", sigma0));
  }
  values_ = Eigen::MatrixXd::Identity(dim, dim) * (sigma0 * sigma0);
  chol_ = Eigen::MatrixXd::Identity(dim, dim) * sigma0;
  logdet_ = 2.0 * static_cast<double>(dim) * std::log(sigma0);
}

void DesignMatrix::check_dim(const EmbeddingGroup& x, const char* op) const {
  if (x.cols() > 0 && x.rows() != dim()) {
    throw InvalidArgument(fmt::format("{}: embedding dimension {} does not match design dimension {}", op,
                                      x.rows(), dim()));
  }
}

double DesignMatrix::gain(const EmbeddingGroup& x) const {
  check_dim(x, "gain");
  if (x.cols() == 0) {
    return 0.0;
  }
  const Eigen::MatrixXd w = chol_.triangularView<Eigen::Lower>().solve(x);
  // det(I_M + W^T W) = det(I_d + W W^T); factor whichever is smaller.
  Eigen::MatrixXd cap;
  if (w.cols() <= w.rows()) {
    cap = Eigen::MatrixXd::Identity(w.cols(), w.cols());
    cap.selfadjointView<Eigen::Lower>().rankUpdate(w.transpose());
  } else {
    cap = Eigen::MatrixXd::Identity(w.rows(), w.rows());
    cap.selfadjointView<Eigen::Lower>().rankUpdate(w);
  }
  Eigen::LLT<Eigen::MatrixXd> llt(cap);
  const Eigen::MatrixXd& l = llt.matrixLLT();
  double g = 0.0;
  for (Eigen::Index k = 0; k < l.rows(); ++k) {
    g += std::log(l(k, k));
  }
  return g > 0.0 ? 2.0 * g : 0.0;
}

double DesignMatrix::whitened_curvature(const EmbeddingGroup& x) const {
  check_dim(x, "whitened_curvature");
  if (x.cols() == 0) {
    return 0.0;
  }
  return chol_.triangularView<Eigen::Lower>().solve(x).squaredNorm();
}

void DesignMatrix::commit(const EmbeddingGroup& x) {
  check_dim(x, "commit");
  if (x.cols() == 0) {
    return;
  }
  values_.noalias() += x * x.transpose();
  Eigen::VectorXd scratch(dim());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    scratch = x.col(j);
    cholesky_rank_one_update(chol_, scratch);
  }
  double half = 0.0;
  for (Eigen::Index k = 0; k < dim(); ++k) {
    half += std::log(chol_(k, k));
  }
  logdet_ = 2.0 * half;
}

}  // namespace fishersft
