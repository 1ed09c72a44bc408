#pragma once

#include <Eigen/Core>

namespace fishersft {

// A group of embeddings contributed by one sentence, one column per modeled
// position (d x M). M may be zero.
using EmbeddingGroup = Eigen::MatrixXd;

// In-place positive rank-one update of a lower Cholesky factor:
// on return chol * chol^T equals the old product plus v * v^T.
// `v` is used as scratch and is clobbered.
void cholesky_rank_one_update(Eigen::Ref<Eigen::MatrixXd> chol, Eigen::Ref<Eigen::VectorXd> v);

// Ridge-regularized design matrix V = sigma0^2 I + sum of committed x x^T,
// kept together with its lower Cholesky factor and log-determinant.
//
// Reads (gain, whitened_curvature) are const and may run concurrently;
// commit needs exclusive access.
class DesignMatrix {
 public:
  DesignMatrix(Eigen::Index dim, double sigma0);

  Eigen::Index dim() const noexcept { return values_.rows(); }
  double sigma0() const noexcept { return sigma0_; }
  const Eigen::MatrixXd& values() const noexcept { return values_; }
  const Eigen::MatrixXd& chol() const noexcept { return chol_; }
  double logdet() const noexcept { return logdet_; }

  // log det(V + X X^T) - log det(V), computed from the whitened block
  // W = chol^{-1} X as log det(I + W^T W) (or the equal d x d form
  // log det(I + W W^T) when that is smaller). Never forms V^{-1}.
  double gain(const EmbeddingGroup& x) const;

  // sum_j x_j^T V^{-1} x_j.
  double whitened_curvature(const EmbeddingGroup& x) const;

  // V += X X^T via one rank-one factor update per column.
  void commit(const EmbeddingGroup& x);

 private:
  void check_dim(const EmbeddingGroup& x, const char* op) const;

  double sigma0_;
  Eigen::MatrixXd values_;
  Eigen::MatrixXd chol_;
  double logdet_;
};

inline DesignMatrix new_design(Eigen::Index dim, double sigma0 = 1.0) { return DesignMatrix(dim, sigma0); }

}  // namespace fishersft
