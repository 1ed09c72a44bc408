#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fishersft/dataset.hpp"

namespace fishersft {

// d x L parameter matrix; column l is the weight vector of token l.
struct ParamMatrix {
  Eigen::MatrixXd theta;

  static ParamMatrix zeros(Eigen::Index dim, Eigen::Index vocab) { return {Eigen::MatrixXd::Zero(dim, vocab)}; }
  Eigen::Index dim() const noexcept { return theta.rows(); }
  Eigen::Index vocab_size() const noexcept { return theta.cols(); }
};

// Subtract the column mean from every column, so that theta * 1 = 0.
void project_zero_sum(Eigen::Ref<Eigen::MatrixXd> theta);

// Numerically stable softmax of theta^T x.
Eigen::VectorXd softmax_prob(const ParamMatrix& p, const Eigen::Ref<const Eigen::VectorXd>& x);

// Training pairs of a sentence subset, with identical feature vectors merged:
// column u of `features` occurred `counts(u, l)` times followed by token l.
// Losses are normalized by `sentences`, the subset size n.
struct SubsetData {
  Eigen::MatrixXd features;  // d x U
  Eigen::MatrixXd counts;    // U x L
  std::size_t sentences = 0;

  Eigen::Index dim() const noexcept { return features.rows(); }
  Eigen::Index vocab_size() const noexcept { return counts.cols(); }
  double positions() const { return counts.sum(); }
};

SubsetData make_subset_data(const Dataset& data, const std::vector<std::size_t>& indices);
SubsetData make_subset_data(const Dataset& data);

// -(1/n) sum_i sum_j log p(y_ij | x_ij; theta).
double subset_nll(const ParamMatrix& p, const SubsetData& data);

// d x L; column l is (1/n) sum (p_l - [y = l]) x.
Eigen::MatrixXd nll_gradient(const ParamMatrix& p, const SubsetData& data);

// Dense (dL) x (dL) Hessian. Index (l, f) maps to l * d + f, so block (l, l')
// is (1/n) sum (p_l [l = l'] - p_l p_l') x x^T. Limited to d * L <= 64.
Eigen::MatrixXd nll_hessian_dense(const ParamMatrix& p, const SubsetData& data);

inline constexpr Eigen::Index kMaxDenseHessianParams = 64;

enum class FitStatus { kConverged, kMaxIterations, kStalled };
std::string to_string(FitStatus s);

struct FitOptions {
  std::size_t max_iters = 5000;
  double grad_tol = 1e-6;
  double armijo = 1e-4;
  double initial_step = 1.0;
};

struct FitResult {
  ParamMatrix params;
  FitStatus status = FitStatus::kMaxIterations;
  std::size_t iterations = 0;
  double nll = 0.0;
  double grad_inf_norm = 0.0;
};

// Gradient descent with halving Armijo backtracking, projected onto the
// zero-sum gauge after every step. Throws NumericalFailure when the loss
// becomes non-finite or rises for 50 consecutive accepted steps.
FitResult fit_mle(const SubsetData& data, const ParamMatrix& init, const FitOptions& opts = {});

struct Lemma1Report {
  double gamma = 0.0;  // min restricted eigenvalue of diag(p) - p p^T over positions
  double lhs = 0.0;    // log pseudo-determinant of the Hessian off its 1_L (x) v null space
  double rhs = 0.0;    // d * logdet((gamma / n) sum x x^T + sigma_floor I)
  bool holds = false;
  std::string reason;
};

// Checks the Kronecker log-det lower bound of the Hessian on the subspace
// orthogonal to 1_L, where diag(p) - p p^T is nonsingular.
Lemma1Report lemma1_diagnostic(const ParamMatrix& p, const SubsetData& data, double sigma_floor = 1e-12);

// Orthonormal basis (L x (L-1)) of the complement of the all-ones vector.
Eigen::MatrixXd ones_complement_basis(Eigen::Index vocab);

// Parameter file: "FSFTPAR1", u32 version = 1, u32 d, u32 L, then d * L
// little-endian f64 in column-major order.
std::string encode_params(const ParamMatrix& p);
ParamMatrix decode_params(std::string_view bytes);
void write_params(const std::string& path, const ParamMatrix& p);
ParamMatrix read_params(const std::string& path);

}  // namespace fishersft
