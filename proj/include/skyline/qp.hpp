#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Core>
#include <Eigen/SparseCore>

namespace skyline::qp {

class QpError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct QpOptions {
  int max_iterations = 20000;
  double eps_abs = 1e-8;
  double eps_rel = 1e-8;
  double sigma = 1e-6;      // x regularization inside the splitting
  double alpha = 1.6;       // over-relaxation
  double rho0 = 0.1;        // base row penalty; equalities get rho0 * eq_scale
  double eq_scale = 1e3;
  int check_interval = 25;  // residual/infeasibility test cadence
  bool adaptive_rho = true;
  bool polish = true;
  int scaling_iterations = 10;
};

enum class QpStatus {
  solved,
  max_iterations,
  primal_infeasible,
  dual_infeasible,
  numeric_failure,
};

const char* status_name(QpStatus s);

struct QpResult {
  QpStatus status = QpStatus::numeric_failure;
  Eigen::VectorXd x;  // primal solution
  Eigen::VectorXd y;  // row duals: P x + q + A^T y = 0 at optimum
  int iterations = 0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  bool polished = false;
};

// Minimize 0.5 x'Px + q'x subject to l <= Ax <= u (P symmetric PSD, upper
// part read). Box constraints are rows of A. Operator-splitting method with
// Ruiz equilibration and an active-set polish; deterministic for fixed inputs.
QpResult solve_qp(const Eigen::SparseMatrix<double>& P, const Eigen::VectorXd& q,
                  const Eigen::SparseMatrix<double>& A, const Eigen::VectorXd& l,
                  const Eigen::VectorXd& u, const QpOptions& opts = {},
                  const Eigen::VectorXd* x_warm = nullptr,
                  const Eigen::VectorXd* y_warm = nullptr);

}  // namespace skyline::qp
