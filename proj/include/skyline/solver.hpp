#pragma once

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "skyline/horizon.hpp"
#include "skyline/qp.hpp"

namespace skyline::solver {

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SolverOptions {
  int max_iterations = 300;
  double tolerance = 1e-6;  // target for constraint violation and KKT residual
  double line_search_factor = 0.5;
  double min_step = 1e-8;
  double armijo = 1e-4;
  double merit_penalty = 10.0;  // initial L1 / augmented-Lagrangian penalty
  double penalty_growth = 10.0;
  double penalty_cap = 1e8;
  double ilqr_reg = 1e-6;  // control Hessian shift engaged on backward failure
  double reg_growth = 10.0;
  double reg_cap = 1e9;
  int verbosity = 0;
  qp::QpOptions qp;
};

enum class SolveStatus { converged, max_iter, line_search_failure, diverged };
const char* status_name(SolveStatus s);

struct IterationLog {
  int iteration = 0;
  double objective = 0.0;
  double violation = 0.0;
  double kkt = 0.0;
  double step_length = 0.0;
  double penalty = 0.0;
  double merit = 0.0;
};

// CSV dump of a solve log: header iter,objective,violation,kkt,step_length,
// penalty followed by one row per iteration, full double precision.
std::string log_csv(const std::vector<IterationLog>& log);

struct SolveResult {
  SolveStatus status = SolveStatus::diverged;
  std::map<std::string, Eigen::MatrixXd> trajectories;  // name -> dim x instances
  Eigen::VectorXd z;  // flat decision vector (layout of the assembled NLP)
  double objective = 0.0;
  double kkt_residual = 0.0;
  double constraint_violation = 0.0;
  int iterations = 0;
  std::vector<IterationLog> log;

  // GN-SQP: multipliers of the last QP subproblem. Constraint rows satisfy
  // g + A^T y = 0 at a KKT point; bound duals are indexed by decision column.
  Eigen::VectorXd duals_constraints, duals_bounds;

  // ILQR: feedback gains per stage (rows = free inputs of that stage) and the
  // augmented-Lagrangian state, reusable to warm start a follow-up solve.
  // Multiplier rows 0..n_constraint_rows-1 are constraint rows; the next
  // n_decision rows are variable-bound rows keyed by decision column.
  std::vector<Eigen::MatrixXd> gains;
  Eigen::VectorXd al_lower, al_upper;
  double al_penalty = 0.0;
};

// Gauss-Newton SQP on the assembled NLP: linearize, solve an inequality
// constrained QP subproblem, backtrack on an L1 exact-penalty merit.
SolveResult solve_gnsqp(const horizon::Nlp& nlp, const SolverOptions& opts = {});

// Multiple-shooting ILQR on a transcribed problem. Shooting gaps in the
// initial guess are allowed and contracted by the rollout; constraints other
// than the dynamics defects are handled by an augmented Lagrangian whose
// multipliers (and penalty) can be seeded from `warm`.
SolveResult solve_ilqr(const horizon::HorizonProblem& prb,
                       const SolverOptions& opts = {},
                       const SolveResult* warm = nullptr);

// Callback bundle for attaching an out-of-tree NLP solver. All vectors use
// the assembled decision layout; Jacobian values align with `jacobian_rows`/
// `jacobian_cols` (one value per structural nonzero, fixed order).
struct NlpCallbacks {
  int n_decision = 0;
  int n_constraints = 0;
  Eigen::VectorXd lower, upper;          // variable bounds
  Eigen::VectorXd row_lower, row_upper;  // constraint row bounds
  Eigen::VectorXd guess;
  std::vector<int> jacobian_rows, jacobian_cols;
  std::function<double(const Eigen::VectorXd&)> objective;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> constraints;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> jacobian_values;
};

NlpCallbacks external_solver_adapter(const horizon::Nlp& nlp);

// Sets the problem guess to the previous solution shifted forward by `shift`
// nodes, holding the last instance. Parameters are untouched.
void warm_start(horizon::HorizonProblem& prb, const SolveResult& previous,
                int shift);

// Shifts the augmented-Lagrangian multipliers of `previous` by `shift` nodes
// (same hold rule as warm_start) so they match a warm-started problem.
void shift_multipliers(const horizon::Nlp& nlp, SolveResult& previous, int shift);

}  // namespace skyline::solver
