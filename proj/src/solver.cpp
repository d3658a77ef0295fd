#include "skyline/solver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/SparseCore>

namespace skyline::solver {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

using Eigen::MatrixXd;
using Eigen::VectorXd;
using horizon::Nlp;
using SpMat = Eigen::SparseMatrix<double>;

double inf_norm(const VectorXd& v) {
  return v.size() ? v.cwiseAbs().maxCoeff() : 0.0;
}

void check_options(const SolverOptions& o) {
  if (!(o.max_iterations > 0) || !(o.tolerance > 0) || o.tolerance >= 1.0 ||
      !(o.line_search_factor > 0) || o.line_search_factor >= 1.0 ||
      !(o.min_step > 0) || !(o.merit_penalty > 0) || !(o.penalty_growth > 1) ||
      !(o.ilqr_reg > 0) || !(o.reg_growth > 1))
    throw SolverError("invalid solver options");
}

// Global constraint-row bounds stacked from the per-block vectors.
void row_bounds(const Nlp& nlp, VectorXd& rl, VectorXd& ru) {
  rl.resize(nlp.n_constraint_rows);
  ru.resize(nlp.n_constraint_rows);
  for (const auto& b : nlp.constraints) {
    rl.segment(b.row_offset, b.lower.size()) = b.lower;
    ru.segment(b.row_offset, b.upper.size()) = b.upper;
  }
}

double range_violation(double v, double lo, double hi) {
  return std::max({0.0, lo - v, v - hi});
}

// ---------------------------------------------------------------------------
// GN-SQP

struct Linearization {
  double f = 0.0;
  VectorXd g;                                // objective gradient
  std::vector<Eigen::Triplet<double>> h;     // GN Hessian, upper triangle
  VectorXd c;                                // constraint row values
  std::vector<Eigen::Triplet<double>> a;     // constraint Jacobian
};

void scatter_gn(std::vector<Eigen::Triplet<double>>& trips, int ci, int cj,
                const MatrixXd& m, bool same_block_pair) {
  if (ci == cj) {
    MatrixXd s = same_block_pair ? m : MatrixXd(m + m.transpose());
    for (int a = 0; a < s.rows(); ++a)
      for (int b = a; b < s.cols(); ++b) trips.emplace_back(ci + a, cj + b, s(a, b));
  } else if (ci < cj) {
    for (int a = 0; a < m.rows(); ++a)
      for (int b = 0; b < m.cols(); ++b) trips.emplace_back(ci + a, cj + b, m(a, b));
  } else {
    for (int a = 0; a < m.rows(); ++a)
      for (int b = 0; b < m.cols(); ++b) trips.emplace_back(cj + b, ci + a, m(a, b));
  }
}

Linearization linearize(const Nlp& nlp, const VectorXd& z) {
  Linearization L;
  L.g = VectorXd::Zero(nlp.n_decision);
  L.c = VectorXd::Zero(nlp.n_constraint_rows);
  VectorXd r;
  std::vector<MatrixXd> jac;
  for (const auto& b : nlp.costs) {
    b.fn.value_and_jacobian(nlp.gather(b, z), r, jac);
    L.f += b.linear_cost ? b.weight * r.sum() : 0.5 * b.weight * r.squaredNorm();
    const auto& dims = b.fn.input_dims();
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (b.col_offsets[i] < 0 || jac[i].size() == 0) continue;
      if (b.linear_cost)
        L.g.segment(b.col_offsets[i], dims[i]) +=
            b.weight * jac[i].colwise().sum().transpose();
      else
        L.g.segment(b.col_offsets[i], dims[i]) += b.weight * jac[i].transpose() * r;
    }
    if (b.linear_cost) continue;
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (b.col_offsets[i] < 0 || jac[i].size() == 0) continue;
      for (std::size_t j = i; j < dims.size(); ++j) {
        if (b.col_offsets[j] < 0 || jac[j].size() == 0) continue;
        const MatrixXd m = b.weight * jac[i].transpose() * jac[j];
        scatter_gn(L.h, b.col_offsets[i], b.col_offsets[j], m, i == j);
      }
    }
  }
  for (const auto& b : nlp.constraints) {
    b.fn.value_and_jacobian(nlp.gather(b, z), r, jac);
    L.c.segment(b.row_offset, r.size()) = r;
    const auto& dims = b.fn.input_dims();
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (b.col_offsets[i] < 0 || jac[i].size() == 0) continue;
      for (int rr = 0; rr < jac[i].rows(); ++rr)
        for (int cc = 0; cc < jac[i].cols(); ++cc)
          L.a.emplace_back(b.row_offset + rr, b.col_offsets[i] + cc, jac[i](rr, cc));
    }
  }
  return L;
}

double l1_infeasibility(const VectorXd& c, const VectorXd& rl, const VectorXd& ru,
                        const VectorXd& z, const VectorXd& zl, const VectorXd& zu) {
  double v = 0.0;
  for (int i = 0; i < c.size(); ++i) v += range_violation(c[i], rl[i], ru[i]);
  for (int i = 0; i < z.size(); ++i) v += range_violation(z[i], zl[i], zu[i]);
  return v;
}

double max_infeasibility(const VectorXd& c, const VectorXd& rl, const VectorXd& ru,
                         const VectorXd& z, const VectorXd& zl, const VectorXd& zu) {
  double v = 0.0;
  for (int i = 0; i < c.size(); ++i)
    v = std::max(v, range_violation(c[i], rl[i], ru[i]));
  for (int i = 0; i < z.size(); ++i)
    v = std::max(v, range_violation(z[i], zl[i], zu[i]));
  return v;
}

}  // namespace

const char* status_name(SolveStatus s) {
  switch (s) {
    case SolveStatus::converged: return "converged";
    case SolveStatus::max_iter: return "max_iter";
    case SolveStatus::line_search_failure: return "line_search_failure";
    case SolveStatus::diverged: return "diverged";
  }
  return "?";
}

std::string log_csv(const std::vector<IterationLog>& log) {
  std::string out = "iter,objective,violation,kkt,step_length,penalty\n";
  char buf[256];
  for (const auto& l : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  l.iteration, l.objective, l.violation, l.kkt, l.step_length,
                  l.penalty);
    out += buf;
  }
  return out;
}

SolveResult solve_gnsqp(const Nlp& nlp, const SolverOptions& opts) {
  check_options(opts);
  const int n = nlp.n_decision;
  const int mc = nlp.n_constraint_rows;
  VectorXd rl, ru;
  row_bounds(nlp, rl, ru);

  // Bound rows enter the QP only where a bound is finite.
  std::vector<int> brow;
  for (int i = 0; i < n; ++i)
    if (std::isfinite(nlp.lower[i]) || std::isfinite(nlp.upper[i]))
      brow.push_back(i);
  const int nb = static_cast<int>(brow.size());

  VectorXd z = nlp.guess.cwiseMax(nlp.lower).cwiseMin(nlp.upper);
  double pi = opts.merit_penalty;
  VectorXd y = VectorXd::Zero(mc + nb);  // QP duals: constraint rows, then bounds

  SolveResult res;
  int accepted = 0;
  bool have_qp_warm = false;
  VectorXd qp_x_warm, qp_y_warm;

  auto finish = [&](SolveStatus st, const Linearization& L, double viol, double kkt) {
    res.status = st;
    res.z = z;
    res.trajectories = nlp.unpack(z);
    res.objective = L.f;
    res.constraint_violation = viol;
    res.kkt_residual = kkt;
    res.iterations = accepted;
    res.duals_constraints = y.head(mc);
    res.duals_bounds = VectorXd::Zero(n);
    for (int t = 0; t < nb; ++t) res.duals_bounds[brow[t]] = y[mc + t];
  };

  Linearization L;
  for (int it = 1; it <= opts.max_iterations; ++it) {
    L = linearize(nlp, z);
    const double viol = max_infeasibility(L.c, rl, ru, z, nlp.lower, nlp.upper);

    SpMat Ac(mc, n);
    Ac.setFromTriplets(L.a.begin(), L.a.end());
    VectorXd kv = L.g + Ac.transpose() * y.head(mc);
    for (int t = 0; t < nb; ++t) kv[brow[t]] += y[mc + t];
    const double kkt = inf_norm(kv);

    if (viol <= opts.tolerance && kkt <= opts.tolerance) {
      finish(SolveStatus::converged, L, viol, kkt);
      return res;
    }

    // QP subproblem on the step dz.
    SpMat P(n, n);
    P.setFromTriplets(L.h.begin(), L.h.end());
    std::vector<Eigen::Triplet<double>> at = L.a;
    for (int t = 0; t < nb; ++t) at.emplace_back(mc + t, brow[t], 1.0);
    SpMat A(mc + nb, n);
    A.setFromTriplets(at.begin(), at.end());
    VectorXd ql(mc + nb), qu(mc + nb);
    ql.head(mc) = rl - L.c;
    qu.head(mc) = ru - L.c;
    for (int t = 0; t < nb; ++t) {
      ql[mc + t] = nlp.lower[brow[t]] - z[brow[t]];
      qu[mc + t] = nlp.upper[brow[t]] - z[brow[t]];
    }

    qp::QpResult sub = qp::solve_qp(P, L.g, A, ql, qu, opts.qp,
                                    have_qp_warm ? &qp_x_warm : nullptr,
                                    have_qp_warm ? &qp_y_warm : nullptr);
    if (opts.verbosity >= 2)
      std::fprintf(stderr, "sqp it=%d qp=%s qp_it=%d rp=%.2e rd=%.2e\n", it,
                   qp::status_name(sub.status), sub.iterations,
                   sub.primal_residual, sub.dual_residual);
    VectorXd dz;
    double v_pred = 0.0;  // linearized violation left at the full step
    const double v1 = l1_infeasibility(L.c, rl, ru, z, nlp.lower, nlp.upper);
    if (sub.status == qp::QpStatus::solved ||
        sub.status == qp::QpStatus::max_iterations) {
      dz = sub.x;
      y = sub.y;
      // The penalty must dominate the multipliers for dz to be a merit
      // descent direction. Elastic steps below descend at the current
      // penalty by construction, so the safeguard only applies here.
      pi = std::max(pi, std::min(1.1 * inf_norm(y), opts.penalty_cap));
    } else if (sub.status == qp::QpStatus::primal_infeasible) {
      // Elastic relaxation: L1 slacks on the constraint rows, priced at the
      // current penalty, keep the subproblem solvable. The penalty ramps only
      // while the relaxed step fails to cut the linearized infeasibility.
      const int ne = n + 2 * mc;
      std::vector<Eigen::Triplet<double>> et = L.a;
      for (int r = 0; r < mc; ++r) {
        et.emplace_back(r, n + r, 1.0);
        et.emplace_back(r, n + mc + r, -1.0);
      }
      for (int t = 0; t < nb; ++t) et.emplace_back(mc + t, brow[t], 1.0);
      for (int r = 0; r < 2 * mc; ++r)
        et.emplace_back(mc + nb + r, n + r, 1.0);
      SpMat Ae(mc + nb + 2 * mc, ne);
      Ae.setFromTriplets(et.begin(), et.end());
      SpMat Pe(ne, ne);
      Pe.setFromTriplets(L.h.begin(), L.h.end());
      VectorXd qe(ne);
      qe.head(n) = L.g;
      VectorXd el(mc + nb + 2 * mc), eu(mc + nb + 2 * mc);
      el.head(mc + nb) = ql;
      eu.head(mc + nb) = qu;
      el.tail(2 * mc).setZero();
      eu.tail(2 * mc).setConstant(kInf);
      for (;;) {
        qe.tail(2 * mc).setConstant(pi);
        qp::QpResult esub = qp::solve_qp(Pe, qe, Ae, el, eu, opts.qp);
        if (esub.status != qp::QpStatus::solved &&
            esub.status != qp::QpStatus::max_iterations) {
          finish(SolveStatus::diverged, L, viol, kkt);
          return res;
        }
        dz = esub.x.head(n);
        y = esub.y.head(mc + nb);
        v_pred = esub.x.tail(2 * mc).cwiseMax(0.0).sum();
        if (v_pred <= 0.99 * v1 || v1 <= opts.tolerance) break;
        pi *= opts.penalty_growth;
        if (pi > opts.penalty_cap) {
          finish(SolveStatus::diverged, L, viol, kkt);
          return res;
        }
      }
    } else {
      finish(SolveStatus::diverged, L, viol, kkt);
      return res;
    }
    qp_x_warm = dz;
    qp_y_warm = y;
    have_qp_warm = true;

    const double merit0 = L.f + pi * v1;
    const double ddir = L.g.dot(dz) - pi * std::max(0.0, v1 - v_pred);
    const double slack = 1e-14 * (1.0 + std::abs(merit0));

    double alpha = 1.0;
    bool stepped = false;
    VectorXd znew;
    double merit_new = 0.0;
    while (alpha >= opts.min_step) {
      znew = z + alpha * dz;
      const double fnew = nlp.eval_objective(znew);
      const VectorXd cnew = nlp.eval_constraints(znew);
      merit_new =
          fnew + pi * l1_infeasibility(cnew, rl, ru, znew, nlp.lower, nlp.upper);
      if (merit_new <= merit0 + opts.armijo * alpha * ddir + slack) {
        stepped = true;
        break;
      }
      alpha *= opts.line_search_factor;
    }
    if (!stepped) {
      finish(SolveStatus::line_search_failure, L, viol, kkt);
      return res;
    }
    z = znew;
    ++accepted;
    res.log.push_back({it, L.f, viol, kkt, alpha, pi, merit_new});
  }

  L = linearize(nlp, z);
  const double viol = max_infeasibility(L.c, rl, ru, z, nlp.lower, nlp.upper);
  SpMat Ac(mc, n);
  Ac.setFromTriplets(L.a.begin(), L.a.end());
  VectorXd kv = L.g + Ac.transpose() * y.head(mc);
  for (int t = 0; t < nb; ++t) kv[brow[t]] += y[mc + t];
  finish(viol <= opts.tolerance && inf_norm(kv) <= opts.tolerance
             ? SolveStatus::converged
             : SolveStatus::max_iter,
         L, viol, inf_norm(kv));
  return res;
}

// ---------------------------------------------------------------------------
// ILQR

namespace {

// One NLP block pinned to a stage, with every function input classified
// against that stage: current state, current input, next state, or parameter.
struct StagePiece {
  const Nlp::Block* b = nullptr;
  enum Target { x_now, u_now, x_next, param };
  std::vector<Target> target;
  std::vector<int> within;
};

struct BoundRow {
  int col = 0;     // decision column; multiplier row is mc + col
  bool input = false;
  int within = 0;  // offset inside x or u
  double lo = 0.0, hi = 0.0;
};

struct IlqrPlan {
  int N = 0, nx = 0, nu = 0, mc = 0;
  VectorXd x0;
  std::vector<StagePiece> defect;                // per stage 0..N-1
  std::vector<std::vector<StagePiece>> costs;    // per node 0..N
  std::vector<std::vector<StagePiece>> cons;     // per node, non-defect
  std::vector<std::vector<BoundRow>> bounds;     // per node AL bound rows
  std::vector<std::vector<int>> free_u;          // per stage free input indices
  std::vector<VectorXd> fixed_u;                 // per stage, fixed entries set
  std::vector<std::vector<bool>> is_fixed;       // per stage input mask
};

StagePiece classify(const Nlp& nlp, const Nlp::Block& b, bool defect_block) {
  StagePiece p;
  p.b = &b;
  const auto& dims = b.fn.input_dims();
  const int state_cols = (nlp.n_nodes + 1) * nlp.nx;
  const int input_cols = nlp.n_nodes * nlp.nu;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const int c = b.col_offsets[i];
    if (c < 0) {
      p.target.push_back(StagePiece::param);
      p.within.push_back(0);
      continue;
    }
    if (c < state_cols) {
      const int node = c / nlp.nx;
      if (node == b.node) {
        p.target.push_back(StagePiece::x_now);
      } else if (node == b.node + 1 && defect_block) {
        p.target.push_back(StagePiece::x_next);
      } else {
        throw SolverError("term '" + b.term + "' is not stage separable");
      }
      p.within.push_back(c % nlp.nx);
    } else if (c < state_cols + input_cols) {
      const int node = (c - state_cols) / nlp.nu;
      if (node != b.node)
        throw SolverError("term '" + b.term + "' is not stage separable");
      p.target.push_back(StagePiece::u_now);
      p.within.push_back((c - state_cols) % nlp.nu);
    } else {
      throw SolverError("term '" + b.term +
                        "' uses stage variables; ilqr needs a multiple "
                        "shooting transcription");
    }
  }
  return p;
}

IlqrPlan build_plan(const Nlp& nlp) {
  IlqrPlan pl;
  pl.N = nlp.n_nodes;
  pl.nx = nlp.nx;
  pl.nu = nlp.nu;
  pl.mc = nlp.n_constraint_rows;
  pl.costs.resize(pl.N + 1);
  pl.cons.resize(pl.N + 1);
  pl.bounds.resize(pl.N + 1);
  pl.defect.resize(pl.N);
  std::vector<bool> have_defect(pl.N, false);

  pl.x0.resize(pl.nx);
  for (int i = 0; i < pl.nx; ++i) {
    if (nlp.lower[i] != nlp.upper[i])
      throw SolverError(
          "ilqr needs the initial state pinned by equal node-0 bounds");
    pl.x0[i] = nlp.lower[i];
  }

  for (int k = 1; k <= pl.N; ++k)
    for (int i = 0; i < pl.nx; ++i) {
      const int col = k * pl.nx + i;
      if (!std::isfinite(nlp.lower[col]) && !std::isfinite(nlp.upper[col]))
        continue;
      pl.bounds[k].push_back({col, false, i, nlp.lower[col], nlp.upper[col]});
    }
  pl.free_u.resize(pl.N);
  pl.fixed_u.assign(pl.N, VectorXd::Zero(pl.nu));
  pl.is_fixed.assign(pl.N, std::vector<bool>(pl.nu, false));
  const int state_cols = (pl.N + 1) * pl.nx;
  for (int k = 0; k < pl.N; ++k)
    for (int i = 0; i < pl.nu; ++i) {
      const int col = state_cols + k * pl.nu + i;
      if (nlp.lower[col] == nlp.upper[col] && std::isfinite(nlp.lower[col])) {
        pl.is_fixed[k][i] = true;
        pl.fixed_u[k][i] = nlp.lower[col];
        continue;
      }
      pl.free_u[k].push_back(i);
      if (std::isfinite(nlp.lower[col]) || std::isfinite(nlp.upper[col]))
        pl.bounds[k].push_back({col, true, i, nlp.lower[col], nlp.upper[col]});
    }

  for (const auto& b : nlp.costs) pl.costs[b.node].push_back(classify(nlp, b, false));
  for (const auto& b : nlp.constraints) {
    if (b.is_defect) {
      if (b.node < 0 || b.node >= pl.N || have_defect[b.node])
        throw SolverError("malformed dynamics defects");
      if (b.fn.n_residuals() != pl.nx)
        throw SolverError("defect rows do not match the state dimension");
      pl.defect[b.node] = classify(nlp, b, true);
      have_defect[b.node] = true;
    } else {
      pl.cons[b.node].push_back(classify(nlp, b, false));
    }
  }
  for (int k = 0; k < pl.N; ++k)
    if (!have_defect[k])
      throw SolverError("no dynamics defect at node " + std::to_string(k) +
                        "; ilqr needs a multiple shooting transcription");
  return pl;
}

std::vector<VectorXd> piece_inputs(const StagePiece& p, const VectorXd& x,
                                   const VectorXd& u, const VectorXd& xn) {
  const auto& dims = p.b->fn.input_dims();
  std::vector<VectorXd> in(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) {
    switch (p.target[i]) {
      case StagePiece::param: in[i] = p.b->params[i]; break;
      case StagePiece::x_now: in[i] = x.segment(p.within[i], dims[i]); break;
      case StagePiece::u_now: in[i] = u.segment(p.within[i], dims[i]); break;
      case StagePiece::x_next: in[i] = xn.segment(p.within[i], dims[i]); break;
    }
  }
  return in;
}

// Augmented-Lagrangian pieces for one row with bounds [lo, hi]. Equality rows
// keep a free-sign multiplier in `hi`; inequalities clamp one per side.
struct AlRow {
  double value = 0.0;  // penalty value added to the objective
  double grad = 0.0;   // d/dc
  double hess = 0.0;   // d2/dc2 (mu on active rows)
  double viol = 0.0;
};

AlRow al_row(double c, double lo, double hi, double lam_lo, double lam_hi,
             double mu) {
  AlRow r;
  if (lo == hi) {
    const double e = c - lo;
    r.value = lam_hi * e + 0.5 * mu * e * e;
    r.grad = lam_hi + mu * e;
    r.hess = mu;
    r.viol = std::abs(e);
    return r;
  }
  if (std::isfinite(hi)) {
    const double s = std::max(0.0, lam_hi + mu * (c - hi));
    r.value += (s * s - lam_hi * lam_hi) / (2.0 * mu);
    r.grad += s;
    if (s > 0.0) r.hess += mu;
  }
  if (std::isfinite(lo)) {
    const double s = std::max(0.0, lam_lo + mu * (lo - c));
    r.value += (s * s - lam_lo * lam_lo) / (2.0 * mu);
    r.grad -= s;
    if (s > 0.0) r.hess += mu;
  }
  r.viol = range_violation(c, lo, hi);
  return r;
}

// Cost + AL quadratic model of one node, defects excluded.
struct StageQuad {
  VectorXd qx, qu;
  MatrixXd qxx, quu, qux;
  double f_true = 0.0;   // plain objective share
  double f_al = 0.0;     // objective + AL penalties
  double viol = 0.0;     // worst AL row violation
};

class IlqrWork {
 public:
  explicit IlqrWork(IlqrPlan plan)
      : pl_(std::move(plan)), zero_x_(VectorXd::Zero(pl_.nx)) {}

  const IlqrPlan& plan() const { return pl_; }

  // Values only: objective share, AL value and violation of one node.
  void stage_value(int k, const VectorXd& x, const VectorXd& u,
                   const VectorXd& lam_lo, const VectorXd& lam_hi, double mu,
                   double& f_true, double& f_al, double& viol) const {
    for (const auto& p : pl_.costs[k]) {
      const VectorXd r = p.b->fn(piece_inputs(p, x, u, zero_x_));
      const double f =
          p.b->linear_cost ? p.b->weight * r.sum() : 0.5 * p.b->weight * r.squaredNorm();
      f_true += f;
      f_al += f;
    }
    for (const auto& p : pl_.cons[k]) {
      const VectorXd c = p.b->fn(piece_inputs(p, x, u, zero_x_));
      for (int i = 0; i < c.size(); ++i) {
        const int row = p.b->row_offset + i;
        const AlRow a = al_row(c[i], p.b->lower[i], p.b->upper[i], lam_lo[row],
                               lam_hi[row], mu);
        f_al += a.value;
        viol = std::max(viol, a.viol);
      }
    }
    for (const auto& br : pl_.bounds[k]) {
      const double v = br.input ? u[br.within] : x[br.within];
      const int row = pl_.mc + br.col;
      const AlRow a = al_row(v, br.lo, br.hi, lam_lo[row], lam_hi[row], mu);
      f_al += a.value;
      viol = std::max(viol, a.viol);
    }
  }

  StageQuad stage_quad(int k, const VectorXd& x, const VectorXd& u,
                       const VectorXd& lam_lo, const VectorXd& lam_hi,
                       double mu) const {
    StageQuad q;
    q.qx = VectorXd::Zero(pl_.nx);
    q.qu = VectorXd::Zero(pl_.nu);
    q.qxx = MatrixXd::Zero(pl_.nx, pl_.nx);
    q.quu = MatrixXd::Zero(pl_.nu, pl_.nu);
    q.qux = MatrixXd::Zero(pl_.nu, pl_.nx);
    VectorXd r;
    std::vector<MatrixXd> jac;
    for (const auto& p : pl_.costs[k]) {
      p.b->fn.value_and_jacobian(piece_inputs(p, x, u, zero_x_), r, jac);
      const double w = p.b->weight;
      const double f = p.b->linear_cost ? w * r.sum() : 0.5 * w * r.squaredNorm();
      q.f_true += f;
      q.f_al += f;
      if (p.b->linear_cost) {
        add_grad(p, jac, VectorXd::Constant(r.size(), w), q);
      } else {
        add_grad(p, jac, (w * r).eval(), q);
        add_hess(p, jac, VectorXd::Constant(r.size(), w), q);
      }
    }
    for (const auto& p : pl_.cons[k]) {
      p.b->fn.value_and_jacobian(piece_inputs(p, x, u, zero_x_), r, jac);
      VectorXd gc(r.size()), hc(r.size());
      for (int i = 0; i < r.size(); ++i) {
        const int row = p.b->row_offset + i;
        const AlRow a = al_row(r[i], p.b->lower[i], p.b->upper[i], lam_lo[row],
                               lam_hi[row], mu);
        q.f_al += a.value;
        q.viol = std::max(q.viol, a.viol);
        gc[i] = a.grad;
        hc[i] = a.hess;
      }
      add_grad(p, jac, gc, q);
      add_hess(p, jac, hc, q);
    }
    for (const auto& br : pl_.bounds[k]) {
      const double v = br.input ? u[br.within] : x[br.within];
      const int row = pl_.mc + br.col;
      const AlRow a = al_row(v, br.lo, br.hi, lam_lo[row], lam_hi[row], mu);
      q.f_al += a.value;
      q.viol = std::max(q.viol, a.viol);
      if (br.input) {
        q.qu[br.within] += a.grad;
        q.quu(br.within, br.within) += a.hess;
      } else {
        q.qx[br.within] += a.grad;
        q.qxx(br.within, br.within) += a.hess;
      }
    }
    return q;
  }

  // Defect value d = x_next - step(x, u) and its stage Jacobians A, B.
  void defect(int k, const VectorXd& x, const VectorXd& u, const VectorXd& xn,
              VectorXd& d, MatrixXd& A, MatrixXd& B) const {
    const auto& p = pl_.defect[k];
    VectorXd r;
    std::vector<MatrixXd> jac;
    p.b->fn.value_and_jacobian(piece_inputs(p, x, u, xn), r, jac);
    d = r;
    A = MatrixXd::Zero(pl_.nx, pl_.nx);
    B = MatrixXd::Zero(pl_.nx, pl_.nu);
    const auto& dims = p.b->fn.input_dims();
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (jac[i].size() == 0) continue;
      if (p.target[i] == StagePiece::x_now)
        A.middleCols(p.within[i], dims[i]) -= jac[i];
      else if (p.target[i] == StagePiece::u_now)
        B.middleCols(p.within[i], dims[i]) -= jac[i];
    }
  }

  // step(x, u): evaluate the defect with x_next = 0, so step = -value.
  VectorXd step(int k, const VectorXd& x, const VectorXd& u) const {
    const auto& p = pl_.defect[k];
    return -p.b->fn(piece_inputs(p, x, u, zero_x_));
  }

 private:
  void add_grad(const StagePiece& p, const std::vector<MatrixXd>& jac,
                const VectorXd& coef, StageQuad& q) const {
    const auto& dims = p.b->fn.input_dims();
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (p.target[i] == StagePiece::param || jac[i].size() == 0) continue;
      const VectorXd g = jac[i].transpose() * coef;
      if (p.target[i] == StagePiece::x_now)
        q.qx.segment(p.within[i], dims[i]) += g;
      else
        q.qu.segment(p.within[i], dims[i]) += g;
    }
  }

  void add_hess(const StagePiece& p, const std::vector<MatrixXd>& jac,
                const VectorXd& coef, StageQuad& q) const {
    const auto& dims = p.b->fn.input_dims();
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (p.target[i] == StagePiece::param || jac[i].size() == 0) continue;
      for (std::size_t j = 0; j < dims.size(); ++j) {
        if (p.target[j] == StagePiece::param || jac[j].size() == 0) continue;
        const MatrixXd m = jac[i].transpose() * coef.asDiagonal() * jac[j];
        const bool ix = p.target[i] == StagePiece::x_now;
        const bool jx = p.target[j] == StagePiece::x_now;
        if (ix && jx)
          q.qxx.block(p.within[i], p.within[j], dims[i], dims[j]) += m;
        else if (!ix && !jx)
          q.quu.block(p.within[i], p.within[j], dims[i], dims[j]) += m;
        else if (!ix && jx)
          q.qux.block(p.within[i], p.within[j], dims[i], dims[j]) += m;
        // the (x, u) half is covered by its (u, x) mirror
      }
    }
  }

  IlqrPlan pl_;
  VectorXd zero_x_;
};

}  // namespace

SolveResult solve_ilqr(const horizon::HorizonProblem& prb,
                       const SolverOptions& opts, const SolveResult* warm) {
  check_options(opts);
  if (!prb.transcribed)
    throw SolverError("ilqr needs a multiple shooting transcription");
  const Nlp nlp = assemble_nlp(prb);
  IlqrWork work(build_plan(nlp));
  const IlqrPlan& pl = work.plan();
  const int N = pl.N, nx = pl.nx, nu = pl.nu;
  const int n_mult = pl.mc + nlp.n_decision;
  const VectorXd zx = VectorXd::Zero(nx);

  // Trajectory from the guess; pinned initial state, fixed inputs applied.
  MatrixXd X(nx, N + 1), U(nu, std::max(N, 1));
  for (int k = 0; k <= N; ++k) X.col(k) = nlp.guess.segment(k * nx, nx);
  X.col(0) = pl.x0;
  const int state_cols = (N + 1) * nx;
  for (int k = 0; k < N; ++k) {
    U.col(k) = nlp.guess.segment(state_cols + k * nu, nu);
    for (int i = 0; i < nu; ++i)
      if (pl.is_fixed[k][i]) U(i, k) = pl.fixed_u[k][i];
  }

  VectorXd lam_lo = VectorXd::Zero(n_mult), lam_hi = VectorXd::Zero(n_mult);
  double mu = opts.merit_penalty;
  if (warm && warm->al_lower.size() == n_mult && warm->al_upper.size() == n_mult) {
    lam_lo = warm->al_lower;
    lam_hi = warm->al_upper;
    if (warm->al_penalty > 0.0) mu = warm->al_penalty;
  }
  const double pd = opts.merit_penalty;  // defect share of the merit
  double reg = 0.0;
  double outer_viol = kInf;

  SolveResult res;
  std::vector<MatrixXd> A(N), B(N), K(N);
  std::vector<VectorXd> d(N), kff(N);
  std::vector<StageQuad> quad(N + 1);

  auto finish = [&](SolveStatus st, double obj, double viol, double kkt, int it) {
    res.status = st;
    res.z = VectorXd::Zero(nlp.n_decision);
    for (int k = 0; k <= N; ++k) res.z.segment(k * nx, nx) = X.col(k);
    for (int k = 0; k < N; ++k) res.z.segment(state_cols + k * nu, nu) = U.col(k);
    res.trajectories = nlp.unpack(res.z);
    res.objective = obj;
    res.constraint_violation = viol;
    res.kkt_residual = kkt;
    res.iterations = it;
    res.gains = K;
    res.al_lower = lam_lo;
    res.al_upper = lam_hi;
    res.al_penalty = mu;
  };

  for (int it = 1; it <= opts.max_iterations; ++it) {
    // Linearize every stage at the current trajectory.
    double f_true = 0.0, f_al = 0.0, al_viol = 0.0, defect_inf = 0.0, d_l1 = 0.0;
    for (int k = 0; k <= N; ++k) {
      quad[k] = work.stage_quad(k, X.col(k), k < N ? VectorXd(U.col(k)) : zx,
                                lam_lo, lam_hi, mu);
      f_true += quad[k].f_true;
      f_al += quad[k].f_al;
      al_viol = std::max(al_viol, quad[k].viol);
    }
    for (int k = 0; k < N; ++k) {
      work.defect(k, X.col(k), U.col(k), X.col(k + 1), d[k], A[k], B[k]);
      defect_inf = std::max(defect_inf, inf_norm(d[k]));
      d_l1 += d[k].lpNorm<1>();
    }
    const double merit_old = f_al + pd * d_l1;

    // Backward sweep; regularization grows until the control Hessians factor.
    double stationarity = 0.0, d1 = 0.0, d2 = 0.0;
    bool bp_ok = false;
    while (!bp_ok) {
      bp_ok = true;
      stationarity = d1 = d2 = 0.0;
      VectorXd vx = quad[N].qx;
      MatrixXd vxx = quad[N].qxx;
      for (int k = N - 1; k >= 0; --k) {
        const auto& F = pl.free_u[k];
        const int nf = static_cast<int>(F.size());
        // Full steps close the gaps, so the next-node expansion is taken at
        // the contracted state: delta_x' = A dx + B du - d.
        const VectorXd w = vx - vxx * d[k];
        const VectorXd Qx = quad[k].qx + A[k].transpose() * w;
        const MatrixXd Qxx = quad[k].qxx + A[k].transpose() * vxx * A[k];
        if (nf == 0) {
          K[k].resize(0, nx);
          kff[k].resize(0);
          vx = Qx;
          vxx = 0.5 * (Qxx + Qxx.transpose());
          continue;
        }
        MatrixXd Bf(nx, nf);
        for (int j = 0; j < nf; ++j) Bf.col(j) = B[k].col(F[j]);
        VectorXd Qu(nf);
        MatrixXd Quu(nf, nf), Qux(nf, nx);
        const VectorXd btw = Bf.transpose() * w;
        const MatrixXd btv = Bf.transpose() * vxx;
        for (int j = 0; j < nf; ++j) {
          Qu[j] = quad[k].qu[F[j]] + btw[j];
          for (int j2 = 0; j2 < nf; ++j2)
            Quu(j, j2) = quad[k].quu(F[j], F[j2]);
          Qux.row(j) = quad[k].qux.row(F[j]);
        }
        Quu += btv * Bf;
        Qux += btv * A[k];
        for (int j = 0; j < nf; ++j) Quu(j, j) += reg;
        Eigen::LLT<MatrixXd> llt(0.5 * (Quu + Quu.transpose()));
        if (llt.info() != Eigen::Success) {
          reg = reg == 0.0 ? opts.ilqr_reg : reg * opts.reg_growth;
          if (reg > opts.reg_cap) {
            finish(SolveStatus::diverged, f_true,
                   std::max(al_viol, defect_inf), stationarity, it);
            return res;
          }
          bp_ok = false;
          break;
        }
        kff[k] = -llt.solve(Qu);
        K[k] = -llt.solve(Qux);
        stationarity = std::max(stationarity, inf_norm(Qu));
        d1 += kff[k].dot(Qu);
        d2 += kff[k].dot(Quu * kff[k]);
        vx = Qx + K[k].transpose() * (Quu * kff[k] + Qu) + Qux.transpose() * kff[k];
        vxx = Qxx + K[k].transpose() * (Quu * K[k] + Qux) + Qux.transpose() * K[k];
        vxx = 0.5 * (vxx + vxx.transpose()).eval();
      }
    }

    if (stationarity <= opts.tolerance && defect_inf <= opts.tolerance) {
      if (al_viol <= opts.tolerance) {
        finish(SolveStatus::converged, f_true, std::max(al_viol, defect_inf),
               stationarity, it);
        return res;
      }
      // Outer step: refresh the multipliers from the current row values.
      for (int k = 0; k <= N; ++k) {
        const VectorXd uk = k < N ? VectorXd(U.col(k)) : zx;
        for (const auto& p : pl.cons[k]) {
          const VectorXd c = p.b->fn(piece_inputs(p, X.col(k), uk, zx));
          for (int i = 0; i < c.size(); ++i) {
            const int row = p.b->row_offset + i;
            const double lo = p.b->lower[i], hi = p.b->upper[i];
            if (lo == hi) {
              lam_hi[row] += mu * (c[i] - lo);
            } else {
              if (std::isfinite(hi))
                lam_hi[row] = std::max(0.0, lam_hi[row] + mu * (c[i] - hi));
              if (std::isfinite(lo))
                lam_lo[row] = std::max(0.0, lam_lo[row] + mu * (lo - c[i]));
            }
          }
        }
        for (const auto& br : pl.bounds[k]) {
          const double v = br.input ? U(br.within, k) : X(br.within, k);
          const int row = pl.mc + br.col;
          if (br.lo == br.hi) {
            lam_hi[row] += mu * (v - br.lo);
          } else {
            if (std::isfinite(br.hi))
              lam_hi[row] = std::max(0.0, lam_hi[row] + mu * (v - br.hi));
            if (std::isfinite(br.lo))
              lam_lo[row] = std::max(0.0, lam_lo[row] + mu * (br.lo - v));
          }
        }
      }
      if (mu >= opts.penalty_cap && al_viol >= outer_viol) {
        finish(SolveStatus::diverged, f_true, std::max(al_viol, defect_inf),
               stationarity, it);
        return res;
      }
      outer_viol = al_viol;
      mu = std::min(mu * opts.penalty_growth, opts.penalty_cap);
      res.log.push_back({it, f_true, std::max(al_viol, defect_inf), stationarity,
                         0.0, mu, merit_old});
      continue;
    }

    // Forward rollouts: free inputs track the feedback law, shooting gaps
    // contract by exactly (1 - alpha).
    double alpha = 1.0;
    bool stepped = false;
    MatrixXd Xc(nx, N + 1), Uc(nu, std::max(N, 1));
    const double slack = 1e-14 * (1.0 + std::abs(merit_old));
    while (alpha >= opts.min_step) {
      Xc.col(0) = pl.x0;
      for (int k = 0; k < N; ++k) {
        const auto& F = pl.free_u[k];
        const VectorXd dx = Xc.col(k) - X.col(k);
        Uc.col(k) = U.col(k);
        if (!F.empty()) {
          const VectorXd du = alpha * kff[k] + K[k] * dx;
          for (std::size_t j = 0; j < F.size(); ++j) Uc(F[j], k) += du[j];
        }
        for (int i = 0; i < nu; ++i)
          if (pl.is_fixed[k][i]) Uc(i, k) = pl.fixed_u[k][i];
        Xc.col(k + 1) = work.step(k, Xc.col(k), Uc.col(k)) + (1.0 - alpha) * d[k];
      }
      double f_true_c = 0.0, f_al_c = 0.0, viol_c = 0.0;
      bool finite = Xc.allFinite() && Uc.allFinite();
      if (finite)
        for (int k = 0; k <= N; ++k)
          work.stage_value(k, Xc.col(k), k < N ? VectorXd(Uc.col(k)) : zx,
                           lam_lo, lam_hi, mu, f_true_c, f_al_c, viol_c);
      const double merit_new = f_al_c + pd * (1.0 - alpha) * d_l1;
      const double model =
          alpha * d1 + 0.5 * alpha * alpha * d2 - pd * alpha * d_l1;
      if (finite && merit_new <= merit_old + opts.armijo * model + slack) {
        X = Xc;
        U = Uc;
        res.log.push_back({it, f_true_c, std::max(viol_c, (1.0 - alpha) * d_l1),
                           stationarity, alpha, mu, merit_new});
        stepped = true;
        break;
      }
      alpha *= opts.line_search_factor;
    }
    if (stepped) {
      reg = reg > opts.ilqr_reg ? reg / opts.reg_growth : 0.0;
      continue;
    }
    // No acceptable step at this regularization; stiffen and retry.
    if (reg < opts.reg_cap) {
      reg = reg == 0.0 ? opts.ilqr_reg : reg * opts.reg_growth;
      res.log.push_back({it, f_true, std::max(al_viol, defect_inf), stationarity,
                         0.0, mu, merit_old});
      continue;
    }
    finish(SolveStatus::line_search_failure, f_true,
           std::max(al_viol, defect_inf), stationarity, it);
    return res;
  }

  // Budget exhausted: report the state of the last trajectory.
  double f_true = 0.0, f_al = 0.0, al_viol = 0.0, defect_inf = 0.0;
  for (int k = 0; k <= N; ++k)
    work.stage_value(k, X.col(k), k < N ? VectorXd(U.col(k)) : zx, lam_lo,
                     lam_hi, mu, f_true, f_al, al_viol);
  for (int k = 0; k < N; ++k) {
    VectorXd dk;
    MatrixXd Ak, Bk;
    work.defect(k, X.col(k), U.col(k), X.col(k + 1), dk, Ak, Bk);
    defect_inf = std::max(defect_inf, inf_norm(dk));
  }
  finish(SolveStatus::max_iter, f_true, std::max(al_viol, defect_inf),
         res.log.empty() ? kInf : res.log.back().kkt, opts.max_iterations);
  return res;
}

// ---------------------------------------------------------------------------
// External adapter and warm starting

NlpCallbacks external_solver_adapter(const Nlp& nlp) {
  NlpCallbacks cb;
  cb.n_decision = nlp.n_decision;
  cb.n_constraints = nlp.n_constraint_rows;
  cb.lower = nlp.lower;
  cb.upper = nlp.upper;
  cb.guess = nlp.guess;
  VectorXd rl, ru;
  row_bounds(nlp, rl, ru);
  cb.row_lower = rl;
  cb.row_upper = ru;

  // Structural nonzeros in fixed order: blocks in stack order, then each
  // block's dense used-input pattern.
  struct Entry {
    int block, fnrow, fnblk, fnidx;
  };
  auto entries = std::make_shared<std::vector<Entry>>();
  for (std::size_t bi = 0; bi < nlp.constraints.size(); ++bi) {
    const auto& b = nlp.constraints[bi];
    for (const auto& t : b.fn.jacobian_sparsity()) {
      if (b.col_offsets[t[1]] < 0) continue;
      entries->push_back({static_cast<int>(bi), t[0], t[1], t[2]});
      cb.jacobian_rows.push_back(b.row_offset + t[0]);
      cb.jacobian_cols.push_back(b.col_offsets[t[1]] + t[2]);
    }
  }

  auto shared = std::make_shared<Nlp>(nlp);
  cb.objective = [shared](const VectorXd& z) { return shared->eval_objective(z); };
  cb.constraints = [shared](const VectorXd& z) {
    return shared->eval_constraints(z);
  };
  cb.gradient = [shared](const VectorXd& z) {
    VectorXd g = VectorXd::Zero(shared->n_decision);
    VectorXd r;
    std::vector<MatrixXd> jac;
    for (const auto& b : shared->costs) {
      b.fn.value_and_jacobian(shared->gather(b, z), r, jac);
      const auto& dims = b.fn.input_dims();
      for (std::size_t i = 0; i < dims.size(); ++i) {
        if (b.col_offsets[i] < 0 || jac[i].size() == 0) continue;
        if (b.linear_cost)
          g.segment(b.col_offsets[i], dims[i]) +=
              b.weight * jac[i].colwise().sum().transpose();
        else
          g.segment(b.col_offsets[i], dims[i]) += b.weight * jac[i].transpose() * r;
      }
    }
    return g;
  };
  cb.jacobian_values = [shared, entries](const VectorXd& z) {
    VectorXd vals(entries->size());
    VectorXd r;
    std::vector<MatrixXd> jac;
    int at = 0;
    int last_block = -1;
    for (const auto& e : *entries) {
      if (e.block != last_block) {
        shared->constraints[e.block].fn.value_and_jacobian(
            shared->gather(shared->constraints[e.block], z), r, jac);
        last_block = e.block;
      }
      vals[at++] = jac[e.fnblk](e.fnrow, e.fnidx);
    }
    return vals;
  };
  return cb;
}

void warm_start(horizon::HorizonProblem& prb, const SolveResult& previous,
                int shift) {
  if (shift < 0 || shift > prb.n_nodes)
    throw SolverError("shift " + std::to_string(shift) +
                      " outside [0, " + std::to_string(prb.n_nodes) + "]");
  for (auto& v : prb.variables) {
    if (v.kind == horizon::VariableKind::parameter) continue;
    auto it = previous.trajectories.find(v.name);
    if (it == previous.trajectories.end())
      throw SolverError("previous solution has no variable '" + v.name + "'");
    if (it->second.rows() != v.dim || it->second.cols() != v.instances)
      throw SolverError("previous solution shape mismatch for '" + v.name + "'");
    Eigen::MatrixXd g(v.dim, v.instances);
    for (int k = 0; k < v.instances; ++k)
      g.col(k) = it->second.col(std::min(k + shift, v.instances - 1));
    v.guess = std::move(g);
    v.guess_set = true;
  }
}

void shift_multipliers(const Nlp& nlp, SolveResult& previous, int shift) {
  const int n_mult = nlp.n_constraint_rows + nlp.n_decision;
  if (shift < 0 || shift > nlp.n_nodes)
    throw SolverError("shift " + std::to_string(shift) +
                      " outside [0, " + std::to_string(nlp.n_nodes) + "]");
  if (previous.al_lower.size() != n_mult || previous.al_upper.size() != n_mult)
    throw SolverError("previous solution carries no multipliers to shift");
  if (shift == 0) return;

  // Constraint rows move by term: the instance at node k takes the values
  // from node k+shift, clamped to the last node the term exists at.
  std::map<std::pair<std::string, int>, int> offset_of;
  std::map<std::string, int> last_node;
  for (const auto& b : nlp.constraints) {
    offset_of[{b.term, b.node}] = b.row_offset;
    auto it = last_node.find(b.term);
    if (it == last_node.end() || it->second < b.node) last_node[b.term] = b.node;
  }
  VectorXd lo = previous.al_lower, hi = previous.al_upper;
  for (const auto& b : nlp.constraints) {
    int src_node = std::min(b.node + shift, last_node[b.term]);
    auto it = offset_of.find({b.term, src_node});
    if (it == offset_of.end()) it = offset_of.find({b.term, last_node[b.term]});
    const int rows = b.fn.n_residuals();
    lo.segment(b.row_offset, rows) =
        previous.al_lower.segment(it->second, rows);
    hi.segment(b.row_offset, rows) =
        previous.al_upper.segment(it->second, rows);
  }
  const int mc = nlp.n_constraint_rows;
  for (const auto& v : nlp.layout) {
    for (int k = 0; k < v.instances; ++k) {
      const int src = std::min(k + shift, v.instances - 1);
      lo.segment(mc + nlp.offset(v.name, k), v.dim) =
          previous.al_lower.segment(mc + nlp.offset(v.name, src), v.dim);
      hi.segment(mc + nlp.offset(v.name, k), v.dim) =
          previous.al_upper.segment(mc + nlp.offset(v.name, src), v.dim);
    }
  }
  previous.al_lower = std::move(lo);
  previous.al_upper = std::move(hi);
}

}  // namespace skyline::solver
