#include "skyline/qp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/SparseCholesky>

namespace skyline::qp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

using SpMat = Eigen::SparseMatrix<double>;
using Eigen::VectorXd;

double inf_norm(const VectorXd& v) {
  return v.size() ? v.cwiseAbs().maxCoeff() : 0.0;
}

// Infinity norms of the columns of [P; A] and rows of A, used by the Ruiz
// loop on the symmetric KKT form.
VectorXd col_norms(const SpMat& P, const SpMat& A) {
  VectorXd n = VectorXd::Zero(P.cols());
  for (int c = 0; c < P.outerSize(); ++c)
    for (SpMat::InnerIterator it(P, c); it; ++it) {
      // P stored as upper triangle: count the mirrored entry too.
      n[it.col()] = std::max(n[it.col()], std::abs(it.value()));
      n[it.row()] = std::max(n[it.row()], std::abs(it.value()));
    }
  for (int c = 0; c < A.outerSize(); ++c)
    for (SpMat::InnerIterator it(A, c); it; ++it)
      n[it.col()] = std::max(n[it.col()], std::abs(it.value()));
  return n;
}

VectorXd row_norms(const SpMat& A) {
  VectorXd n = VectorXd::Zero(A.rows());
  for (int c = 0; c < A.outerSize(); ++c)
    for (SpMat::InnerIterator it(A, c); it; ++it)
      n[it.row()] = std::max(n[it.row()], std::abs(it.value()));
  return n;
}

void scale_rows_cols(SpMat& M, const VectorXd& r, const VectorXd& c) {
  for (int k = 0; k < M.outerSize(); ++k)
    for (SpMat::InnerIterator it(M, k); it; ++it)
      it.valueRef() *= r[it.row()] * c[it.col()];
}

struct Scaled {
  SpMat P, A;
  VectorXd q, l, u;
  VectorXd D, E;  // x and row scalings
  double c = 1.0; // cost scaling
};

Scaled equilibrate(const SpMat& P, const VectorXd& q, const SpMat& A,
                   const VectorXd& l, const VectorXd& u, int iterations) {
  Scaled s;
  s.P = P;
  s.A = A;
  s.q = q;
  s.l = l;
  s.u = u;
  s.D = VectorXd::Ones(P.cols());
  s.E = VectorXd::Ones(A.rows());
  for (int it = 0; it < iterations; ++it) {
    VectorXd dc = col_norms(s.P, s.A);
    VectorXd dr = row_norms(s.A);
    for (int i = 0; i < dc.size(); ++i)
      dc[i] = dc[i] > 1e-12 ? 1.0 / std::sqrt(dc[i]) : 1.0;
    for (int i = 0; i < dr.size(); ++i)
      dr[i] = dr[i] > 1e-12 ? 1.0 / std::sqrt(dr[i]) : 1.0;
    scale_rows_cols(s.P, dc, dc);
    scale_rows_cols(s.A, dr, dc);
    s.q.array() *= dc.array();
    s.l.array() *= dr.array();
    s.u.array() *= dr.array();
    s.D.array() *= dc.array();
    s.E.array() *= dr.array();

    // Cost normalization.
    VectorXd pc = VectorXd::Zero(s.P.cols());
    for (int c2 = 0; c2 < s.P.outerSize(); ++c2)
      for (SpMat::InnerIterator e(s.P, c2); e; ++e) {
        pc[e.col()] = std::max(pc[e.col()], std::abs(e.value()));
        pc[e.row()] = std::max(pc[e.row()], std::abs(e.value()));
      }
    const double mean_p = pc.size() ? pc.mean() : 0.0;
    double g = std::max(mean_p, inf_norm(s.q));
    g = g > 1e-12 ? 1.0 / g : 1.0;
    if (g < 1.0) {
      s.P *= g;
      s.q *= g;
      s.c *= g;
    }
  }
  return s;
}

struct Kkt {
  Eigen::SimplicialLDLT<SpMat, Eigen::Upper> ldlt;
  bool analyzed = false;

  // KKT = [[P + sigma I, A^T], [A, -diag(1/rho)]] (upper part stored).
  void factor(const SpMat& P, const SpMat& A, double sigma, const VectorXd& rho) {
    const int n = static_cast<int>(P.cols());
    const int m = static_cast<int>(A.rows());
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(P.nonZeros() + A.nonZeros() + n + m);
    for (int c = 0; c < P.outerSize(); ++c)
      for (SpMat::InnerIterator it(P, c); it; ++it)
        if (it.row() <= it.col()) trips.emplace_back(it.row(), it.col(), it.value());
    for (int i = 0; i < n; ++i) trips.emplace_back(i, i, sigma);
    for (int c = 0; c < A.outerSize(); ++c)
      for (SpMat::InnerIterator it(A, c); it; ++it)
        trips.emplace_back(it.col(), n + it.row(), it.value());
    for (int i = 0; i < m; ++i) trips.emplace_back(n + i, n + i, -1.0 / rho[i]);
    SpMat K(n + m, n + m);
    K.setFromTriplets(trips.begin(), trips.end());
    if (!analyzed) {
      ldlt.analyzePattern(K);
      analyzed = true;
    }
    ldlt.factorize(K);
    if (ldlt.info() != Eigen::Success)
      throw QpError("KKT factorization failed");
  }
};

struct Residuals {
  double prim = 0, dual = 0;
  double prim_rel = 0, dual_rel = 0;  // scale denominators
};

}  // namespace

const char* status_name(QpStatus s) {
  switch (s) {
    case QpStatus::solved: return "solved";
    case QpStatus::max_iterations: return "max_iterations";
    case QpStatus::primal_infeasible: return "primal_infeasible";
    case QpStatus::dual_infeasible: return "dual_infeasible";
    case QpStatus::numeric_failure: return "numeric_failure";
  }
  return "?";
}

QpResult solve_qp(const SpMat& P, const VectorXd& q, const SpMat& A,
                  const VectorXd& l, const VectorXd& u, const QpOptions& opts,
                  const VectorXd* x_warm, const VectorXd* y_warm) {
  const int n = static_cast<int>(P.cols());
  const int m = static_cast<int>(A.rows());
  if (P.rows() != n || q.size() != n || A.cols() != n || l.size() != m ||
      u.size() != m)
    throw QpError("inconsistent QP dimensions");
  for (int i = 0; i < m; ++i)
    if (l[i] > u[i]) throw QpError("row " + std::to_string(i) + " has l > u");

  Scaled s = equilibrate(P, q, A, l, u, opts.scaling_iterations);

  VectorXd rho(m);
  for (int i = 0; i < m; ++i) {
    const bool eq = std::isfinite(s.l[i]) && std::isfinite(s.u[i]) &&
                    s.u[i] - s.l[i] < 1e-12;
    rho[i] = eq ? opts.rho0 * opts.eq_scale : opts.rho0;
  }
  double rho_factor = 1.0;

  Kkt kkt;
  kkt.factor(s.P, s.A, opts.sigma, rho);

  VectorXd x = VectorXd::Zero(n);
  VectorXd y = VectorXd::Zero(m);
  if (x_warm && x_warm->size() == n) x = s.D.cwiseInverse().cwiseProduct(*x_warm);
  if (y_warm && y_warm->size() == m)
    y = s.c * s.E.cwiseInverse().cwiseProduct(*y_warm);
  VectorXd z = s.A * x;
  z = z.cwiseMax(s.l).cwiseMin(s.u);

  QpResult res;
  res.x = VectorXd::Zero(n);
  res.y = VectorXd::Zero(m);

  VectorXd rhs(n + m), sol(n + m);
  VectorXd x_prev, y_prev;

  auto unscaled_residuals = [&](const VectorXd& xs, const VectorXd& ys,
                                const VectorXd& zs) {
    const VectorXd xu = s.D.cwiseProduct(xs);
    const VectorXd yu = s.E.cwiseProduct(ys) / s.c;
    const VectorXd zu = s.E.cwiseInverse().cwiseProduct(zs);
    const VectorXd Ax = A * xu;
    const VectorXd Px = P.selfadjointView<Eigen::Upper>() * xu;
    const VectorXd Aty = A.transpose() * yu;
    Residuals r;
    r.prim = inf_norm(Ax - zu);
    r.dual = inf_norm(Px + q + Aty);
    r.prim_rel = std::max(inf_norm(Ax), inf_norm(zu));
    r.dual_rel = std::max({inf_norm(Px), inf_norm(Aty), inf_norm(q)});
    return r;
  };

  auto finish = [&](QpStatus st, int iter, const Residuals& r) {
    res.status = st;
    res.iterations = iter;
    res.x = s.D.cwiseProduct(x);
    res.y = s.E.cwiseProduct(y) / s.c;
    res.primal_residual = r.prim;
    res.dual_residual = r.dual;
  };

  double pscale = 1.0;
  for (int k = 0; k < s.P.outerSize(); ++k)
    for (SpMat::InnerIterator it(s.P, k); it; ++it)
      pscale = std::max(pscale, std::abs(it.value()));
  const double qscale = std::max(1.0, inf_norm(s.q));
  int pinf_streak = 0, dinf_streak = 0;

  Residuals r_now;
  int iter = 0;
  for (iter = 1; iter <= opts.max_iterations; ++iter) {
    x_prev = x;
    y_prev = y;

    rhs.head(n) = opts.sigma * x - s.q;
    rhs.tail(m) = z - y.cwiseQuotient(rho);
    sol = kkt.ldlt.solve(rhs);
    const VectorXd x_tilde = sol.head(n);
    const VectorXd nu = sol.tail(m);
    const VectorXd z_tilde = z + (nu - y).cwiseQuotient(rho);

    x = opts.alpha * x_tilde + (1.0 - opts.alpha) * x;
    const VectorXd v = opts.alpha * z_tilde + (1.0 - opts.alpha) * z;
    z = (v + y.cwiseQuotient(rho)).cwiseMax(s.l).cwiseMin(s.u);
    y = y + rho.cwiseProduct(v - z);

    if (!x.allFinite() || !y.allFinite()) {
      finish(QpStatus::numeric_failure, iter, r_now);
      return res;
    }

    if (iter % opts.check_interval != 0 && iter != opts.max_iterations) continue;

    r_now = unscaled_residuals(x, y, z);
    const double eps_p = opts.eps_abs + opts.eps_rel * r_now.prim_rel;
    const double eps_d = opts.eps_abs + opts.eps_rel * r_now.dual_rel;
    if (r_now.prim <= eps_p && r_now.dual <= eps_d) {
      finish(QpStatus::solved, iter, r_now);
      break;
    }

    // Infeasibility certificates from the one-step differences, tested in
    // the equilibrated space where entries are O(1). The null-space test is
    // four orders tighter than the support test so that a feasible point of
    // L1 size up to ~1e4 cannot fake a certificate, and the certificate must
    // hold on two consecutive checks before it is trusted.
    const VectorXd dy = y - y_prev;
    const double dy_norm = inf_norm(dy);
    bool pinf = false;
    if (dy_norm > 1e-14) {
      const VectorXd dyn = dy / dy_norm;
      double support = 0.0;
      double bscale = 1.0;
      bool ok = inf_norm(s.A.transpose() * dyn) <= 1e-10;
      for (int i = 0; ok && i < m; ++i) {
        const double d = dyn[i];
        if (d > 1e-12) {
          if (!std::isfinite(s.u[i])) ok = false;
          else {
            support += s.u[i] * d;
            bscale = std::max(bscale, std::abs(s.u[i]));
          }
        } else if (d < -1e-12) {
          if (!std::isfinite(s.l[i])) ok = false;
          else {
            support += s.l[i] * d;
            bscale = std::max(bscale, std::abs(s.l[i]));
          }
        }
      }
      pinf = ok && support <= -1e-6 * bscale;
    }
    pinf_streak = pinf ? pinf_streak + 1 : 0;
    if (pinf_streak >= 2) {
      finish(QpStatus::primal_infeasible, iter, r_now);
      return res;
    }

    const VectorXd dx = x - x_prev;
    const double dx_norm = inf_norm(dx);
    bool dinf = false;
    if (dx_norm > 1e-14) {
      const VectorXd dxn = dx / dx_norm;
      bool ok =
          inf_norm(s.P.selfadjointView<Eigen::Upper>() * dxn) <= 1e-10 * pscale &&
          s.q.dot(dxn) <= -1e-6 * qscale;
      if (ok) {
        const VectorXd Adx = s.A * dxn;
        for (int i = 0; ok && i < m; ++i) {
          if (std::isfinite(s.l[i]) && Adx[i] < -1e-10) ok = false;
          if (std::isfinite(s.u[i]) && Adx[i] > 1e-10) ok = false;
        }
      }
      dinf = ok;
    }
    dinf_streak = dinf ? dinf_streak + 1 : 0;
    if (dinf_streak >= 2) {
      finish(QpStatus::dual_infeasible, iter, r_now);
      return res;
    }

    if (opts.adaptive_rho && r_now.prim_rel > 1e-12 && r_now.dual_rel > 1e-12) {
      const double pr = r_now.prim / std::max(r_now.prim_rel, 1e-12);
      const double dr = r_now.dual / std::max(r_now.dual_rel, 1e-12);
      if (pr > 1e-16 && dr > 1e-16) {
        const double ratio = std::sqrt(pr / dr);
        const double nf = std::clamp(rho_factor * ratio, 1e-6, 1e6);
        if (nf / rho_factor > 5.0 || rho_factor / nf > 5.0) {
          rho *= nf / rho_factor;
          rho_factor = nf;
          kkt.factor(s.P, s.A, opts.sigma, rho);
        }
      }
    }
  }
  if (res.status != QpStatus::solved) {
    r_now = unscaled_residuals(x, y, z);
    finish(QpStatus::max_iterations, std::min(iter, opts.max_iterations), r_now);
  }

  // Active-set polish: re-solve the equality-constrained problem on the
  // detected active rows and keep it when it tightens both residuals.
  if (opts.polish &&
      (res.status == QpStatus::solved || res.status == QpStatus::max_iterations)) {
    std::vector<int> act;
    std::vector<double> bact;
    for (int i = 0; i < m; ++i) {
      const bool eq = std::isfinite(l[i]) && std::isfinite(u[i]) &&
                      u[i] - l[i] < 1e-12;
      if (eq) {
        act.push_back(i);
        bact.push_back(0.5 * (l[i] + u[i]));
      } else if (res.y[i] < -1e-10 && std::isfinite(l[i])) {
        act.push_back(i);
        bact.push_back(l[i]);
      } else if (res.y[i] > 1e-10 && std::isfinite(u[i])) {
        act.push_back(i);
        bact.push_back(u[i]);
      }
    }
    const int ma = static_cast<int>(act.size());
    const double delta = 1e-9;
    std::vector<Eigen::Triplet<double>> trips;
    for (int c = 0; c < P.outerSize(); ++c)
      for (SpMat::InnerIterator it(P, c); it; ++it)
        if (it.row() <= it.col()) trips.emplace_back(it.row(), it.col(), it.value());
    for (int i = 0; i < n; ++i) trips.emplace_back(i, i, delta);
    SpMat At = A.transpose();
    for (int k = 0; k < ma; ++k) {
      for (SpMat::InnerIterator it(At, act[k]); it; ++it)
        trips.emplace_back(it.row(), n + k, it.value());
      trips.emplace_back(n + k, n + k, -delta);
    }
    SpMat K(n + ma, n + ma);
    K.setFromTriplets(trips.begin(), trips.end());
    Eigen::SimplicialLDLT<SpMat, Eigen::Upper> pol(K);
    if (pol.info() == Eigen::Success) {
      VectorXd b(n + ma);
      b.head(n) = -q;
      for (int k = 0; k < ma; ++k) b[n + k] = bact[k];
      VectorXd t = pol.solve(b);
      // Refine against the unregularized KKT operator.
      auto apply = [&](const VectorXd& w) {
        VectorXd out(n + ma);
        VectorXd yact = VectorXd::Zero(m);
        for (int k = 0; k < ma; ++k) yact[act[k]] = w[n + k];
        out.head(n) = P.selfadjointView<Eigen::Upper>() * w.head(n) +
                      A.transpose() * yact;
        const VectorXd Ax = A * w.head(n);
        for (int k = 0; k < ma; ++k) out[n + k] = Ax[act[k]];
        return out;
      };
      for (int r = 0; r < 3; ++r) t += pol.solve(b - apply(t));

      VectorXd xp = t.head(n);
      VectorXd yp = VectorXd::Zero(m);
      for (int k = 0; k < ma; ++k) yp[act[k]] = t[n + k];
      const VectorXd Axp = A * xp;
      bool in_bounds = true;
      for (int i = 0; i < m; ++i)
        if (Axp[i] < l[i] - 1e-9 || Axp[i] > u[i] + 1e-9) in_bounds = false;
      const double pp =
          inf_norm((Axp - Axp.cwiseMax(l).cwiseMin(u)));
      const double dp = inf_norm(P.selfadjointView<Eigen::Upper>() * xp + q +
                                 A.transpose() * yp);
      if (in_bounds && xp.allFinite() && yp.allFinite() &&
          pp <= std::max(res.primal_residual, 1e-12) &&
          dp <= std::max(res.dual_residual, 1e-12)) {
        res.x = xp;
        res.y = yp;
        res.primal_residual = pp;
        res.dual_residual = dp;
        res.polished = true;
        if (res.status == QpStatus::max_iterations &&
            pp <= opts.eps_abs && dp <= opts.eps_abs)
          res.status = QpStatus::solved;
      }
    }
  }
  return res;
}

}  // namespace skyline::qp
