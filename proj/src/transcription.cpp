#include "skyline/transcription.hpp"

#include <array>
#include <cmath>

#include "skyline/smallmath.hpp"

namespace skyline::transcription {

using ad::Value;
using horizon::Binding;
using horizon::HorizonProblem;
using horizon::NodeSet;
using horizon::VariableKind;

IntegratorKind integrator_from_string(const std::string& name) {
  if (name == "euler") return IntegratorKind::euler;
  if (name == "rk4") return IntegratorKind::rk4;
  if (name == "leapfrog") return IntegratorKind::leapfrog;
  throw TranscriptionError("unknown integrator '" + name + "'");
}

const char* integrator_name(IntegratorKind kind) {
  switch (kind) {
    case IntegratorKind::euler: return "euler";
    case IntegratorKind::rk4: return "rk4";
    case IntegratorKind::leapfrog: return "leapfrog";
  }
  return "?";
}

std::vector<double> radau_points(int degree) {
  switch (degree) {
    case 1:
      return {1.0};
    case 2:
      return {0.333333333333333333, 1.0};
    case 3:
      return {0.155051025721682190, 0.644948974278317810, 1.0};
    case 4:
      return {0.088587959512703947, 0.409466864440734711, 0.787659461760847056,
              1.0};
    case 5:
      return {0.057104196114517682, 0.276843013638123828, 0.583590432368916820,
              0.860240135656219448, 1.0};
    default:
      throw TranscriptionError("collocation degree must be in [1, 5], got " +
                               std::to_string(degree));
  }
}

namespace {

std::vector<Value> axpy(const std::vector<Value>& x, double a,
                        const std::vector<Value>& d) {
  std::vector<Value> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + a * d[i];
  return out;
}

std::vector<Value> leapfrog_step(const ad::DiffFunction& f,
                                 const std::vector<Value>& x,
                                 const std::vector<Value>& u, double dt, int vo,
                                 int qo) {
  const int nx = static_cast<int>(x.size());
  if (vo < 0 || vo > nx)
    throw TranscriptionError(
        "leapfrog needs a configuration/velocity state partition");
  const int nv = nx - vo;
  if (qo >= 0 && (qo + 4 > vo || nv < 6))
    throw TranscriptionError(
        "quaternion state needs 4 configuration rows and an angular velocity "
        "at velocity rows 3..5");

  auto call = [&](const std::vector<Value>& xs) { return f.call({xs, u}); };

  // Half kick.
  const std::vector<Value> k1 = call(x);
  std::vector<Value> xmid = x;
  for (int i = vo; i < nx; ++i) xmid[i] = x[i] + 0.5 * dt * k1[i];

  // Drift with the half-step velocity; the quaternion block uses the exact
  // exponential map of the body-frame rotation increment.
  const std::vector<Value> k2 = call(xmid);
  std::vector<Value> xnew = xmid;
  for (int i = 0; i < vo; ++i) xnew[i] = x[i] + dt * k2[i];
  if (qo >= 0) {
    const km::Vec3<Value> phi{dt * xmid[vo + 3], dt * xmid[vo + 4],
                              dt * xmid[vo + 5]};
    const Value a = km::dot(phi, phi);
    const Value s = sinc_sqrt_half(a);
    const std::array<Value, 4> dq{0.5 * phi.x * s, 0.5 * phi.y * s,
                                  0.5 * phi.z * s, cos_sqrt_half(a)};
    const std::array<Value, 4> rho{x[qo], x[qo + 1], x[qo + 2], x[qo + 3]};
    const std::array<Value, 4> rn = km::quat_mul(rho, dq);
    for (int i = 0; i < 4; ++i) xnew[qo + i] = rn[i];
  }

  // Second half kick at the new configuration.
  const std::vector<Value> k3 = call(xnew);
  for (int i = vo; i < nx; ++i) xnew[i] = xmid[i] + 0.5 * dt * k3[i];
  return xnew;
}

}  // namespace

std::vector<Value> integrate(const ad::DiffFunction& f,
                             const std::vector<Value>& x,
                             const std::vector<Value>& u, double dt,
                             IntegratorKind kind, int velocity_offset,
                             int quaternion_offset) {
  const auto& dims = f.input_dims();
  if (dims.size() != 2 || static_cast<int>(x.size()) != dims[0] ||
      static_cast<int>(u.size()) != dims[1] || f.n_residuals() != dims[0])
    throw TranscriptionError("integrate: dynamics expects blocks (" +
                             std::to_string(dims.size() > 0 ? dims[0] : -1) +
                             ", " + std::to_string(dims.size() > 1 ? dims[1] : -1) +
                             "), got (" + std::to_string(x.size()) + ", " +
                             std::to_string(u.size()) + ")");
  auto call = [&](const std::vector<Value>& xs) { return f.call({xs, u}); };
  switch (kind) {
    case IntegratorKind::euler:
      return axpy(x, dt, call(x));
    case IntegratorKind::rk4: {
      const std::vector<Value> k1 = call(x);
      const std::vector<Value> k2 = call(axpy(x, 0.5 * dt, k1));
      const std::vector<Value> k3 = call(axpy(x, 0.5 * dt, k2));
      const std::vector<Value> k4 = call(axpy(x, dt, k3));
      std::vector<Value> out(x.size());
      for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
      return out;
    }
    case IntegratorKind::leapfrog:
      return leapfrog_step(f, x, u, dt, velocity_offset, quaternion_offset);
  }
  throw TranscriptionError("unknown integrator kind");
}

Eigen::VectorXd integrate(const ad::DiffFunction& f, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& u, double dt,
                          IntegratorKind kind, int velocity_offset,
                          int quaternion_offset) {
  std::vector<Value> xs(x.size()), us(u.size());
  for (int i = 0; i < x.size(); ++i) xs[i] = Value(x[i]);
  for (int i = 0; i < u.size(); ++i) us[i] = Value(u[i]);
  const std::vector<Value> out =
      integrate(f, xs, us, dt, kind, velocity_offset, quaternion_offset);
  Eigen::VectorXd xn(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].attached())
      throw TranscriptionError("numeric integrate produced a traced value");
    xn[static_cast<int>(i)] = out[i].literal();
  }
  return xn;
}

namespace {

struct VarGroup {
  std::vector<std::string> names;
  std::vector<int> dims;
  int total = 0;
};

VarGroup group(const HorizonProblem& prb, VariableKind kind) {
  VarGroup g;
  for (const auto& v : prb.variables) {
    if (v.kind != kind) continue;
    g.names.push_back(v.name);
    g.dims.push_back(v.dim);
    g.total += v.dim;
  }
  return g;
}

std::vector<Value> concat(const std::vector<std::vector<Value>>& in, int first,
                          int count) {
  std::vector<Value> out;
  for (int b = first; b < first + count; ++b)
    out.insert(out.end(), in[b].begin(), in[b].end());
  return out;
}

void check_ready(const HorizonProblem& prb) {
  if (prb.transcribed)
    throw TranscriptionError("transcription already applied");
  if (!prb.dynamics.valid() || !(prb.dt > 0.0))
    throw TranscriptionError("set dynamics and dt before transcription");
  const auto& dims = prb.dynamics.input_dims();
  if (dims[0] != prb.nx() || dims[1] != prb.nu())
    throw TranscriptionError("dynamics blocks (" + std::to_string(dims[0]) +
                             ", " + std::to_string(dims[1]) +
                             ") do not match nx=" + std::to_string(prb.nx()) +
                             ", nu=" + std::to_string(prb.nu()));
}

void add_quaternion_norm(HorizonProblem& prb, const VarGroup& sv) {
  const int qo = prb.quaternion_offset;
  auto fn = ad::trace("quat_norm", sv.dims, [&](const auto& in) {
    const std::vector<Value> x = concat(in, 0, static_cast<int>(in.size()));
    Value n = x[qo] * x[qo];
    for (int i = 1; i < 4; ++i) n = n + x[qo + i] * x[qo + i];
    return std::vector<Value>{n - 1.0};
  });
  std::vector<Binding> binds;
  for (const auto& n : sv.names) binds.push_back({n, 0});
  create_constraint(prb, "quat_norm", std::move(fn), std::move(binds),
                    NodeSet::all());
}

}  // namespace

void apply_multiple_shooting(HorizonProblem& prb, IntegratorKind kind) {
  check_ready(prb);
  const VarGroup sv = group(prb, VariableKind::state);
  const VarGroup iv = group(prb, VariableKind::input);
  if (prb.quaternion_offset >= 0 && prb.quaternion_offset + 4 > sv.total)
    throw TranscriptionError("quaternion offset outside the state");

  std::vector<int> dims = sv.dims;
  dims.insert(dims.end(), iv.dims.begin(), iv.dims.end());
  dims.insert(dims.end(), sv.dims.begin(), sv.dims.end());

  const ad::DiffFunction f = prb.dynamics;
  const double dt = prb.dt;
  const int vo = prb.velocity_offset, qo = prb.quaternion_offset;
  const int nsv = static_cast<int>(sv.dims.size());
  const int niv = static_cast<int>(iv.dims.size());

  auto fn = ad::trace("ms_defect", dims, [&](const auto& in) {
    const std::vector<Value> xk = concat(in, 0, nsv);
    const std::vector<Value> uk = concat(in, nsv, niv);
    const std::vector<Value> xn = concat(in, nsv + niv, nsv);
    const std::vector<Value> phi = integrate(f, xk, uk, dt, kind, vo, qo);
    std::vector<Value> defect(xn.size());
    for (std::size_t i = 0; i < xn.size(); ++i) defect[i] = xn[i] - phi[i];
    return defect;
  });

  std::vector<Binding> binds;
  for (const auto& n : sv.names) binds.push_back({n, 0});
  for (const auto& n : iv.names) binds.push_back({n, 0});
  for (const auto& n : sv.names) binds.push_back({n, 1});
  create_constraint(prb, "ms_defect", std::move(fn), std::move(binds),
                    NodeSet::all())
      .is_defect = true;

  if (prb.quaternion_offset >= 0) add_quaternion_norm(prb, sv);
  prb.transcribed = true;
}

void apply_collocation(HorizonProblem& prb, const CollocationSpec& spec) {
  check_ready(prb);
  const std::vector<double> pts = radau_points(spec.degree);
  const int d = spec.degree;
  const VarGroup sv = group(prb, VariableKind::state);
  const VarGroup iv = group(prb, VariableKind::input);
  const int nx = sv.total;

  // Lagrange basis over tau_0 = 0 and the Radau points; D(i, j) is the basis-i
  // slope at collocation point j.
  std::vector<double> tau{0.0};
  tau.insert(tau.end(), pts.begin(), pts.end());
  Eigen::MatrixXd D(d + 1, d);
  for (int i = 0; i <= d; ++i)
    for (int j = 1; j <= d; ++j) {
      double sum = 0.0;
      for (int m = 0; m <= d; ++m) {
        if (m == i) continue;
        double prod = 1.0 / (tau[i] - tau[m]);
        for (int l = 0; l <= d; ++l) {
          if (l == i || l == m) continue;
          prod *= (tau[j] - tau[l]) / (tau[i] - tau[l]);
        }
        sum += prod;
      }
      D(i, j - 1) = sum;
    }

  std::vector<std::string> stage_names;
  for (int j = 1; j <= d; ++j) {
    const std::string name = "dyn_c" + std::to_string(j);
    auto& v = create_variable(prb, name, VariableKind::stage, nx);
    v.mirror_state_guess = true;
    stage_names.push_back(name);
  }

  std::vector<int> dims = sv.dims;
  for (int j = 0; j < d; ++j) dims.push_back(nx);
  dims.insert(dims.end(), iv.dims.begin(), iv.dims.end());

  const ad::DiffFunction f = prb.dynamics;
  const double dt = prb.dt;
  const int nsv = static_cast<int>(sv.dims.size());
  const int niv = static_cast<int>(iv.dims.size());

  auto fn = ad::trace("collocation", dims, [&](const auto& in) {
    std::vector<std::vector<Value>> X(d + 1);
    X[0] = concat(in, 0, nsv);
    for (int j = 1; j <= d; ++j) X[j] = in[nsv + j - 1];
    const std::vector<Value> uk = concat(in, nsv + d, niv);
    std::vector<Value> res;
    res.reserve(static_cast<std::size_t>(d) * nx);
    for (int j = 1; j <= d; ++j) {
      const std::vector<Value> fx = f.call({X[j], uk});
      for (int r = 0; r < nx; ++r) {
        Value slope = D(0, j - 1) * X[0][r];
        for (int i = 1; i <= d; ++i) slope = slope + D(i, j - 1) * X[i][r];
        res.push_back(slope - dt * fx[r]);
      }
    }
    return res;
  });

  std::vector<Binding> binds;
  for (const auto& n : sv.names) binds.push_back({n, 0});
  for (const auto& n : stage_names) binds.push_back({n, 0});
  for (const auto& n : iv.names) binds.push_back({n, 0});
  create_constraint(prb, "collocation", std::move(fn), std::move(binds),
                    NodeSet::all());

  auto cont = ad::trace("continuity", [&] {
    std::vector<int> cd{nx};
    cd.insert(cd.end(), sv.dims.begin(), sv.dims.end());
    return cd;
  }(), [&](const auto& in) {
    const std::vector<Value> xd = in[0];
    const std::vector<Value> xn = concat(in, 1, nsv);
    std::vector<Value> res(nx);
    for (int r = 0; r < nx; ++r) res[r] = xn[r] - xd[r];
    return res;
  });
  std::vector<Binding> cbinds{{stage_names.back(), 0}};
  for (const auto& n : sv.names) cbinds.push_back({n, 1});
  create_constraint(prb, "continuity", std::move(cont), std::move(cbinds),
                    NodeSet::all());

  prb.transcribed = true;
}

}  // namespace skyline::transcription
