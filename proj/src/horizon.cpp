#include "skyline/horizon.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace skyline::horizon {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

const char* kind_name(VariableKind k) {
  switch (k) {
    case VariableKind::state: return "state";
    case VariableKind::input: return "input";
    case VariableKind::stage: return "stage";
    case VariableKind::parameter: return "parameter";
  }
  return "?";
}

int instance_count(VariableKind kind, int n_nodes) {
  return (kind == VariableKind::input || kind == VariableKind::stage) ? n_nodes
                                                                      : n_nodes + 1;
}

}  // namespace

namespace {

// Highest node a term can be instantiated at: every binding must stay inside
// its variable's instance range.
int term_max_node(const HorizonProblem& prb, const TermDecl& t) {
  int max_node = prb.n_nodes;
  for (const Binding& b : t.bindings) {
    const VariableDecl& v = prb.variable(b.variable);
    max_node = std::min(max_node, v.instances - 1 - b.node_offset);
  }
  if (max_node < 0)
    throw HorizonError("term '" + t.name + "' cannot be instantiated anywhere");
  return max_node;
}

}  // namespace

NodeSet NodeSet::all() { return NodeSet{}; }

NodeSet NodeSet::range(int first, int last) {
  if (first < 0 || last < first)
    throw HorizonError("invalid node range [" + std::to_string(first) + ", " +
                       std::to_string(last) + "]");
  NodeSet s;
  s.kind_ = Kind::range;
  s.first_ = first;
  s.last_ = last;
  return s;
}

NodeSet NodeSet::single(int node) {
  if (node < 0) throw HorizonError("negative node " + std::to_string(node));
  NodeSet s;
  s.kind_ = Kind::single;
  s.first_ = s.last_ = node;
  return s;
}

NodeSet NodeSet::list(std::vector<int> nodes) {
  if (nodes.empty()) throw HorizonError("empty node list");
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  if (nodes.front() < 0)
    throw HorizonError("negative node " + std::to_string(nodes.front()));
  NodeSet s;
  s.kind_ = Kind::list;
  s.list_ = std::move(nodes);
  return s;
}

NodeSet NodeSet::final() {
  NodeSet s;
  s.kind_ = Kind::final;
  return s;
}

std::vector<int> NodeSet::resolve(int n_nodes, int max_node) const {
  auto check = [&](int k) {
    if (k > max_node)
      throw HorizonError("node " + std::to_string(k) + " out of range [0, " +
                         std::to_string(max_node) + "]");
    return k;
  };
  std::vector<int> out;
  switch (kind_) {
    case Kind::all:
      for (int k = 0; k <= max_node; ++k) out.push_back(k);
      break;
    case Kind::range:
      check(last_);
      for (int k = first_; k <= last_; ++k) out.push_back(k);
      break;
    case Kind::single:
      out.push_back(check(first_));
      break;
    case Kind::list:
      for (int k : list_) out.push_back(check(k));
      break;
    case Kind::final:
      out.push_back(check(n_nodes));
      break;
  }
  return out;
}

int HorizonProblem::nx() const {
  int n = 0;
  for (const auto& v : variables)
    if (v.kind == VariableKind::state) n += v.dim;
  return n;
}

int HorizonProblem::nu() const {
  int n = 0;
  for (const auto& v : variables)
    if (v.kind == VariableKind::input) n += v.dim;
  return n;
}

int HorizonProblem::n_stage() const {
  int n = 0;
  for (const auto& v : variables)
    if (v.kind == VariableKind::stage) n += v.dim;
  return n;
}

bool HorizonProblem::has_variable(const std::string& name) const {
  for (const auto& v : variables)
    if (v.name == name) return true;
  return false;
}

const VariableDecl& HorizonProblem::variable(const std::string& name) const {
  for (const auto& v : variables)
    if (v.name == name) return v;
  throw HorizonError("unknown variable '" + name + "'");
}

VariableDecl& HorizonProblem::variable(const std::string& name) {
  for (auto& v : variables)
    if (v.name == name) return v;
  throw HorizonError("unknown variable '" + name + "'");
}

HorizonProblem create_problem(int n_nodes) {
  if (n_nodes < 1)
    throw HorizonError("horizon needs at least 1 node, got " +
                       std::to_string(n_nodes));
  HorizonProblem prb;
  prb.n_nodes = n_nodes;
  return prb;
}

VariableDecl& create_variable(HorizonProblem& prb, const std::string& name,
                              VariableKind kind, int dim) {
  if (dim <= 0)
    throw HorizonError("variable '" + name + "' needs positive dim, got " +
                       std::to_string(dim));
  if (prb.has_variable(name))
    throw HorizonError("duplicate variable '" + name + "'");
  VariableDecl v;
  v.name = name;
  v.kind = kind;
  v.dim = dim;
  v.instances = instance_count(kind, prb.n_nodes);
  v.lower = Eigen::MatrixXd::Constant(dim, v.instances, -kInf);
  v.upper = Eigen::MatrixXd::Constant(dim, v.instances, kInf);
  v.guess = Eigen::MatrixXd::Zero(dim, v.instances);
  if (kind == VariableKind::parameter)
    v.values = Eigen::MatrixXd::Zero(dim, v.instances);
  prb.variables.push_back(std::move(v));
  return prb.variables.back();
}

void set_bounds(HorizonProblem& prb, const std::string& name,
                const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                const NodeSet& nodes) {
  VariableDecl& v = prb.variable(name);
  if (v.kind == VariableKind::parameter)
    throw HorizonError("parameter '" + name + "' takes values, not bounds");
  if (lower.size() != v.dim || upper.size() != v.dim)
    throw HorizonError("bounds for '" + name + "' have size " +
                       std::to_string(lower.size()) + "/" +
                       std::to_string(upper.size()) + ", expected " +
                       std::to_string(v.dim));
  for (int i = 0; i < v.dim; ++i)
    if (lower[i] > upper[i])
      throw HorizonError("lower bound exceeds upper for '" + name +
                         "' component " + std::to_string(i));
  for (int k : nodes.resolve(prb.n_nodes, v.instances - 1)) {
    v.lower.col(k) = lower;
    v.upper.col(k) = upper;
  }
}

void set_guess(HorizonProblem& prb, const std::string& name,
               const Eigen::VectorXd& value, const NodeSet& nodes) {
  VariableDecl& v = prb.variable(name);
  if (v.kind == VariableKind::parameter)
    throw HorizonError("parameter '" + name + "' takes values, not a guess");
  if (value.size() != v.dim)
    throw HorizonError("guess for '" + name + "' has size " +
                       std::to_string(value.size()) + ", expected " +
                       std::to_string(v.dim));
  for (int k : nodes.resolve(prb.n_nodes, v.instances - 1)) v.guess.col(k) = value;
  v.guess_set = true;
}

void set_parameter_values(HorizonProblem& prb, const std::string& name, int node,
                          const Eigen::VectorXd& value) {
  VariableDecl& v = prb.variable(name);
  if (v.kind != VariableKind::parameter)
    throw HorizonError("'" + name + "' is not a parameter");
  if (value.size() != v.dim || node < 0 || node >= v.instances)
    throw HorizonError("bad value for parameter '" + name + "' at node " +
                       std::to_string(node));
  v.values.col(node) = value;
}

void set_parameter_values(HorizonProblem& prb, const std::string& name,
                          const Eigen::MatrixXd& values) {
  VariableDecl& v = prb.variable(name);
  if (v.kind != VariableKind::parameter)
    throw HorizonError("'" + name + "' is not a parameter");
  if (values.rows() != v.dim || values.cols() != v.instances)
    throw HorizonError("parameter '" + name + "' values must be " +
                       std::to_string(v.dim) + " x " +
                       std::to_string(v.instances));
  v.values = values;
}

namespace {

TermDecl& add_term(HorizonProblem& prb, TermDecl t) {
  for (const auto& existing : prb.terms)
    if (existing.name == t.name)
      throw HorizonError("duplicate term '" + t.name + "'");
  if (!t.fn.valid()) throw HorizonError("term '" + t.name + "' has no function");
  if (t.bindings.empty())
    throw HorizonError("term '" + t.name + "' binds no variables");
  const auto& dims = t.fn.input_dims();
  if (dims.size() != t.bindings.size())
    throw HorizonError("term '" + t.name + "' binds " +
                       std::to_string(t.bindings.size()) + " variables but its " +
                       "function takes " + std::to_string(dims.size()) +
                       " blocks");
  for (std::size_t i = 0; i < t.bindings.size(); ++i) {
    const Binding& b = t.bindings[i];
    const VariableDecl& v = prb.variable(b.variable);
    if (v.dim != dims[i])
      throw HorizonError("term '" + t.name + "' block " + std::to_string(i) +
                         " has dim " + std::to_string(dims[i]) + " but '" +
                         b.variable + "' has dim " + std::to_string(v.dim));
    if (b.node_offset < 0 || b.node_offset > 1)
      throw HorizonError("term '" + t.name + "': node offset must be 0 or 1");
  }
  // Resolve now so bad node sets fail at declaration; assembly resolves the
  // same way.
  (void)t.nodes.resolve(prb.n_nodes, term_max_node(prb, t));
  prb.terms.push_back(std::move(t));
  return prb.terms.back();
}

}  // namespace

TermDecl& create_constraint(HorizonProblem& prb, const std::string& name,
                            ad::DiffFunction fn, std::vector<Binding> bindings,
                            const NodeSet& nodes, const Eigen::VectorXd& lower,
                            const Eigen::VectorXd& upper) {
  TermDecl t;
  t.name = name;
  t.kind = TermKind::constraint;
  t.fn = std::move(fn);
  t.bindings = std::move(bindings);
  t.nodes = nodes;
  const int rows = t.fn.valid() ? t.fn.n_residuals() : 0;
  t.lower = lower.size() ? lower : Eigen::VectorXd::Zero(rows);
  t.upper = upper.size() ? upper : Eigen::VectorXd::Zero(rows);
  if (t.lower.size() != rows || t.upper.size() != rows)
    throw HorizonError("constraint '" + name + "' has " + std::to_string(rows) +
                       " rows but bounds of size " +
                       std::to_string(t.lower.size()) + "/" +
                       std::to_string(t.upper.size()));
  for (int i = 0; i < rows; ++i)
    if (t.lower[i] > t.upper[i])
      throw HorizonError("constraint '" + name + "' row " + std::to_string(i) +
                         " has lower > upper");
  return add_term(prb, std::move(t));
}

TermDecl& create_cost(HorizonProblem& prb, const std::string& name,
                      ad::DiffFunction fn, std::vector<Binding> bindings,
                      const NodeSet& nodes, double weight, bool linear) {
  if (!(weight >= 0.0))
    throw HorizonError("cost '" + name + "' has negative weight");
  TermDecl t;
  t.name = name;
  t.kind = TermKind::cost;
  t.fn = std::move(fn);
  t.bindings = std::move(bindings);
  t.nodes = nodes;
  t.weight = weight;
  t.linear_cost = linear;
  return add_term(prb, std::move(t));
}

void set_dynamics(HorizonProblem& prb, ad::DiffFunction xdot, double dt) {
  if (!xdot.valid()) throw HorizonError("dynamics function is empty");
  if (!(dt > 0.0)) throw HorizonError("dt must be positive");
  if (xdot.input_dims().size() != 2)
    throw HorizonError("dynamics must take the two blocks (x, u)");
  prb.dynamics = std::move(xdot);
  prb.dt = dt;
}

int Nlp::offset(const std::string& name, int node) const {
  for (const auto& v : layout) {
    if (v.name != name) continue;
    if (node < 0 || node >= v.instances)
      throw HorizonError("variable '" + name + "' has no node " +
                         std::to_string(node));
    int base = 0, stride = 0;
    switch (v.kind) {
      case VariableKind::state:
        base = 0;
        stride = nx;
        break;
      case VariableKind::input:
        base = (n_nodes + 1) * nx;
        stride = nu;
        break;
      case VariableKind::stage:
        base = (n_nodes + 1) * nx + n_nodes * nu;
        stride = n_stage;
        break;
      case VariableKind::parameter:
        throw HorizonError("parameter '" + name + "' is not a decision variable");
    }
    return base + node * stride + v.within;
  }
  throw HorizonError("unknown variable '" + name + "'");
}

std::vector<Eigen::VectorXd> Nlp::gather(const Block& b,
                                         const Eigen::VectorXd& z) const {
  const auto& dims = b.fn.input_dims();
  std::vector<Eigen::VectorXd> in(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i)
    in[i] = b.col_offsets[i] < 0 ? b.params[i]
                                 : z.segment(b.col_offsets[i], dims[i]).eval();
  return in;
}

double Nlp::eval_objective(const Eigen::VectorXd& z) const {
  double j = 0.0;
  for (const Block& b : costs) {
    const Eigen::VectorXd r = b.fn(gather(b, z));
    j += b.linear_cost ? b.weight * r.sum() : 0.5 * b.weight * r.squaredNorm();
  }
  return j;
}

Eigen::VectorXd Nlp::eval_constraints(const Eigen::VectorXd& z) const {
  Eigen::VectorXd g(n_constraint_rows);
  for (const Block& b : constraints)
    g.segment(b.row_offset, b.fn.n_residuals()) = b.fn(gather(b, z));
  return g;
}

std::map<std::string, Eigen::MatrixXd> Nlp::unpack(const Eigen::VectorXd& z) const {
  if (z.size() != n_decision)
    throw HorizonError("decision vector has size " + std::to_string(z.size()) +
                       ", expected " + std::to_string(n_decision));
  std::map<std::string, Eigen::MatrixXd> out;
  for (const auto& v : layout) {
    Eigen::MatrixXd m(v.dim, v.instances);
    for (int k = 0; k < v.instances; ++k)
      m.col(k) = z.segment(offset(v.name, k), v.dim);
    out[v.name] = std::move(m);
  }
  return out;
}

Eigen::VectorXd Nlp::pack(const std::map<std::string, Eigen::MatrixXd>& vals) const {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(n_decision);
  for (const auto& v : layout) {
    auto it = vals.find(v.name);
    if (it == vals.end())
      throw HorizonError("pack: missing variable '" + v.name + "'");
    if (it->second.rows() != v.dim || it->second.cols() != v.instances)
      throw HorizonError("pack: '" + v.name + "' must be " +
                         std::to_string(v.dim) + " x " +
                         std::to_string(v.instances));
    for (int k = 0; k < v.instances; ++k)
      z.segment(offset(v.name, k), v.dim) = it->second.col(k);
  }
  return z;
}

Nlp assemble_nlp(const HorizonProblem& prb) {
  if (!prb.dynamics.valid()) throw HorizonError("dynamics not set");
  if (!(prb.dt > 0.0)) throw HorizonError("dt not set");
  Nlp nlp;
  nlp.n_nodes = prb.n_nodes;
  nlp.dt = prb.dt;
  nlp.nx = prb.nx();
  nlp.nu = prb.nu();
  nlp.n_stage = prb.n_stage();
  if (nlp.nx <= 0) throw HorizonError("problem has no state variables");

  const auto& ddims = prb.dynamics.input_dims();
  if (ddims[0] != nlp.nx || ddims[1] != nlp.nu ||
      prb.dynamics.n_residuals() != nlp.nx)
    throw HorizonError("dynamics dims (" + std::to_string(ddims[0]) + ", " +
                       std::to_string(ddims[1]) + ") -> " +
                       std::to_string(prb.dynamics.n_residuals()) +
                       " do not match nx=" + std::to_string(nlp.nx) +
                       ", nu=" + std::to_string(nlp.nu));

  // Decision layout: within-node offsets per section, in declaration order.
  int wx = 0, wu = 0, ws = 0;
  for (const auto& v : prb.variables) {
    if (v.kind == VariableKind::parameter) continue;
    Nlp::VarLayout l;
    l.name = v.name;
    l.kind = v.kind;
    l.dim = v.dim;
    l.instances = v.instances;
    int& w = v.kind == VariableKind::state ? wx
             : v.kind == VariableKind::input ? wu
                                             : ws;
    l.within = w;
    w += v.dim;
    nlp.layout.push_back(std::move(l));
  }
  nlp.n_decision = (prb.n_nodes + 1) * nlp.nx + prb.n_nodes * nlp.nu +
                   prb.n_nodes * nlp.n_stage;

  nlp.lower = Eigen::VectorXd::Constant(nlp.n_decision, -kInf);
  nlp.upper = Eigen::VectorXd::Constant(nlp.n_decision, kInf);
  nlp.guess = Eigen::VectorXd::Zero(nlp.n_decision);
  for (const auto& v : prb.variables) {
    if (v.kind == VariableKind::parameter) continue;
    for (int k = 0; k < v.instances; ++k) {
      const int o = nlp.offset(v.name, k);
      nlp.lower.segment(o, v.dim) = v.lower.col(k);
      nlp.upper.segment(o, v.dim) = v.upper.col(k);
      nlp.guess.segment(o, v.dim) = v.guess.col(k);
    }
  }
  // Stage variables default their guess to the owning node's state guess so
  // collocation starts from the shooting trajectory.
  for (const auto& v : prb.variables) {
    if (v.kind != VariableKind::stage || v.guess_set || !v.mirror_state_guess)
      continue;
    for (int k = 0; k < v.instances; ++k) {
      const int o = nlp.offset(v.name, k);
      int at = 0;
      for (const auto& sv : prb.variables) {
        if (sv.kind != VariableKind::state) continue;
        nlp.guess.segment(o + at, sv.dim) = sv.guess.col(k);
        at += sv.dim;
      }
    }
  }

  int row = 0;
  for (const TermDecl& t : prb.terms) {
    const int max_node = term_max_node(prb, t);
    for (int k : t.nodes.resolve(prb.n_nodes, max_node)) {
      Nlp::Block b;
      b.term = t.name;
      b.node = k;
      b.fn = t.fn;
      b.weight = t.weight;
      b.linear_cost = t.linear_cost;
      b.is_defect = t.is_defect;
      for (const Binding& bind : t.bindings) {
        const VariableDecl& v = prb.variable(bind.variable);
        if (v.kind == VariableKind::parameter) {
          b.col_offsets.push_back(-1);
          b.params.push_back(v.values.col(k + bind.node_offset));
        } else {
          b.col_offsets.push_back(nlp.offset(v.name, k + bind.node_offset));
          b.params.emplace_back();
        }
      }
      if (t.kind == TermKind::constraint) {
        b.lower = t.lower;
        b.upper = t.upper;
        for (int i = 0; i < t.lower.size(); ++i)
          if (std::isinf(t.lower[i]) && std::isinf(t.upper[i]))
            throw HorizonError("constraint '" + t.name + "' row " +
                               std::to_string(i) + " is unbounded on both sides");
        b.row_offset = row;
        row += t.fn.n_residuals();
        nlp.constraints.push_back(std::move(b));
      } else {
        nlp.costs.push_back(std::move(b));
      }
    }
  }
  nlp.n_constraint_rows = row;
  return nlp;
}

std::string describe(const HorizonProblem& prb) {
  nlohmann::json j;
  j["n_nodes"] = prb.n_nodes;
  j["dt"] = prb.dt;
  j["nx"] = prb.nx();
  j["nu"] = prb.nu();
  j["variables"] = nlohmann::json::array();
  for (const auto& v : prb.variables)
    j["variables"].push_back({{"name", v.name},
                              {"kind", kind_name(v.kind)},
                              {"dim", v.dim},
                              {"instances", v.instances}});
  j["terms"] = nlohmann::json::array();
  for (const auto& t : prb.terms) {
    nlohmann::json tj;
    tj["name"] = t.name;
    tj["kind"] = t.kind == TermKind::constraint ? "constraint" : "cost";
    tj["rows"] = t.fn.valid() ? t.fn.n_residuals() : 0;
    tj["nodes"] = t.nodes.resolve(prb.n_nodes, term_max_node(prb, t));
    nlohmann::json binds = nlohmann::json::array();
    for (const auto& b : t.bindings)
      binds.push_back({{"variable", b.variable}, {"node_offset", b.node_offset}});
    tj["bindings"] = std::move(binds);
    if (t.kind == TermKind::cost) {
      tj["weight"] = t.weight;
      tj["linear"] = t.linear_cost;
    }
    j["terms"].push_back(std::move(tj));
  }
  if (prb.dynamics.valid()) {
    j["dynamics"] = {{"inputs", prb.dynamics.input_dims()},
                     {"outputs", prb.dynamics.n_residuals()}};
  }
  return j.dump(2);
}

}  // namespace skyline::horizon
