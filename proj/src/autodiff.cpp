#include "skyline/autodiff.hpp"

#include <bit>
#include <cmath>
#include <ostream>

namespace skyline::ad {

namespace {

double eval_op(Op op, double a, double b, double c) {
  switch (op) {
    case Op::add: return a + b;
    case Op::sub: return a - b;
    case Op::mul: return a * b;
    case Op::div: return a / b;
    case Op::neg: return -a;
    case Op::sin: return std::sin(a);
    case Op::cos: return std::cos(a);
    case Op::sqrt: return std::sqrt(a);
    case Op::pow_c: return std::pow(a, c);
    case Op::sinc_sqrt_half: return sinc_sqrt_half(a);
    case Op::cos_sqrt_half: return cos_sqrt_half(a);
    default: throw TraceError("eval_op: not an arithmetic op");
  }
}

Tape* common_tape(const Value& a, const Value& b) {
  if (a.attached() && b.attached() && a.tape() != b.tape())
    throw TraceError("operands belong to different tapes");
  return a.attached() ? a.tape() : b.tape();
}

Value lift(Tape* t, const Value& v) {
  return v.attached() ? v : t->constant(v.literal());
}

const char* op_name(Op op) {
  switch (op) {
    case Op::input: return "input";
    case Op::constant: return "const";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::neg: return "neg";
    case Op::sin: return "sin";
    case Op::cos: return "cos";
    case Op::sqrt: return "sqrt";
    case Op::pow_c: return "pow";
    case Op::sinc_sqrt_half: return "sinc_sqrt_half";
    case Op::cos_sqrt_half: return "cos_sqrt_half";
  }
  return "?";
}

}  // namespace

Value operator+(const Value& a, const Value& b) {
  Tape* t = common_tape(a, b);
  if (!t) return Value(a.literal() + b.literal());
  return t->binary(Op::add, lift(t, a), lift(t, b));
}

Value operator-(const Value& a, const Value& b) {
  Tape* t = common_tape(a, b);
  if (!t) return Value(a.literal() - b.literal());
  return t->binary(Op::sub, lift(t, a), lift(t, b));
}

Value operator*(const Value& a, const Value& b) {
  Tape* t = common_tape(a, b);
  if (!t) return Value(a.literal() * b.literal());
  return t->binary(Op::mul, lift(t, a), lift(t, b));
}

Value operator/(const Value& a, const Value& b) {
  Tape* t = common_tape(a, b);
  if (!t) return Value(a.literal() / b.literal());
  return t->binary(Op::div, lift(t, a), lift(t, b));
}

Value operator-(const Value& a) {
  if (!a.attached()) return Value(-a.literal());
  return a.tape()->unary(Op::neg, a);
}

Value sin(const Value& a) {
  if (!a.attached()) return Value(std::sin(a.literal()));
  return a.tape()->unary(Op::sin, a);
}

Value cos(const Value& a) {
  if (!a.attached()) return Value(std::cos(a.literal()));
  return a.tape()->unary(Op::cos, a);
}

Value sqrt(const Value& a) {
  if (!a.attached()) return Value(std::sqrt(a.literal()));
  return a.tape()->unary(Op::sqrt, a);
}

Value pow(const Value& a, double e) {
  if (!a.attached()) return Value(std::pow(a.literal(), e));
  return a.tape()->unary(Op::pow_c, a, e);
}

Value sinc_sqrt_half(const Value& a) {
  if (!a.attached()) return Value(sinc_sqrt_half(a.literal()));
  return a.tape()->unary(Op::sinc_sqrt_half, a);
}

Value cos_sqrt_half(const Value& a) {
  if (!a.attached()) return Value(cos_sqrt_half(a.literal()));
  return a.tape()->unary(Op::cos_sqrt_half, a);
}

Value& Value::operator+=(const Value& rhs) { return *this = *this + rhs; }
Value& Value::operator-=(const Value& rhs) { return *this = *this - rhs; }
Value& Value::operator*=(const Value& rhs) { return *this = *this * rhs; }
Value& Value::operator/=(const Value& rhs) { return *this = *this / rhs; }

Tape::Tape(std::string name, std::vector<int> input_dims)
    : name_(std::move(name)), input_dims_(std::move(input_dims)) {
  for (int d : input_dims_) {
    if (d < 0) throw TraceError(name_ + ": negative input block dimension");
    total_input_dim_ += d;
  }
  nodes_.reserve(256);
  for (int b = 0; b < static_cast<int>(input_dims_.size()); ++b)
    for (int i = 0; i < input_dims_[b]; ++i) {
      Node n;
      n.op = Op::input;
      n.a = b;
      n.b = i;
      nodes_.push_back(n);
    }
}

std::vector<std::vector<Value>> Tape::make_inputs() {
  std::vector<std::vector<Value>> out(input_dims_.size());
  std::int32_t id = 0;
  for (std::size_t b = 0; b < input_dims_.size(); ++b)
    for (int i = 0; i < input_dims_[b]; ++i) out[b].push_back(Value(this, id++));
  return out;
}

Value Tape::input(int block, int index) {
  std::int32_t id = 0;
  for (int b = 0; b < block; ++b) id += input_dims_[b];
  return Value(this, id + index);
}

Value Tape::constant(double v) {
  if (std::isnan(v)) throw TraceError(name_ + ": NaN constant in graph");
  const std::uint64_t key = std::bit_cast<std::uint64_t>(v);
  for (const auto& [k, id] : const_cache_)
    if (k == key) return Value(this, id);
  Node n;
  n.op = Op::constant;
  n.c = v;
  Value out = emit(n);
  const_cache_.emplace_back(key, out.id());
  return out;
}

Value Tape::unary(Op op, const Value& a, double c) {
  if (a.tape() != this) throw TraceError(name_ + ": operand from another tape");
  const Node& na = nodes_[a.id()];
  if (na.op == Op::constant) return constant(eval_op(op, na.c, 0.0, c));
  Node n;
  n.op = op;
  n.a = a.id();
  n.c = c;
  return emit(n);
}

Value Tape::binary(Op op, const Value& a, const Value& b) {
  if (a.tape() != this || b.tape() != this)
    throw TraceError(name_ + ": operand from another tape");
  const Node& na = nodes_[a.id()];
  const Node& nb = nodes_[b.id()];
  if (na.op == Op::constant && nb.op == Op::constant)
    return constant(eval_op(op, na.c, nb.c, 0.0));
  Node n;
  n.op = op;
  n.a = a.id();
  n.b = b.id();
  return emit(n);
}

Value Tape::emit(Node n) {
  if (sealed_) throw TraceError(name_ + ": tape is sealed");
  nodes_.push_back(n);
  return Value(this, static_cast<std::int32_t>(nodes_.size()) - 1);
}

void Tape::set_outputs(const std::vector<Value>& outs) {
  if (outs.empty()) throw TraceError(name_ + ": builder produced no outputs");
  outputs_.clear();
  for (const Value& v : outs) {
    Value a = v.attached() ? v : constant(v.literal());
    if (a.tape() != this) throw TraceError(name_ + ": output from another tape");
    outputs_.push_back(a.id());
  }
  finalize();
}

void Tape::finalize() {
  block_used_.assign(input_dims_.size(), false);
  block_of_input_.clear();
  std::vector<char> reach(nodes_.size(), 0);
  std::vector<std::int32_t> stack(outputs_.begin(), outputs_.end());
  while (!stack.empty()) {
    const std::int32_t i = stack.back();
    stack.pop_back();
    if (reach[i]) continue;
    reach[i] = 1;
    const Node& n = nodes_[i];
    if (n.op == Op::input) {
      block_used_[n.a] = true;
    } else if (n.op != Op::constant) {
      stack.push_back(n.a);
      if (n.b >= 0) stack.push_back(n.b);
    }
  }
  lane_offset_.assign(input_dims_.size(), -1);
  n_lanes_ = 0;
  for (std::size_t b = 0; b < input_dims_.size(); ++b)
    if (block_used_[b]) {
      lane_offset_[b] = n_lanes_;
      n_lanes_ += input_dims_[b];
    }
  sealed_ = true;
}

void Tape::sweep(const double* const* blocks, double* v, double* t,
                 int n_lanes) const {
  const int W = n_lanes;
  const std::size_t n = nodes_.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Node& nd = nodes_[i];
    double* ti = t + i * W;
    switch (nd.op) {
      case Op::input: {
        v[i] = blocks[nd.a][nd.b];
        if (W > 0) {
          for (int l = 0; l < W; ++l) ti[l] = 0.0;
          const int lo = lane_offset_[nd.a];
          if (lo >= 0) ti[lo + nd.b] = 1.0;
        }
        break;
      }
      case Op::constant: {
        v[i] = nd.c;
        for (int l = 0; l < W; ++l) ti[l] = 0.0;
        break;
      }
      case Op::add: {
        v[i] = v[nd.a] + v[nd.b];
        const double *ta = t + nd.a * W, *tb = t + nd.b * W;
        for (int l = 0; l < W; ++l) ti[l] = ta[l] + tb[l];
        break;
      }
      case Op::sub: {
        v[i] = v[nd.a] - v[nd.b];
        const double *ta = t + nd.a * W, *tb = t + nd.b * W;
        for (int l = 0; l < W; ++l) ti[l] = ta[l] - tb[l];
        break;
      }
      case Op::mul: {
        const double va = v[nd.a], vb = v[nd.b];
        v[i] = va * vb;
        const double *ta = t + nd.a * W, *tb = t + nd.b * W;
        for (int l = 0; l < W; ++l) ti[l] = ta[l] * vb + va * tb[l];
        break;
      }
      case Op::div: {
        const double vb = v[nd.b];
        const double vo = v[nd.a] / vb;
        v[i] = vo;
        const double *ta = t + nd.a * W, *tb = t + nd.b * W;
        for (int l = 0; l < W; ++l) ti[l] = (ta[l] - vo * tb[l]) / vb;
        break;
      }
      case Op::neg: {
        v[i] = -v[nd.a];
        const double* ta = t + nd.a * W;
        for (int l = 0; l < W; ++l) ti[l] = -ta[l];
        break;
      }
      case Op::sin: {
        const double va = v[nd.a];
        v[i] = std::sin(va);
        const double k = std::cos(va);
        const double* ta = t + nd.a * W;
        for (int l = 0; l < W; ++l) ti[l] = k * ta[l];
        break;
      }
      case Op::cos: {
        const double va = v[nd.a];
        v[i] = std::cos(va);
        const double k = -std::sin(va);
        const double* ta = t + nd.a * W;
        for (int l = 0; l < W; ++l) ti[l] = k * ta[l];
        break;
      }
      case Op::sqrt: {
        const double vo = std::sqrt(v[nd.a]);
        v[i] = vo;
        const double k = 0.5 / vo;
        const double* ta = t + nd.a * W;
        for (int l = 0; l < W; ++l) ti[l] = k * ta[l];
        break;
      }
      case Op::pow_c: {
        const double va = v[nd.a];
        v[i] = std::pow(va, nd.c);
        const double k = nd.c * std::pow(va, nd.c - 1.0);
        const double* ta = t + nd.a * W;
        for (int l = 0; l < W; ++l) ti[l] = k * ta[l];
        break;
      }
      case Op::sinc_sqrt_half: {
        const double va = v[nd.a];
        v[i] = skyline::ad::sinc_sqrt_half(va);
        const double k = d_sinc_sqrt_half(va);
        const double* ta = t + nd.a * W;
        for (int l = 0; l < W; ++l) ti[l] = k * ta[l];
        break;
      }
      case Op::cos_sqrt_half: {
        const double va = v[nd.a];
        v[i] = skyline::ad::cos_sqrt_half(va);
        const double k = -skyline::ad::sinc_sqrt_half(va) / 8.0;
        const double* ta = t + nd.a * W;
        for (int l = 0; l < W; ++l) ti[l] = k * ta[l];
        break;
      }
    }
  }
}

void Tape::write_dot(std::ostream& os) const {
  os << "digraph \"" << name_ << "\" {\n  rankdir=LR;\n";
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    os << "  n" << i << " [label=\"";
    if (n.op == Op::input) {
      os << "x" << n.a << "[" << n.b << "]\" shape=box";
    } else if (n.op == Op::constant) {
      os << n.c << "\" shape=ellipse";
    } else {
      os << op_name(n.op);
      if (n.op == Op::pow_c) os << " " << n.c;
      os << "\" shape=oval";
    }
    os << "];\n";
    if (n.op != Op::input && n.op != Op::constant) {
      os << "  n" << n.a << " -> n" << i << ";\n";
      if (n.b >= 0) os << "  n" << n.b << " -> n" << i << ";\n";
    }
  }
  for (std::size_t k = 0; k < outputs_.size(); ++k) {
    os << "  out" << k << " [label=\"out[" << k << "]\" shape=doublecircle];\n";
    os << "  n" << outputs_[k] << " -> out" << k << ";\n";
  }
  os << "}\n";
}

int DiffFunction::output_dim() const {
  const int nr = n_residuals();
  const int ni = total_input_dim();
  switch (mode_) {
    case Mode::value: return nr;
    case Mode::jacobian: return nr * ni;
    case Mode::gn_gradient: return ni;
    case Mode::gn_hessian: return ni * ni;
  }
  return 0;
}

void DiffFunction::check_inputs(const std::vector<Eigen::VectorXd>& inputs) const {
  const auto& dims = tape_->input_dims();
  if (inputs.size() != dims.size())
    throw TraceError(name() + ": expected " + std::to_string(dims.size()) +
                     " input blocks, got " + std::to_string(inputs.size()));
  for (std::size_t b = 0; b < dims.size(); ++b)
    if (inputs[b].size() != dims[b])
      throw TraceError(name() + ": input block " + std::to_string(b) +
                       " has size " + std::to_string(inputs[b].size()) +
                       ", expected " + std::to_string(dims[b]));
}

namespace {
thread_local std::vector<double> g_workspace;
}

Eigen::VectorXd DiffFunction::operator()(
    const std::vector<Eigen::VectorXd>& inputs) const {
  check_inputs(inputs);
  const int nr = n_residuals();
  const int ni = total_input_dim();
  const int nn = tape_->n_nodes();
  const int W = mode_ == Mode::value ? 0 : tape_->n_lanes();

  std::vector<const double*> blocks(inputs.size());
  for (std::size_t b = 0; b < inputs.size(); ++b) blocks[b] = inputs[b].data();

  std::vector<double>& ws = g_workspace;
  ws.resize(static_cast<std::size_t>(nn) * (1 + W));
  double* v = ws.data();
  double* t = ws.data() + nn;
  tape_->sweep(blocks.data(), v, t, W);

  if (mode_ == Mode::value) {
    Eigen::VectorXd out(nr);
    for (int i = 0; i < nr; ++i) out[i] = v[tape_->output_node(i)];
    return out;
  }

  // Dense Jacobian in global input coordinates; unused blocks stay zero.
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(nr, ni);
  const auto& dims = tape_->input_dims();
  for (int i = 0; i < nr; ++i) {
    const double* ti = t + static_cast<std::size_t>(tape_->output_node(i)) * W;
    int gcol = 0;
    for (std::size_t b = 0; b < dims.size(); ++b) {
      const int lo = tape_->lane_offset(static_cast<int>(b));
      if (lo >= 0)
        for (int j = 0; j < dims[b]; ++j) J(i, gcol + j) = ti[lo + j];
      gcol += dims[b];
    }
  }

  if (mode_ == Mode::jacobian) {
    Eigen::VectorXd out(nr * ni);
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                             Eigen::RowMajor>>(out.data(), nr, ni) = J;
    return out;
  }

  Eigen::VectorXd r(nr);
  for (int i = 0; i < nr; ++i) r[i] = v[tape_->output_node(i)];

  if (mode_ == Mode::gn_gradient) return J.transpose() * r;

  Eigen::MatrixXd H = J.transpose() * J;
  Eigen::VectorXd out(ni * ni);
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                           Eigen::RowMajor>>(out.data(), ni, ni) = H;
  return out;
}

void DiffFunction::value_and_jacobian(const std::vector<Eigen::VectorXd>& inputs,
                                      Eigen::VectorXd& value,
                                      std::vector<Eigen::MatrixXd>& jac) const {
  check_inputs(inputs);
  const int nr = n_residuals();
  const int nn = tape_->n_nodes();
  const int W = tape_->n_lanes();

  std::vector<const double*> blocks(inputs.size());
  for (std::size_t b = 0; b < inputs.size(); ++b) blocks[b] = inputs[b].data();

  std::vector<double>& ws = g_workspace;
  ws.resize(static_cast<std::size_t>(nn) * (1 + W));
  double* v = ws.data();
  double* t = ws.data() + nn;
  tape_->sweep(blocks.data(), v, t, W);

  value.resize(nr);
  for (int i = 0; i < nr; ++i) value[i] = v[tape_->output_node(i)];

  const auto& dims = tape_->input_dims();
  jac.assign(dims.size(), Eigen::MatrixXd());
  for (std::size_t b = 0; b < dims.size(); ++b) {
    const int lo = tape_->lane_offset(static_cast<int>(b));
    if (lo < 0) continue;
    Eigen::MatrixXd& Jb = jac[b];
    Jb.resize(nr, dims[b]);
    for (int i = 0; i < nr; ++i) {
      const double* ti = t + static_cast<std::size_t>(tape_->output_node(i)) * W;
      for (int j = 0; j < dims[b]; ++j) Jb(i, j) = ti[lo + j];
    }
  }
}

DiffFunction DiffFunction::with_mode(Mode m) const {
  return DiffFunction(tape_, m);
}

std::vector<Value> DiffFunction::call(
    const std::vector<std::vector<Value>>& inputs) const {
  const auto& dims = tape_->input_dims();
  if (inputs.size() != dims.size())
    throw TraceError(name() + ": call with wrong number of input blocks");
  for (std::size_t b = 0; b < dims.size(); ++b)
    if (static_cast<int>(inputs[b].size()) != dims[b])
      throw TraceError(name() + ": call input block " + std::to_string(b) +
                       " has wrong size");

  const int nn = tape_->n_nodes();
  std::vector<Value> map(nn);
  for (int i = 0; i < nn; ++i) {
    const Node& n = tape_->node(i);
    switch (n.op) {
      case Op::input: map[i] = inputs[n.a][n.b]; break;
      case Op::constant: map[i] = Value(n.c); break;
      case Op::add: map[i] = map[n.a] + map[n.b]; break;
      case Op::sub: map[i] = map[n.a] - map[n.b]; break;
      case Op::mul: map[i] = map[n.a] * map[n.b]; break;
      case Op::div: map[i] = map[n.a] / map[n.b]; break;
      case Op::neg: map[i] = -map[n.a]; break;
      case Op::sin: map[i] = sin(map[n.a]); break;
      case Op::cos: map[i] = cos(map[n.a]); break;
      case Op::sqrt: map[i] = sqrt(map[n.a]); break;
      case Op::pow_c: map[i] = pow(map[n.a], n.c); break;
      case Op::sinc_sqrt_half: map[i] = sinc_sqrt_half(map[n.a]); break;
      case Op::cos_sqrt_half: map[i] = cos_sqrt_half(map[n.a]); break;
    }
  }
  std::vector<Value> out(tape_->n_outputs());
  for (int k = 0; k < tape_->n_outputs(); ++k) out[k] = map[tape_->output_node(k)];
  return out;
}

std::vector<std::array<int, 3>> DiffFunction::jacobian_sparsity() const {
  std::vector<std::array<int, 3>> out;
  const auto& dims = tape_->input_dims();
  for (int i = 0; i < n_residuals(); ++i)
    for (std::size_t b = 0; b < dims.size(); ++b) {
      if (!tape_->block_used()[b]) continue;
      for (int j = 0; j < dims[b]; ++j)
        out.push_back({i, static_cast<int>(b), j});
    }
  return out;
}

DiffFunction trace(const std::string& name, const std::vector<int>& input_dims,
                   const Builder& builder) {
  auto tape = std::make_shared<Tape>(name, input_dims);
  std::vector<std::vector<Value>> inputs = tape->make_inputs();
  std::vector<Value> outs = builder(inputs);
  tape->set_outputs(outs);
  return DiffFunction(std::move(tape), DiffFunction::Mode::value);
}

DiffFunction jacobian(const DiffFunction& f) {
  if (f.mode() != DiffFunction::Mode::value)
    throw TraceError(f.name() + ": jacobian of a derivative mode is not supported");
  return f.with_mode(DiffFunction::Mode::jacobian);
}

std::pair<DiffFunction, DiffFunction> gauss_newton_pair(const DiffFunction& f) {
  if (f.mode() != DiffFunction::Mode::value)
    throw TraceError(f.name() + ": gauss_newton_pair needs a value-mode function");
  return {f.with_mode(DiffFunction::Mode::gn_gradient),
          f.with_mode(DiffFunction::Mode::gn_hessian)};
}

}  // namespace skyline::ad
