#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace skyline::ad {

class TraceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Smooth kernels for the quaternion exponential map. Both are analytic
// functions of a = ||phi||^2, so they stay differentiable at a = 0 where the
// naive sin(|phi|/2)/|phi| form would divide by zero. The small-argument
// branch is a numeric guard inside the kernel, not a branch in any traced
// graph: traced code records the kernel as a single opaque op.
inline double sinc_sqrt_half(double a) {
  if (a < 1e-8) return 1.0 - a / 24.0 + a * a / 1920.0;
  const double s = 0.5 * std::sqrt(a);
  return std::sin(s) / s;
}

inline double cos_sqrt_half(double a) {
  if (a < 1e-8) return 1.0 - a / 8.0 + a * a / 384.0;
  return std::cos(0.5 * std::sqrt(a));
}

// d/da sinc_sqrt_half(a) = (cos(s) - sinc(s)) / (2a) with s = sqrt(a)/2.
inline double d_sinc_sqrt_half(double a) {
  if (a < 1e-6) return -1.0 / 24.0 + a / 960.0 - a * a / 107520.0;
  const double s = 0.5 * std::sqrt(a);
  return (std::cos(s) - std::sin(s) / s) / (2.0 * a);
}

enum class Op : std::uint8_t {
  input,
  constant,
  add,
  sub,
  mul,
  div,
  neg,
  sin,
  cos,
  sqrt,
  pow_c,
  sinc_sqrt_half,
  cos_sqrt_half,
};

struct Node {
  std::int32_t a = -1;
  std::int32_t b = -1;
  double c = 0.0;
  Op op = Op::constant;
};

class Tape;

// Scalar handle used by traced computations. A Value is either attached to a
// tape (it names a node) or a detached literal; arithmetic between detached
// literals stays plain double arithmetic, so templated numeric code works
// unchanged with T = double or T = Value.
class Value {
 public:
  Value() = default;
  Value(double v) : c_(v) {}

  bool attached() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::int32_t id() const { return id_; }
  double literal() const { return c_; }

  Value& operator+=(const Value& rhs);
  Value& operator-=(const Value& rhs);
  Value& operator*=(const Value& rhs);
  Value& operator/=(const Value& rhs);

 private:
  friend class Tape;
  Value(Tape* t, std::int32_t id) : tape_(t), id_(id) {}

  Tape* tape_ = nullptr;
  std::int32_t id_ = -1;
  double c_ = 0.0;
};

Value operator+(const Value& a, const Value& b);
Value operator-(const Value& a, const Value& b);
Value operator*(const Value& a, const Value& b);
Value operator/(const Value& a, const Value& b);
Value operator-(const Value& a);
Value sin(const Value& a);
Value cos(const Value& a);
Value sqrt(const Value& a);
Value pow(const Value& a, double e);
Value sinc_sqrt_half(const Value& a);
Value cos_sqrt_half(const Value& a);

// Branch resolved when the condition is known; traced graphs never carry a
// data-dependent branch, so the condition must be a plain double.
inline double select(double cond, double a, double b) { return cond > 0.0 ? a : b; }
inline Value select(double cond, const Value& a, const Value& b) { return cond > 0.0 ? a : b; }

class Tape {
 public:
  explicit Tape(std::string name, std::vector<int> input_dims);

  const std::string& name() const { return name_; }
  const std::vector<int>& input_dims() const { return input_dims_; }
  int total_input_dim() const { return total_input_dim_; }
  int n_nodes() const { return static_cast<int>(nodes_.size()); }
  int n_outputs() const { return static_cast<int>(outputs_.size()); }
  const std::vector<bool>& block_used() const { return block_used_; }

  std::vector<std::vector<Value>> make_inputs();
  Value input(int block, int index);
  Value constant(double v);
  Value unary(Op op, const Value& a, double c = 0.0);
  Value binary(Op op, const Value& a, const Value& b);
  void set_outputs(const std::vector<Value>& outs);

  // Single forward sweep. node_vals has n_nodes entries. When n_lanes > 0,
  // tangents is a row-major n_nodes x n_lanes array and seed lanes follow
  // lane_offset_ per used block.
  void sweep(const double* const* blocks, double* node_vals, double* tangents,
             int n_lanes) const;

  int lane_offset(int block) const { return lane_offset_[block]; }
  int n_lanes() const { return n_lanes_; }
  std::int32_t output_node(int i) const { return outputs_[i]; }
  const Node& node(std::int32_t i) const { return nodes_[i]; }

  void write_dot(std::ostream& os) const;

 private:
  Value emit(Node n);
  void finalize();

  std::string name_;
  std::vector<int> input_dims_;
  std::vector<int> block_of_input_;
  int total_input_dim_ = 0;
  std::vector<Node> nodes_;
  std::vector<std::int32_t> outputs_;
  std::vector<bool> block_used_;
  std::vector<int> lane_offset_;
  int n_lanes_ = 0;
  std::vector<std::pair<std::uint64_t, std::int32_t>> const_cache_;
  bool sealed_ = false;

  friend class DiffFunction;
};

// A traced scalar-graph function. The mode selects what evaluation returns:
//   value:       the stacked outputs r (n_residuals)
//   jacobian:    dr/dz flattened row-major (n_residuals x total_input_dim)
//   gn_gradient: J^T r (total_input_dim)
//   gn_hessian:  J^T J flattened row-major (total_input_dim^2)
// Derivatives come from a dense forward-mode sweep over the recorded graph;
// input blocks no output depends on are skipped and their columns are zero.
class DiffFunction {
 public:
  enum class Mode { value, jacobian, gn_gradient, gn_hessian };

  DiffFunction() = default;
  DiffFunction(std::shared_ptr<const Tape> tape, Mode mode)
      : tape_(std::move(tape)), mode_(mode) {}

  bool valid() const { return tape_ != nullptr; }
  const std::string& name() const { return tape_->name(); }
  Mode mode() const { return mode_; }
  const std::vector<int>& input_dims() const { return tape_->input_dims(); }
  int total_input_dim() const { return tape_->total_input_dim(); }
  int n_residuals() const { return tape_->n_outputs(); }
  int output_dim() const;
  const std::vector<bool>& block_used() const { return tape_->block_used(); }

  Eigen::VectorXd operator()(const std::vector<Eigen::VectorXd>& inputs) const;

  // Residuals plus dense per-block Jacobians from one sweep. Blocks no output
  // depends on come back as empty matrices.
  void value_and_jacobian(const std::vector<Eigen::VectorXd>& inputs,
                          Eigen::VectorXd& value,
                          std::vector<Eigen::MatrixXd>& jac) const;

  DiffFunction with_mode(Mode m) const;

  // Replays the recorded graph onto the tape the given inputs live on, so a
  // traced function can be used as a building block inside another trace. If
  // every input is detached the replay happens numerically.
  std::vector<Value> call(const std::vector<std::vector<Value>>& inputs) const;

  // (row, block, index-in-block) triples of structurally nonzero Jacobian
  // entries; dense over every used block.
  std::vector<std::array<int, 3>> jacobian_sparsity() const;

  void write_dot(std::ostream& os) const { tape_->write_dot(os); }

  const Tape& tape() const { return *tape_; }

 private:
  void check_inputs(const std::vector<Eigen::VectorXd>& inputs) const;

  std::shared_ptr<const Tape> tape_;
  Mode mode_ = Mode::value;
};

using Builder = std::function<std::vector<Value>(const std::vector<std::vector<Value>>&)>;

// Runs the builder once on symbolic inputs and freezes the resulting graph.
// Constant subexpressions fold as they are recorded, and a constant that
// folds to NaN raises TraceError immediately.
DiffFunction trace(const std::string& name, const std::vector<int>& input_dims,
                   const Builder& builder);

DiffFunction jacobian(const DiffFunction& f);
std::pair<DiffFunction, DiffFunction> gauss_newton_pair(const DiffFunction& f);

}  // namespace skyline::ad
