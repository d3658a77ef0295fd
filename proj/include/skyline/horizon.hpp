#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "skyline/autodiff.hpp"

namespace skyline::horizon {

class HorizonError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class VariableKind { state, input, stage, parameter };
enum class TermKind { constraint, cost };

// Subset of the node grid 0..N a term or bound applies to. Construction is
// horizon-independent; resolve() validates against the actual horizon and the
// highest node the term can be instantiated at.
class NodeSet {
 public:
  enum class Kind { all, range, single, list, final };

  static NodeSet all();
  static NodeSet range(int first, int last);  // inclusive
  static NodeSet single(int node);
  static NodeSet list(std::vector<int> nodes);
  static NodeSet final();

  // max_node is the largest instantiable node (N for state-only terms, N-1
  // when the term touches inputs, stages or next-node states). 'all' clips to
  // it; explicit nodes beyond it are errors.
  std::vector<int> resolve(int n_nodes, int max_node) const;

  Kind kind() const { return kind_; }

 private:
  Kind kind_ = Kind::all;
  int first_ = 0, last_ = 0;
  std::vector<int> list_;
};

struct VariableDecl {
  std::string name;
  VariableKind kind = VariableKind::state;
  int dim = 0;
  int instances = 0;  // N+1 for states/parameters, N for inputs/stages
  Eigen::MatrixXd lower, upper;  // dim x instances, default +-inf
  Eigen::MatrixXd guess;         // dim x instances, default 0
  Eigen::MatrixXd values;        // parameters only: dim x instances
  bool guess_set = false;
  bool mirror_state_guess = false;  // stages: default guess copies the node state
};

// One input block of a term function: the named variable evaluated at
// node + node_offset. Offset 1 reaches the next node (shooting defects).
struct Binding {
  std::string variable;
  int node_offset = 0;
};

struct TermDecl {
  std::string name;
  TermKind kind = TermKind::constraint;
  ad::DiffFunction fn;
  std::vector<Binding> bindings;
  NodeSet nodes = NodeSet::all();
  Eigen::VectorXd lower, upper;  // constraints only
  double weight = 1.0;           // costs only
  bool linear_cost = false;      // cost = weight * sum(r) instead of 0.5*weight*|r|^2
  bool is_defect = false;        // dynamics defect rows (gap-contracted by ilqr)
};

struct HorizonProblem {
  int n_nodes = 0;  // N: states live on 0..N, inputs on 0..N-1
  double dt = 0.0;
  ad::DiffFunction dynamics;  // xdot = f(x, u), input blocks [nx, nu]
  std::vector<VariableDecl> variables;
  std::vector<TermDecl> terms;
  bool transcribed = false;
  // Structure annotations used by transcription: offset of a unit-quaternion
  // block inside the packed state (-1 if none) and start of the velocity
  // block for the configuration/velocity partition (-1 if not partitioned).
  int quaternion_offset = -1;
  int velocity_offset = -1;

  int nx() const;
  int nu() const;
  int n_stage() const;
  const VariableDecl& variable(const std::string& name) const;
  VariableDecl& variable(const std::string& name);
  bool has_variable(const std::string& name) const;
};

// Assembled quadratic-cost NLP over the flat decision vector. Decision layout
// is every state node, then every input node, then every stage node; within a
// node the variables appear in declaration order.
struct Nlp {
  struct Block {
    std::string term;
    int node = 0;
    ad::DiffFunction fn;
    std::vector<int> col_offsets;        // per fn input block; -1 = fixed values
    std::vector<Eigen::VectorXd> params; // values for the -1 blocks
    int row_offset = 0;                  // constraints: first row in the stack
    Eigen::VectorXd lower, upper;        // constraints
    double weight = 1.0;                 // costs
    bool linear_cost = false;
    bool is_defect = false;
  };

  struct VarLayout {
    std::string name;
    VariableKind kind = VariableKind::state;
    int dim = 0;
    int instances = 0;
    int within = 0;  // offset inside the node slice of its section
  };

  int n_decision = 0;
  int n_constraint_rows = 0;
  int n_nodes = 0;
  double dt = 0.0;
  int nx = 0, nu = 0, n_stage = 0;
  Eigen::VectorXd lower, upper, guess;
  std::vector<Block> constraints;
  std::vector<Block> costs;
  std::vector<VarLayout> layout;

  // Flat offset of one variable instance.
  int offset(const std::string& name, int node) const;

  // Gathered input blocks for one term block (decision slices or parameters).
  std::vector<Eigen::VectorXd> gather(const Block& b, const Eigen::VectorXd& z) const;

  double eval_objective(const Eigen::VectorXd& z) const;
  Eigen::VectorXd eval_constraints(const Eigen::VectorXd& z) const;

  std::map<std::string, Eigen::MatrixXd> unpack(const Eigen::VectorXd& z) const;
  Eigen::VectorXd pack(const std::map<std::string, Eigen::MatrixXd>& vals) const;
};

HorizonProblem create_problem(int n_nodes);

VariableDecl& create_variable(HorizonProblem& prb, const std::string& name,
                              VariableKind kind, int dim);

void set_bounds(HorizonProblem& prb, const std::string& name,
                const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                const NodeSet& nodes);

void set_guess(HorizonProblem& prb, const std::string& name,
               const Eigen::VectorXd& value, const NodeSet& nodes);

void set_parameter_values(HorizonProblem& prb, const std::string& name, int node,
                          const Eigen::VectorXd& value);
void set_parameter_values(HorizonProblem& prb, const std::string& name,
                          const Eigen::MatrixXd& values);

TermDecl& create_constraint(HorizonProblem& prb, const std::string& name,
                            ad::DiffFunction fn, std::vector<Binding> bindings,
                            const NodeSet& nodes,
                            const Eigen::VectorXd& lower = {},
                            const Eigen::VectorXd& upper = {});

TermDecl& create_cost(HorizonProblem& prb, const std::string& name,
                      ad::DiffFunction fn, std::vector<Binding> bindings,
                      const NodeSet& nodes, double weight = 1.0,
                      bool linear = false);

void set_dynamics(HorizonProblem& prb, ad::DiffFunction xdot, double dt);

Nlp assemble_nlp(const HorizonProblem& prb);

// JSON summary (variables, terms, node sets, dims) for CLI --describe.
std::string describe(const HorizonProblem& prb);

}  // namespace skyline::horizon
