#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "skyline/autodiff.hpp"
#include "skyline/horizon.hpp"

namespace skyline::transcription {

class TranscriptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class IntegratorKind { euler, rk4, leapfrog };

IntegratorKind integrator_from_string(const std::string& name);
const char* integrator_name(IntegratorKind kind);

struct CollocationSpec {
  int degree = 3;
};

// Radau collocation points on (0, 1] for degree 1..5 (last point is 1).
std::vector<double> radau_points(int degree);

// One explicit step of xdot = f(x, u). For leapfrog the state must be
// partitioned [configuration, velocity] with the velocity starting at
// velocity_offset; a unit quaternion block at quaternion_offset (paired with
// a base-local angular velocity at velocity rows 3..5) is advanced by the
// exact exponential map instead of an additive drift. The Value overload
// records the step onto the tape the inputs live on, so defect functions can
// be traced by composition; passing detached values evaluates numerically.
std::vector<ad::Value> integrate(const ad::DiffFunction& f,
                                 const std::vector<ad::Value>& x,
                                 const std::vector<ad::Value>& u, double dt,
                                 IntegratorKind kind, int velocity_offset = -1,
                                 int quaternion_offset = -1);

Eigen::VectorXd integrate(const ad::DiffFunction& f, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& u, double dt,
                          IntegratorKind kind, int velocity_offset = -1,
                          int quaternion_offset = -1);

// Adds the shooting defect x_{k+1} - Phi(x_k, u_k) = 0 on every interval
// ('ms_defect', marked as defect rows) and, when the problem declares a
// quaternion block, a unit-norm equality at every node ('quat_norm').
void apply_multiple_shooting(horizon::HorizonProblem& prb, IntegratorKind kind);

// Radau collocation: d stage states per interval become extra decision
// variables; adds 'collocation' (polynomial slope = dt * f at each point) and
// 'continuity' (last stage equals the next node) equalities.
void apply_collocation(horizon::HorizonProblem& prb, const CollocationSpec& spec);

}  // namespace skyline::transcription
