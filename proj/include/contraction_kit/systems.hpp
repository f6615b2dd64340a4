#pragma once

// Benchmark control-affine systems  dx = (f(x,t) + B(x,t) u) dt + d dt + G dW,
// their Jacobians, input annihilators and sinusoidal target trajectories.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "contraction_kit/numerics.hpp"

namespace ckit {

/// Axis-aligned box [lo, hi].
struct Box {
  Vector lo;
  Vector hi;

  Eigen::Index dim() const { return lo.size(); }
  Vector midpoint() const { return 0.5 * (lo + hi); }
  Vector half_width() const { return 0.5 * (hi - lo); }
  bool contains(const Vector& x, double tol = 0.0) const;
  Vector sample(RngStream& rng) const;
};

using StateFunction = std::function<Vector(const Vector& x, double t)>;
using StateMatrixFunction = std::function<Matrix(const Vector& x, double t)>;
/// ∂b_i/∂x for input column i.
using InputColumnJacobian =
    std::function<Matrix(const Vector& x, double t, int column)>;

struct SystemModel {
  std::string name;
  int n = 0;  // state dimension
  int m = 0;  // input dimension

  StateFunction f;
  StateMatrixFunction B;
  StateMatrixFunction jac_f;
  InputColumnJacobian jac_b;
  /// Diffusion G(x,t) with ‖G‖_F ≤ g_bar.
  StateMatrixFunction G;

  double d_bar = 0.0;
  double g_bar = 0.0;
  double L_u = 0.0;    // input Lipschitz constant of f + Bu
  double b_bar = 0.0;  // sup ‖B‖ over the state box

  Box state_box;       // S_x
  Box input_box;       // S_u
  double t_min = 0.0;  // S_t = [t_min, t_max]
  double t_max = 10.0;

  /// Tracking errors used when forming training samples x = x_d + e.
  Box error_box;
  /// Initial target states x_d(0).
  Box init_box;
  /// Initial tracking errors e(0) = x(0) − x_d(0).
  Box init_error_box;

  /// Reference input offset and per-channel sinusoid amplitude for targets.
  Vector u_nominal;
  Vector reference_amplitude;

  Vector h(const Vector& x, const Vector& u, double t) const { return f(x, t) + B(x, t) * u; }
};

/// Planar VTOL with body-frame velocities; 6 states, 2 inputs
/// (total thrust, differential torque input).
SystemModel make_pvtol();

/// ẋ = a·x + u.
SystemModel make_scalar_test(double a);

/// ẋ = A x + B u with constant matrices.
SystemModel make_lti(const Matrix& A, const Matrix& B);

/// Default two-state oscillator  A = [[0,1],[−1,0]], B = e₂.
SystemModel make_lti();

/// Sets d̄ and ḡ, with diffusion G = (ḡ/√n) I so that ‖G‖_F = ḡ.
void set_disturbance(SystemModel& system, double d_bar, double g_bar);

/// Looks up "pvtol", "scalar" or "lti"; throws std::invalid_argument otherwise.
SystemModel make_system(const std::string& name);

/// sup ‖B(x,t)‖₂ over the given states.
double input_matrix_bound(const SystemModel& system, const std::vector<Vector>& states,
                          double t = 0.0);

/// Rows form an orthonormal basis of the left null space of B (B⊥ B = 0).
/// Returns a 0×n matrix when B has full row rank.
Matrix annihilator(const Matrix& B);

/// Σ_k (∂F/∂x_k) p_k by central differences, step 1e−5·(1+‖x‖).
Matrix directional_matrix_derivative(const StateMatrixFunction& F, const Vector& p,
                                     const Vector& x, double t);

/// Same contraction with analytic partials ∂F/∂x_k supplied by the caller.
Matrix directional_matrix_derivative(
    const std::function<Matrix(const Vector& x, double t, int k)>& partial,
    const Vector& p, const Vector& x, double t);

/// u(t) = nominal + amplitude ⊙ (1/F) Σ_k w_k sin(2π f_k t + φ_k), per channel.
struct ReferenceInput {
  Vector nominal;
  Vector amplitude;
  std::vector<double> frequencies_hz;
  Matrix weights;  // m × F, uniform in [−1, 1]
  Matrix phases;   // m × F, uniform in [0, 2π)

  Vector operator()(double t) const;
};

struct TargetTrajectory {
  std::vector<double> t;
  std::vector<Vector> x_d;
  std::vector<Vector> u_d;
  ReferenceInput input;
  std::uint64_t seed = 0;
  int attempts = 0;
};

class TargetGenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TargetOptions {
  double dt = kDefaultStep;
  std::vector<double> frequencies_hz{0.1, 0.2, 0.4, 0.8};
  /// Multiplies the drawn weights; 0 gives u_d ≡ nominal.
  double weight_scale = 1.0;
  int max_attempts = 20;
};

/// Draws x_d(0) in init_box and the sinusoid weights from
/// RngStream(seed, streams::kTargets); integrates the target dynamics with
/// RK4 and redraws whenever the path leaves the state box.
TargetTrajectory generate_target(const SystemModel& system, double horizon,
                                 std::uint64_t seed, const TargetOptions& options = {});

/// e(0) uniform in init_error_box, redrawn while ‖e(0)‖ < 1e−3.
Vector sample_initial_error(const SystemModel& system, RngStream& rng);

}  // namespace ckit
