#pragma once

// Learned dual metric W_L(x,t) = Θ(x,t)ᵀΘ(x,t) + m̄⁻¹ I and tracking
// controller u_L = w2(x,x_d) · tanh(w1(x,x_d) · (x − x_d)) + u_d.

#include <vector>

#include "contraction_kit/mlp.hpp"
#include "contraction_kit/systems.hpp"

namespace ckit {

struct MetricNet {
  Mlp theta;  // outputs Θ as an n×n matrix, row-major
  int n = 0;
  double m_bar = 1.0;    // W ⪰ m̄⁻¹ I
  double m_under = 1.0;  // boundedness target W ⪯ m̲⁻¹ I
  bool time_input = false;
  double time_scale = 1.0;        // network sees t / time_scale
  std::vector<int> state_inputs;  // state coordinates fed to the network

  /// One tanh layer per entry of `hidden`.
  static MetricNet create(int n, const std::vector<int>& hidden, double m_bar, double m_under,
                          RngStream& rng, bool time_input = false, double time_scale = 1.0,
                          std::vector<int> state_inputs = {});

  /// Number of derivative directions: n state partials, plus ∂/∂t when time_input.
  int direction_count() const { return n + (time_input ? 1 : 0); }
  Vector network_input(const Vector& x, double t) const;
  /// d(network input) / d(x, t), one column per direction.
  Matrix input_directions() const;
};

struct ControllerNet {
  Mlp w1;  // (x, x_d) ↦ channels × n
  Mlp w2;  // (x, x_d) ↦ m × channels
  int n = 0;
  int m = 0;
  int channels = 0;
  std::vector<int> state_inputs;

  static ControllerNet create(int n, int m, int channels, const std::vector<int>& hidden,
                              RngStream& rng, std::vector<int> state_inputs = {});

  Vector network_input(const Vector& x, const Vector& x_d) const;
  /// d(network input) / dx, one column per state coordinate.
  Matrix input_directions() const;
};

/// W, M and their exact partials at one point.
struct MetricPoint {
  Matrix theta;
  std::vector<Matrix> theta_partials;  // ∂Θ/∂x_k, then ∂Θ/∂t if time_input
  Matrix W;
  std::vector<Matrix> W_partials;      // aligned with theta_partials
  Matrix M;                            // W⁻¹
  MlpPass pass;
};

MetricPoint evaluate_metric(const MetricNet& metric, const Vector& x, double t);
Matrix eval_W(const MetricNet& metric, const Vector& x, double t);
Matrix eval_M(const MetricNet& metric, const Vector& x, double t);

struct ControllerPoint {
  Vector u;
  Matrix du_dx;  // m × n
  Vector error;  // x − x_d
  Matrix w1, w2;
  std::vector<Matrix> w1_partials, w2_partials;  // ∂/∂x_k
  Vector tau;    // tanh(w1 e)
  Matrix a_dot;  // ∂(w1 e)/∂x, channels × n
  MlpPass pass1, pass2;
};

ControllerPoint evaluate_controller(const ControllerNet& controller, const Vector& x,
                                    const Vector& x_d, const Vector& u_d);
Vector eval_u(const ControllerNet& controller, const Vector& x, const Vector& x_d,
              const Vector& u_d, double t);

struct MetricDerivatives {
  Matrix dW_dt;      // explicit time partial
  Matrix flow_dW;    // Σ_k ∂W/∂x_k ẋ_k
  Matrix dM_dt;      // −M (∂W/∂t + flow_dW) M
};

/// Derivatives of W_L along ẋ = f(x,t) + B(x,t) u.
MetricDerivatives metric_time_and_flow_derivatives(const MetricNet& metric,
                                                   const SystemModel& system, const Vector& x,
                                                   const Vector& u, double t);

/// Reshapes a row-major flattened vector.
Matrix reshape_row_major(const Vector& v, Eigen::Index rows, Eigen::Index cols);
Vector flatten_row_major(const Matrix& a);

}  // namespace ckit
