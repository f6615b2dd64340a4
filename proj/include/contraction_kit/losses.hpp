#pragma once

// Penalty losses for joint metric/controller learning: the sampled
// positive-semidefiniteness hinge, the closed-loop contraction matrix C_u, the
// weak CCM conditions C1/C2 and the W_L upper bound, with exact parameter
// gradients.

#include <map>
#include <optional>
#include <vector>

#include "contraction_kit/netmetric.hpp"

namespace ckit {

struct Sample {
  Vector x;
  Vector x_d;
  Vector u_d;
  double t = 0.0;
};

struct LossReport {
  double l_u = 0.0;   // contraction
  double l_c = 0.0;   // W_L upper bound
  double l_w1 = 0.0;  // weak condition C1
  double l_w2 = 0.0;  // weak condition C2 (Frobenius norms)
  double l_cv = 0.0;  // steady-state bound objective, reported only
  bool cv_enabled = false;

  double total() const { return l_u + l_c + l_w1 + l_w2 + (cv_enabled ? l_cv : 0.0); }
  LossReport& operator+=(const LossReport& o);
  LossReport& operator*=(double s);
};

/// (1/K) Σ max{0, −pᵢᵀ A pᵢ}. Zero whenever A ⪰ 0. With `grad` non-null the
/// derivative with respect to the entries of A is written there.
double l_pd(const Matrix& A, const std::vector<Vector>& points, Matrix* grad = nullptr);

/// Unit-sphere point sets keyed by dimension, shared by every sample of a
/// batch.
class SpherePoints {
 public:
  SpherePoints() = default;
  /// Draws `count` points for each dimension 1..max_dim.
  SpherePoints(int max_dim, int count, RngStream& rng);
  const std::vector<Vector>& get(int dim) const;
  void set(int dim, std::vector<Vector> points) { sets_[dim] = std::move(points); }

 private:
  std::map<int, std::vector<Vector>> sets_;
};

/// Ṁ + 2 sym(M ∂h/∂x) + 2αM at (x, u_L), with ∂h/∂x including the controller
/// Jacobian through both networks and the input-column Jacobians.
Matrix c_u_matrix(const MetricNet& metric, const ControllerNet& controller,
                  const SystemModel& system, const Sample& s, double alpha);

struct WeakCcm {
  Matrix C1;               // (n−r)×(n−r)
  std::vector<Matrix> C2;  // one per input column
};

WeakCcm weak_ccm_matrices(const MetricNet& metric, const SystemModel& system, const Vector& x,
                          double t, double alpha);

struct ParameterGradient {
  Mlp theta;
  Mlp w1;
  Mlp w2;

  static ParameterGradient zeros_like(const MetricNet& metric, const ControllerNet& controller);
  void add(const ParameterGradient& other);
  void scale(double s);
  Vector flatten() const;
};

struct LossOptions {
  double alpha = 0.5;
  /// Adds (C/2α_ℓ)(m̄_L/m̲_L) to the report; constant in the parameters.
  bool cv_enabled = false;
  double cv_scale = 0.0;  // C / (2 α_ℓ)
};

/// Per-sample loss; accumulates the parameter gradient into `grad` when
/// non-null.
LossReport sample_loss(const MetricNet& metric, const ControllerNet& controller,
                       const SystemModel& system, const Sample& s, const LossOptions& options,
                       const SpherePoints& points, ParameterGradient* grad);

struct BatchLoss {
  LossReport report;
  std::optional<ParameterGradient> gradient;
};

/// Batch mean of the per-sample losses with frozen sphere points. Throws
/// std::invalid_argument on an empty batch.
BatchLoss empirical_loss(const MetricNet& metric, const ControllerNet& controller,
                         const SystemModel& system, const std::vector<Sample>& batch,
                         const LossOptions& options, const SpherePoints& points,
                         bool with_gradient);

/// Draws K fresh points per dimension from `rng`, shared across the batch.
BatchLoss empirical_loss(const MetricNet& metric, const ControllerNet& controller,
                         const SystemModel& system, const std::vector<Sample>& batch,
                         const LossOptions& options, int K, RngStream& rng, bool with_gradient);

}  // namespace ckit
