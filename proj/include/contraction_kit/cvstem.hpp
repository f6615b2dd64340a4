#pragma once

// Constant-metric convex synthesis over a sampled grid, its Schur-complement
// form, and the path-integral feedback law built from a metric.

#include <functional>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "contraction_kit/netmetric.hpp"

namespace ckit {

struct GridPoint {
  Vector x;
  double t = 0.0;
};

/// C = ḡ²(2/α_G + 1) + (L_u ε₀ + d̄)²/α_d. The second term is dropped when
/// L_u ε₀ + d̄ = 0; otherwise α_d must be positive.
double disturbance_constant(double g_bar, double d_bar, double L_u, double eps0, double alpha_G,
                            double alpha_d);

struct CvstemProblem {
  SystemModel system;
  std::vector<GridPoint> grid;
  double alpha = 1.0;
  /// Stochastic offset L_m ḡ²(α_G + 1/2); 0 for the deterministic constraint.
  double alpha_s = 0.0;
  double alpha_d = 0.1;
  double alpha_G = 1.0;
  Matrix R;                 // empty means identity
  std::optional<double> C;  // defaults to disturbance_constant of the system
  double chi_max = 1e6;
  double nu_max = 1e6;
  /// Lower end of the ν search; M = ν W̄⁻¹ is rescaled freely, so any
  /// feasible ν above this is equivalent for the bound.
  double nu_min = 1e-3;
  double tolerance = 1e-7;
  double chi_width = 1e-4;
  int max_iterations = 4000;

  Matrix input_weight() const;
  double disturbance() const;
  /// C / (2 α_ℓ) with α_ℓ = α − α_d/2.
  double objective_scale() const;
};

struct CvstemSolution {
  double nu = 0.0;
  double chi = 0.0;
  Matrix W_bar;
  double objective = 0.0;
  std::vector<double> margins;  // block margin per grid point
  double killing_margin = 0.0;  // largest killing residual norm
  int iterations = 0;
};

class CvstemInfeasible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 2 sym(∂f/∂x W̄) − ν B R⁻¹ Bᵀ for constant W̄.
Matrix h_matrix(const CvstemProblem& p, double nu, const Matrix& W_bar, const Vector& x, double t);

/// [[H + 2αW̄, W̄], [W̄, −(ν/α_s) I]], or H + 2αW̄ when α_s = 0.
Matrix lmi_block(const CvstemProblem& p, double nu, const Matrix& W_bar, const Vector& x,
                 double t);

struct LmiResiduals {
  double block_margin = 0.0;
  std::vector<double> killing_margins;
  std::pair<double, double> bound_margins;  // max_eig(I − W̄), max_eig(W̄ − χI)

  bool feasible(double tol) const;
};

LmiResiduals lmi_residuals(const CvstemProblem& p, double nu, double chi, const Matrix& W_bar,
                           const Vector& x, double t);

/// H + 2αW̄ + α_s W̄²/ν. Throws std::invalid_argument when ν ≤ 0 or α_s ≤ 0.
Matrix schur_equivalent(const CvstemProblem& p, double nu, const Matrix& W_bar, const Vector& x,
                        double t);

/// Bisection on χ with a projected subgradient feasibility search on W̄ at
/// ν = ν_max, followed by a bisection for the smallest feasible ν ≥ ν_min. Throws
/// CvstemInfeasible when χ_max fails and std::invalid_argument on an empty
/// grid.
CvstemSolution solve_cvstem(const CvstemProblem& p);

using MetricField = std::function<Matrix(const Vector& x, double t)>;

/// M = ν W̄⁻¹.
MetricField cvstem_metric(const CvstemSolution& s);
MetricField learned_metric(const MetricNet& net);

/// u_d − ∫₀¹ R⁻¹ B(q)ᵀ M(q) (x − x_d) ds along q = x_d + s (x − x_d),
/// trapezoid rule with N_quad panels. Empty R means identity.
Vector geodesic_control(const MetricField& M, const SystemModel& system, const Vector& x,
                        const Vector& x_d, const Vector& u_d, double t, const Matrix& R,
                        int N_quad);
Vector geodesic_control(const CvstemSolution& s, const SystemModel& system, const Vector& x,
                        const Vector& x_d, const Vector& u_d, double t, const Matrix& R,
                        int N_quad);
Vector geodesic_control(const MetricNet& net, const SystemModel& system, const Vector& x,
                        const Vector& x_d, const Vector& u_d, double t, const Matrix& R,
                        int N_quad);

/// Uniform lattice with `per_dim` points per coordinate (the midpoint when
/// per_dim = 1). per_dim is lowered until the point count fits within `cap`.
std::vector<Vector> lattice(const Box& box, int per_dim, std::size_t cap = 100000);

}  // namespace ckit
