#pragma once

// Bound constants measured from a metric/controller pair, the deterministic
// and stochastic tracking-error envelopes, and closed-loop verification
// against them.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "contraction_kit/cvstem.hpp"
#include "contraction_kit/losses.hpp"

namespace ckit {

using FeedbackLaw =
    std::function<Vector(const Vector& x, const Vector& x_d, const Vector& u_d, double t)>;

FeedbackLaw learned_controller(const ControllerNet& net);
/// Path-integral feedback for the given metric, input weight R and
/// quadrature panels.
FeedbackLaw geodesic_controller(const MetricField& M, const SystemModel& system, const Matrix& R,
                                int N_quad);

enum class BoundMode { kDeterministic, kStochastic };

std::string to_string(BoundMode mode);
BoundMode bound_mode_from_string(const std::string& s);

struct BoundConstants {
  double m_under = 1.0;
  double m_over = 1.0;
  double alpha = 1.0;
  double alpha_ell = 1.0;  // for the selected mode
  double alpha_d = 0.0;
  double alpha_G = 1.0;
  double alpha_s = 0.0;    // L_m ḡ²(α_G + 1/2)
  double L_u = 0.0;
  double L_m = 0.0;
  double eps0 = 0.0;
  double eps1 = 0.0;
  double d_bar = 0.0;
  double g_bar = 0.0;
  double C = 0.0;
  BoundMode mode = BoundMode::kDeterministic;

  /// Recomputes C and alpha_ell from the other fields.
  void refresh();
};

/// α − L_u ε₁ √(m̄/m̲).
double alpha_ell_deterministic(const BoundConstants& c);
/// α − (α_d/2 + L_u ε₁ √(m̄/m̲)).
double alpha_ell_stochastic(const BoundConstants& c);

/// ρ̄ b̄² ε_ℓ.
double eps1_from_metric_error(double rho_bar, double b_bar, double eps_ell);
/// Sets ε₀ = 0 and ε₁ = ρ̄ b̄² ε_ℓ, then refreshes the derived fields.
void apply_metric_error(BoundConstants& c, double rho_bar, double b_bar, double eps_ell);

class CertificateRefused : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Envelope = std::function<double(double t)>;

/// (V_ℓ(0)/√m̲) e^{−α_ℓ t} + ((L_u ε₀ + d̄)/α_ℓ) √(m̄/m̲) (1 − e^{−α_ℓ t}).
/// Throws CertificateRefused when α_ℓ ≤ 0.
Envelope bound_envelope_det(const BoundConstants& c, double V_ell_0);
/// Mean-square bound (C/2α_ℓ)(m̄/m̲) + E[V_sℓ(0)] e^{−2α_ℓ t}/m̲. Throws
/// CertificateRefused when α_ℓ ≤ 0.
Envelope bound_envelope_stoch(const BoundConstants& c, double V_sl_0_mean);

/// ∫₀¹ √(δqᵀ M(q) δq) ds on the straight line from x_d to x.
double path_length(const MetricField& M, const Vector& x_d, const Vector& x, double t,
                   int segments);
/// ∫₀¹ δqᵀ M(q) δq ds on the straight line from x_d to x.
double path_energy(const MetricField& M, const Vector& x_d, const Vector& x, double t,
                   int segments);

struct CertGridPoint {
  Vector x;
  Vector x_d;
  Vector u_d;
  double t = 0.0;
};

struct EstimateOptions {
  double alpha = 0.5;
  double alpha_d = 0.1;
  double alpha_G = 1.0;
  BoundMode mode = BoundMode::kDeterministic;
  int lipschitz_pairs = 2000;
  std::uint64_t seed = 0;
};

/// m̲, m̄ from the extreme eigenvalues of M over the grid; (ε₀, ε₁) from the
/// controller gap to `reference` when supplied; L_m by sampled Lipschitz
/// quotients of ∂M/∂x_i; L_u from the system.
BoundConstants estimate_constants(const MetricField& M, const FeedbackLaw& controller,
                                  const FeedbackLaw* reference, const SystemModel& system,
                                  const std::vector<CertGridPoint>& grid,
                                  const EstimateOptions& options);

/// max ‖M_a − M_b‖₂ over the grid.
double metric_error(const MetricField& a, const MetricField& b,
                    const std::vector<CertGridPoint>& grid);

/// x_d lattice over S_x (per_dim points per axis, capped), paired cyclically
/// with errors, inputs and times from `seeds` (or drawn from the system boxes
/// when empty).
std::vector<CertGridPoint> certification_grid(const SystemModel& system, int per_dim,
                                              std::size_t cap, const std::vector<Sample>& seeds,
                                              std::uint64_t seed);

struct ContractionSummary {
  std::vector<double> max_eigs;
  double worst = 0.0;
  double fraction_negative = 0.0;
};

/// max_eig(C_u) of the learned pair at every grid point.
ContractionSummary grid_contraction(const MetricNet& metric, const ControllerNet& controller,
                                    const SystemModel& system,
                                    const std::vector<CertGridPoint>& grid, double alpha);

/// Ṁ + 2 sym(M ∂h/∂x) + 2αM for an arbitrary metric field and feedback law,
/// with ∂u/∂x and Ṁ by central differences.
Matrix closed_loop_contraction(const MetricField& M, const FeedbackLaw& controller,
                               const SystemModel& system, const CertGridPoint& p, double alpha);

struct ClosedLoopOptions {
  double horizon = 5.0;
  double dt = 1e-3;
  BoundMode mode = BoundMode::kDeterministic;
  /// Radial disturbance magnitude d̄ · e/‖e‖.
  double d_bar = 0.0;
  int record_every = 10;
};

struct ClosedLoopRun {
  std::vector<double> t;
  std::vector<double> error;  // ‖x − x_d‖
  Vector x0, x_d0;
};

/// Integrates the plant and its target jointly: RK4 in deterministic mode,
/// Euler–Maruyama with diffusion G on the plant in stochastic mode.
ClosedLoopRun simulate_closed_loop(const SystemModel& system, const FeedbackLaw& controller,
                                   const ReferenceInput& input, const Vector& x_d0,
                                   const Vector& e0, const ClosedLoopOptions& options,
                                   RngStream* wiener);

struct VerifyOptions {
  BoundMode mode = BoundMode::kDeterministic;
  int n_traj = 100;
  double horizon = 5.0;
  double dt = 1e-3;
  double tol = 0.05;
  int record_every = 10;
  int quad_segments = 32;
  bool disturbance = true;
  std::uint64_t seed = 0;
  /// Trajectories whose full curves are kept in the report.
  int keep_records = 100;
  TargetOptions targets;
};

struct TrajectoryRecord {
  int index = 0;
  std::uint64_t target_seed = 0;
  std::vector<double> t;
  std::vector<double> error;
  std::vector<double> envelope;  // deterministic: ‖e‖ bound; stochastic: mean-square bound
  std::vector<double> x_e;
  double V0 = 0.0;
  double violation = 0.0;  // max relative excess over the envelope
  bool pass = true;
};

struct CertificateReport {
  BoundConstants constants;
  bool pass = false;
  double max_violation = 0.0;
  int failed_trajectory = -1;
  std::vector<TrajectoryRecord> trajectories;
  /// Stochastic ensemble statistics per recorded time.
  std::vector<double> t;
  std::vector<double> mean_square;
  std::vector<double> standard_error;
  std::vector<double> envelope;
  double mean_V0 = 0.0;
  std::optional<ContractionSummary> grid;
  std::string note;
};

/// Rolls out n_traj targets from generate_target with initial errors drawn
/// from the system's init_error_box, and checks them against the envelope
/// of the selected mode. Deterministic mode passes when every recorded
/// ‖e‖ ≤ envelope·(1 + tol); stochastic mode passes when the ensemble mean
/// square minus three standard errors stays below the envelope.
CertificateReport verify_tracking(const MetricField& M, const FeedbackLaw& controller,
                                  const SystemModel& system, const BoundConstants& constants,
                                  const VerifyOptions& options);

nlohmann::json constants_to_json(const BoundConstants& c);
nlohmann::json certificate_to_json(const CertificateReport& r);
/// Header: t,error_norm,envelope,x_e
void write_trajectory_csv(const std::string& path, const TrajectoryRecord& rec);

}  // namespace ckit
