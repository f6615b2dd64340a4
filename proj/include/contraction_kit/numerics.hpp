#pragma once

// Dense symmetric linear algebra, fixed-step integrators, path quadrature and
// seeded random streams shared by every other module.

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ckit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Raised when an integrator produces a non-finite state.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, double t)
      : std::runtime_error(what), time_(t) {}
  double time() const { return time_; }

 private:
  double time_;
};

class NumericsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reproducible random stream. Identical (seed, stream_id) pairs give
/// identical draw sequences.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  double uniform(double lo, double hi);
  double normal();
  /// Fills a vector with independent standard normal draws.
  Vector normal_vector(Eigen::Index n);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Named stream identifiers. All randomness of a run derives from one global
/// seed through these.
namespace streams {
inline constexpr std::uint64_t kDataset = 1;
inline constexpr std::uint64_t kSphere = 2;
inline constexpr std::uint64_t kWiener = 3;
inline constexpr std::uint64_t kTargets = 4;
inline constexpr std::uint64_t kInit = 5;
inline constexpr std::uint64_t kGrid = 6;
inline constexpr std::uint64_t kShuffle = 7;
}  // namespace streams

// ---------------------------------------------------------------------------
// Symmetric matrices

/// (A + Aᵀ) / 2
Matrix sym(const Matrix& a);

/// Relative tolerance used to accept a matrix as symmetric.
inline constexpr double kSymmetryTolerance = 1e-9;

bool is_symmetric(const Matrix& a, double rel_tol = kSymmetryTolerance);

struct SymmetricEigen {
  Vector values;   // ascending
  Matrix vectors;  // column k pairs with values(k)
};

/// Cyclic Jacobi eigensolver. Throws NumericsError if `a` is not square or
/// not symmetric within kSymmetryTolerance (relative); the input is
/// symmetrized before the sweep.
SymmetricEigen jacobi_eigen(const Matrix& a);

double min_eig_sym(const Matrix& a);
double max_eig_sym(const Matrix& a);

enum class Definiteness { kPsd, kNsd, kPd, kNd };

/// psd: λmin ≥ −tol, pd: λmin > tol, nsd: λmax ≤ tol, nd: λmax < −tol.
/// An empty (0×0) matrix satisfies every sense.
bool is_definite(const Matrix& a, Definiteness sense, double tol);

// ---------------------------------------------------------------------------
// Integrators

using VectorField = std::function<Vector(double t, const Vector& x)>;
using MatrixField = std::function<Matrix(double t, const Vector& x)>;

struct Trajectory {
  std::vector<double> t;
  std::vector<Vector> x;
};

inline constexpr double kDefaultStep = 1e-3;

/// Number of uniform steps covering [t0, t1] with a step no larger than dt.
int step_count(double t0, double t1, double dt);

/// One classical RK4 step.
Vector rk4_step(const VectorField& rhs, double t, const Vector& x, double h);

/// Fixed-step classical RK4 on the uniform grid t0 + k·h, h = (t1−t0)/steps,
/// endpoints included. Throws DivergenceError on a non-finite state.
Trajectory integrate_ode(const VectorField& rhs, const Vector& x0, double t0,
                         double t1, double dt = kDefaultStep);

/// Euler–Maruyama for dx = drift dt + G dW on the same grid as integrate_ode.
/// Wiener increments are √h-scaled standard normals drawn from `rng`, one
/// per column of G per step.
Trajectory integrate_sde(const VectorField& drift, const MatrixField& diffusion,
                         const Vector& x0, double t0, double t1, double dt,
                         RngStream& rng);

// ---------------------------------------------------------------------------
// Sampling and quadrature

/// K points uniform on the unit sphere of ℝⁿ (normalized Gaussians).
std::vector<Vector> sample_unit_sphere(int n, int count, RngStream& rng);

/// Integrand evaluated at a path point q with the path tangent dq = b − a.
using PathIntegrand = std::function<Vector(const Vector& q, const Vector& dq)>;

/// Composite trapezoid rule for ∫₀¹ g(a + s(b−a), b−a) ds on N segments.
/// Returns a zero vector when a == b.
Vector path_quadrature(const PathIntegrand& integrand, const Vector& a,
                       const Vector& b, int segments);

// ---------------------------------------------------------------------------
// Concurrency

/// Caps worker threads for parallel_for. 0 selects hardware concurrency.
void set_worker_threads(int threads);
int worker_threads();

/// Runs body(i) for i in [0, count). Work items are independent; callers
/// reduce per-item results in index order.
void parallel_for(int count, const std::function<void(int)>& body);

}  // namespace ckit
