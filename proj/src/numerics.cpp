#include "contraction_kit/numerics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace ckit {

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream_id & 0xffffffffu),
                    static_cast<std::uint32_t>(stream_id >> 32), 0x9e3779b9u};
  engine_.seed(seq);
}

double RngStream::uniform(double lo, double hi) {
  // 53 random mantissa bits; avoids implementation-specific distributions.
  const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

double RngStream::normal() { return normal_(engine_); }

Vector RngStream::normal_vector(Eigen::Index n) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
  return v;
}

Matrix sym(const Matrix& a) {
  if (a.rows() != a.cols()) throw NumericsError("sym: matrix is not square");
  return 0.5 * (a + a.transpose());
}

bool is_symmetric(const Matrix& a, double rel_tol) {
  if (a.rows() != a.cols()) return false;
  if (a.size() == 0) return true;
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  return (a - a.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

SymmetricEigen jacobi_eigen(const Matrix& input) {
  if (input.rows() != input.cols())
    throw NumericsError("jacobi_eigen: matrix is not square");
  if (!input.allFinite())
    throw NumericsError("jacobi_eigen: non-finite entries");
  if (!is_symmetric(input))
    throw NumericsError("jacobi_eigen: matrix is not symmetric");

  const Eigen::Index n = input.rows();
  Matrix a = sym(input);
  Matrix v = Matrix::Identity(n, n);

  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    const double diag = a.diagonal().squaredNorm();
    if (off <= 1e-30 * std::max(diag, 1e-300) || off == 0.0) break;

    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        // A ← Jᵀ A J with the rotation acting on rows/cols p and q.
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index l, Eigen::Index r) {
    return a(l, l) < a(r, r);
  });
  SymmetricEigen out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto src = order[static_cast<std::size_t>(i)];
    out.values(i) = a(src, src);
    out.vectors.col(i) = v.col(src);
  }
  return out;
}

double min_eig_sym(const Matrix& a) {
  if (a.size() == 0) throw NumericsError("min_eig_sym: empty matrix");
  return jacobi_eigen(a).values(0);
}

double max_eig_sym(const Matrix& a) {
  if (a.size() == 0) throw NumericsError("max_eig_sym: empty matrix");
  const auto eig = jacobi_eigen(a);
  return eig.values(eig.values.size() - 1);
}

bool is_definite(const Matrix& a, Definiteness sense, double tol) {
  if (a.size() == 0) return true;
  const auto values = jacobi_eigen(a).values;
  const double lo = values(0);
  const double hi = values(values.size() - 1);
  switch (sense) {
    case Definiteness::kPsd:
      return lo >= -tol;
    case Definiteness::kPd:
      return lo > tol;
    case Definiteness::kNsd:
      return hi <= tol;
    case Definiteness::kNd:
      return hi < -tol;
  }
  return false;
}

int step_count(double t0, double t1, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("integrator: dt must be positive");
  if (!(t1 > t0)) throw std::invalid_argument("integrator: t1 must exceed t0");
  const double ratio = (t1 - t0) / dt;
  return std::max(1, static_cast<int>(std::ceil(ratio - 1e-9)));
}

Vector rk4_step(const VectorField& rhs, double t, const Vector& x, double h) {
  const Vector k1 = rhs(t, x);
  const Vector k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1);
  const Vector k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2);
  const Vector k4 = rhs(t + h, x + h * k3);
  return x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4);
}

Trajectory integrate_ode(const VectorField& rhs, const Vector& x0, double t0,
                         double t1, double dt) {
  const int steps = step_count(t0, t1, dt);
  const double h = (t1 - t0) / steps;
  Trajectory out;
  out.t.reserve(static_cast<std::size_t>(steps) + 1);
  out.x.reserve(static_cast<std::size_t>(steps) + 1);
  out.t.push_back(t0);
  out.x.push_back(x0);
  Vector x = x0;
  for (int k = 0; k < steps; ++k) {
    const double t = t0 + k * h;
    x = rk4_step(rhs, t, x, h);
    const double tn = (k + 1 == steps) ? t1 : t0 + (k + 1) * h;
    if (!x.allFinite()) throw DivergenceError("integrate_ode: non-finite state", tn);
    out.t.push_back(tn);
    out.x.push_back(x);
  }
  return out;
}

Trajectory integrate_sde(const VectorField& drift, const MatrixField& diffusion,
                         const Vector& x0, double t0, double t1, double dt,
                         RngStream& rng) {
  const int steps = step_count(t0, t1, dt);
  const double h = (t1 - t0) / steps;
  const double sqrt_h = std::sqrt(h);
  Trajectory out;
  out.t.reserve(static_cast<std::size_t>(steps) + 1);
  out.x.reserve(static_cast<std::size_t>(steps) + 1);
  out.t.push_back(t0);
  out.x.push_back(x0);
  Vector x = x0;
  for (int k = 0; k < steps; ++k) {
    const double t = t0 + k * h;
    const Matrix g = diffusion(t, x);
    Vector next = x + h * drift(t, x);
    if (g.cols() > 0) next += g * (sqrt_h * rng.normal_vector(g.cols()));
    x = std::move(next);
    const double tn = (k + 1 == steps) ? t1 : t0 + (k + 1) * h;
    if (!x.allFinite()) throw DivergenceError("integrate_sde: non-finite state", tn);
    out.t.push_back(tn);
    out.x.push_back(x);
  }
  return out;
}

std::vector<Vector> sample_unit_sphere(int n, int count, RngStream& rng) {
  if (n < 1 || count < 1)
    throw std::invalid_argument("sample_unit_sphere: n and count must be >= 1");
  std::vector<Vector> points;
  points.reserve(static_cast<std::size_t>(count));
  while (static_cast<int>(points.size()) < count) {
    Vector g = rng.normal_vector(n);
    const double norm = g.norm();
    if (norm < 1e-12) continue;
    points.push_back(g / norm);
  }
  return points;
}

Vector path_quadrature(const PathIntegrand& integrand, const Vector& a,
                       const Vector& b, int segments) {
  if (segments < 1) throw std::invalid_argument("path_quadrature: segments must be >= 1");
  if (a.size() != b.size()) throw std::invalid_argument("path_quadrature: endpoint size mismatch");
  const Vector dq = b - a;
  Vector total = 0.5 * (integrand(a, dq) + integrand(b, dq));
  for (int i = 1; i < segments; ++i) {
    const double s = static_cast<double>(i) / segments;
    total += integrand(a + s * dq, dq);
  }
  if (dq.isZero(0.0)) return Vector::Zero(total.size());
  return total / segments;
}

namespace {
std::atomic<int> g_threads{0};
}

void set_worker_threads(int threads) { g_threads = std::max(0, threads); }

int worker_threads() {
  const int requested = g_threads.load();
  if (requested > 0) return requested;
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(int count, const std::function<void(int)>& body) {
  const int workers = std::min(worker_threads(), count);
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (int i = next++; i < count; i = next++) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers - 1));
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace ckit
