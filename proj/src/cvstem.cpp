#include "contraction_kit/cvstem.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ckit {

double disturbance_constant(double g_bar, double d_bar, double L_u, double eps0, double alpha_G,
                            double alpha_d) {
  double c = 0.0;
  if (g_bar != 0.0) {
    if (!(alpha_G > 0.0)) throw std::invalid_argument("disturbance_constant: alpha_G must be > 0");
    c += g_bar * g_bar * (2.0 / alpha_G + 1.0);
  }
  const double drift = L_u * eps0 + d_bar;
  if (drift != 0.0) {
    if (!(alpha_d > 0.0)) throw std::invalid_argument("disturbance_constant: alpha_d must be > 0");
    c += drift * drift / alpha_d;
  }
  return c;
}

Matrix CvstemProblem::input_weight() const {
  return R.size() == 0 ? Matrix::Identity(system.m, system.m) : R;
}

double CvstemProblem::disturbance() const {
  return C ? *C : disturbance_constant(system.g_bar, system.d_bar, system.L_u, 0.0, alpha_G, alpha_d);
}

double CvstemProblem::objective_scale() const {
  const double alpha_ell = alpha - 0.5 * alpha_d;
  if (!(alpha_ell > 0.0)) throw std::invalid_argument("cvstem: need alpha > alpha_d / 2");
  return disturbance() / (2.0 * alpha_ell);
}

namespace {

/// Quantities at a grid point that do not depend on (ν, W̄).
struct GridData {
  Matrix J;     // ∂f/∂x
  Matrix BRB;   // B R⁻¹ Bᵀ
  std::vector<Matrix> Db;
};

GridData grid_data(const CvstemProblem& p, const Matrix& R_inv, const Vector& x, double t) {
  GridData g;
  g.J = p.system.jac_f(x, t);
  const Matrix B = p.system.B(x, t);
  g.BRB = B * R_inv * B.transpose();
  for (int j = 0; j < p.system.m; ++j) g.Db.push_back(p.system.jac_b(x, t, j));
  return g;
}

Matrix block_from(const GridData& g, const CvstemProblem& p, double nu, const Matrix& W) {
  const Matrix JW = g.J * W;
  Matrix top = JW + JW.transpose() - nu * g.BRB + 2.0 * p.alpha * W;
  if (p.alpha_s <= 0.0) return top;
  const auto n = W.rows();
  Matrix blk(2 * n, 2 * n);
  blk << top, W, W, -(nu / p.alpha_s) * Matrix::Identity(n, n);
  return blk;
}

Matrix killing_from(const Matrix& Db, const Matrix& W) {
  const Matrix DW = Db * W;
  return DW + DW.transpose();
}

Matrix R_inverse(const CvstemProblem& p) {
  const Matrix R = p.input_weight();
  if (R.rows() != p.system.m || R.cols() != p.system.m || !is_definite(R, Definiteness::kPd, 0.0))
    throw std::invalid_argument("cvstem: R must be symmetric positive definite of size m");
  return sym(R.llt().solve(Matrix::Identity(p.system.m, p.system.m)));
}

Matrix project_bounds(const Matrix& W, double chi) {
  const SymmetricEigen e = jacobi_eigen(sym(W));
  const Vector clipped = e.values.cwiseMax(1.0).cwiseMin(chi);
  return sym(e.vectors * clipped.asDiagonal() * e.vectors.transpose());
}

/// Largest constraint violation over the grid and a subgradient with respect
/// to W̄.
struct Violation {
  double value = -std::numeric_limits<double>::infinity();
  Matrix subgradient;
};

Violation worst_violation(const std::vector<GridData>& data, const CvstemProblem& p, double nu,
                          const Matrix& W) {
  const auto n = W.rows();
  Violation v;
  for (const auto& g : data) {
    const Matrix blk = block_from(g, p, nu, W);
    const SymmetricEigen e = jacobi_eigen(sym(blk));
    const double top = e.values(e.values.size() - 1);
    if (top > v.value) {
      const Vector vec = e.vectors.col(e.vectors.cols() - 1);
      const Vector v1 = vec.head(n);
      const Matrix P = v1 * v1.transpose();
      Matrix grad = g.J.transpose() * P + P * g.J + 2.0 * p.alpha * P;
      if (p.alpha_s > 0.0) {
        const Vector v2 = vec.tail(n);
        const Matrix cross = v1 * v2.transpose();
        grad += cross + cross.transpose();
      }
      v.value = top;
      v.subgradient = sym(grad);
    }
    for (const auto& Db : g.Db) {
      const Matrix K = killing_from(Db, W);
      const double norm = K.norm();
      if (norm > v.value) {
        v.value = norm;
        const Matrix U = K / norm;
        v.subgradient = sym(Db.transpose() * U + U * Db);
      }
    }
  }
  return v;
}

struct Search {
  bool feasible = false;
  Matrix W;
  double value = 0.0;
  int iterations = 0;
};

/// Polyak-step projected subgradient descent on the worst violation over
/// I ⪯ W̄ ⪯ χI, stopping at the first iterate with no violation.
Search find_feasible(const std::vector<GridData>& data, const CvstemProblem& p, double nu,
                     double chi, const Matrix& start) {
  Search s;
  Matrix W = project_bounds(start, chi);
  s.W = W;
  s.value = std::numeric_limits<double>::infinity();
  const double target = 1e-6 * std::max(1.0, chi);
  for (int it = 0; it < p.max_iterations; ++it) {
    const Violation v = worst_violation(data, p, nu, W);
    s.iterations = it + 1;
    if (v.value < s.value) {
      s.value = v.value;
      s.W = W;
    }
    if (v.value <= 0.0) {
      s.feasible = true;
      return s;
    }
    const double g2 = v.subgradient.squaredNorm();
    if (g2 == 0.0) break;
    W = project_bounds(W - ((v.value + target) / g2) * v.subgradient, chi);
  }
  return s;
}

}  // namespace

Matrix h_matrix(const CvstemProblem& p, double nu, const Matrix& W_bar, const Vector& x, double t) {
  const Matrix JW = p.system.jac_f(x, t) * W_bar;
  const Matrix B = p.system.B(x, t);
  return JW + JW.transpose() - nu * B * R_inverse(p) * B.transpose();
}

Matrix lmi_block(const CvstemProblem& p, double nu, const Matrix& W_bar, const Vector& x,
                 double t) {
  return block_from(grid_data(p, R_inverse(p), x, t), p, nu, W_bar);
}

bool LmiResiduals::feasible(double tol) const {
  if (block_margin > tol || bound_margins.first > tol || bound_margins.second > tol) return false;
  for (double k : killing_margins)
    if (k > tol) return false;
  return true;
}

LmiResiduals lmi_residuals(const CvstemProblem& p, double nu, double chi, const Matrix& W_bar,
                           const Vector& x, double t) {
  const GridData g = grid_data(p, R_inverse(p), x, t);
  LmiResiduals r;
  r.block_margin = max_eig_sym(sym(block_from(g, p, nu, W_bar)));
  for (const auto& Db : g.Db) r.killing_margins.push_back(killing_from(Db, W_bar).norm());
  const auto n = W_bar.rows();
  r.bound_margins = {max_eig_sym(sym(Matrix::Identity(n, n) - W_bar)),
                     max_eig_sym(sym(W_bar - chi * Matrix::Identity(n, n)))};
  return r;
}

Matrix schur_equivalent(const CvstemProblem& p, double nu, const Matrix& W_bar, const Vector& x,
                        double t) {
  if (!(nu > 0.0) || !(p.alpha_s > 0.0))
    throw std::invalid_argument("schur_equivalent: requires nu > 0 and alpha_s > 0");
  return h_matrix(p, nu, W_bar, x, t) + 2.0 * p.alpha * W_bar + (p.alpha_s / nu) * W_bar * W_bar;
}

CvstemSolution solve_cvstem(const CvstemProblem& p) {
  if (p.grid.empty()) throw std::invalid_argument("solve_cvstem: empty grid");
  if (!(p.alpha > 0.0)) throw std::invalid_argument("solve_cvstem: alpha must be > 0");
  if (p.alpha_s < 0.0) throw std::invalid_argument("solve_cvstem: alpha_s must be >= 0");
  if (!(p.nu_min > 0.0) || p.nu_min > p.nu_max)
    throw std::invalid_argument("solve_cvstem: need 0 < nu_min <= nu_max");
  const Matrix R_inv = R_inverse(p);
  std::vector<GridData> data(p.grid.size());
  parallel_for(static_cast<int>(p.grid.size()), [&](int i) {
    const auto& g = p.grid[static_cast<std::size_t>(i)];
    data[static_cast<std::size_t>(i)] = grid_data(p, R_inv, g.x, g.t);
  });
  const int n = p.system.n;
  int iterations = 0;

  auto attempt = [&](double chi, const Matrix& start) {
    Search s = find_feasible(data, p, p.nu_max, chi, start);
    iterations += s.iterations;
    return s;
  };

  double chi = 1.0;
  Search best = attempt(1.0, Matrix::Identity(n, n));
  if (!best.feasible) {
    Search top = attempt(p.chi_max, Matrix::Identity(n, n));
    if (!top.feasible)
      throw CvstemInfeasible("solve_cvstem: no feasible metric with chi <= " +
                             std::to_string(p.chi_max) + " (worst margin " +
                             std::to_string(top.value) + ")");
    double lo = 1.0, hi = p.chi_max;
    best = top;
    while (hi - lo > p.chi_width) {
      const double mid = hi / lo > 4.0 ? std::sqrt(lo * hi) : 0.5 * (lo + hi);
      Search s = attempt(mid, best.W);
      if (s.feasible) {
        hi = mid;
        best = std::move(s);
      } else {
        lo = mid;
      }
    }
    chi = hi;
  }

  // Smallest ν ≥ ν_min keeping the witness feasible; the constraints are
  // monotone in ν.
  auto value_at = [&](double nu) { return worst_violation(data, p, nu, best.W).value; };
  double nu_hi = p.nu_max;
  double nu_lo = p.nu_min;
  if (value_at(nu_lo) <= 0.0) {
    nu_hi = nu_lo;
  } else {
    while (nu_hi - nu_lo > 1e-9 * nu_hi) {
      const double mid = nu_hi / nu_lo > 4.0 ? std::sqrt(nu_lo * nu_hi) : 0.5 * (nu_lo + nu_hi);
      if (value_at(mid) <= 0.0)
        nu_hi = mid;
      else
        nu_lo = mid;
    }
  }

  CvstemSolution sol;
  sol.nu = nu_hi;
  sol.chi = chi;
  sol.W_bar = best.W;
  sol.objective = p.objective_scale() * chi;
  sol.iterations = iterations;
  sol.margins.resize(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    sol.margins[i] = max_eig_sym(sym(block_from(data[i], p, sol.nu, sol.W_bar)));
    for (const auto& Db : data[i].Db)
      sol.killing_margin = std::max(sol.killing_margin, killing_from(Db, sol.W_bar).norm());
  }
  return sol;
}

MetricField cvstem_metric(const CvstemSolution& s) {
  if (!(s.nu > 0.0)) throw std::invalid_argument("cvstem_metric: nu must be > 0");
  const Matrix M = sym(s.nu * s.W_bar.llt().solve(Matrix::Identity(s.W_bar.rows(), s.W_bar.cols())));
  return [M](const Vector&, double) { return M; };
}

MetricField learned_metric(const MetricNet& net) {
  return [net](const Vector& x, double t) { return eval_M(net, x, t); };
}

Vector geodesic_control(const MetricField& M, const SystemModel& system, const Vector& x,
                        const Vector& x_d, const Vector& u_d, double t, const Matrix& R,
                        int N_quad) {
  if (N_quad < 1) throw std::invalid_argument("geodesic_control: N_quad must be >= 1");
  const Matrix weight = R.size() == 0 ? Matrix::Identity(system.m, system.m) : R;
  const Eigen::LLT<Matrix> llt(weight);
  const Vector integral = path_quadrature(
      [&](const Vector& q, const Vector& dq) -> Vector {
        return llt.solve(system.B(q, t).transpose() * (M(q, t) * dq));
      },
      x_d, x, N_quad);
  if (integral.size() == 0) return u_d;
  return u_d - integral;
}

Vector geodesic_control(const CvstemSolution& s, const SystemModel& system, const Vector& x,
                        const Vector& x_d, const Vector& u_d, double t, const Matrix& R,
                        int N_quad) {
  return geodesic_control(cvstem_metric(s), system, x, x_d, u_d, t, R, N_quad);
}

Vector geodesic_control(const MetricNet& net, const SystemModel& system, const Vector& x,
                        const Vector& x_d, const Vector& u_d, double t, const Matrix& R,
                        int N_quad) {
  return geodesic_control(learned_metric(net), system, x, x_d, u_d, t, R, N_quad);
}

std::vector<Vector> lattice(const Box& box, int per_dim, std::size_t cap) {
  if (per_dim < 1) throw std::invalid_argument("lattice: per_dim must be >= 1");
  const auto dim = static_cast<int>(box.dim());
  auto count = [dim](int k) {
    double c = 1.0;
    for (int i = 0; i < dim; ++i) c *= k;
    return c;
  };
  while (per_dim > 1 && count(per_dim) > static_cast<double>(cap)) --per_dim;
  const auto total = static_cast<std::size_t>(count(per_dim));
  std::vector<Vector> out;
  out.reserve(total);
  std::vector<int> idx(static_cast<std::size_t>(dim), 0);
  for (std::size_t c = 0; c < total; ++c) {
    Vector x(dim);
    for (int i = 0; i < dim; ++i) {
      const double s = per_dim == 1 ? 0.5 : static_cast<double>(idx[static_cast<std::size_t>(i)]) / (per_dim - 1);
      x(i) = box.lo(i) + s * (box.hi(i) - box.lo(i));
    }
    out.push_back(std::move(x));
    for (int i = 0; i < dim; ++i) {
      if (++idx[static_cast<std::size_t>(i)] < per_dim) break;
      idx[static_cast<std::size_t>(i)] = 0;
    }
  }
  return out;
}

}  // namespace ckit
