#include "contraction_kit/certify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "contraction_kit/training.hpp"

namespace ckit {

using nlohmann::json;

FeedbackLaw learned_controller(const ControllerNet& net) {
  return [net](const Vector& x, const Vector& x_d, const Vector& u_d, double t) {
    return eval_u(net, x, x_d, u_d, t);
  };
}

FeedbackLaw geodesic_controller(const MetricField& M, const SystemModel& system, const Matrix& R,
                                int N_quad) {
  return [M, system, R, N_quad](const Vector& x, const Vector& x_d, const Vector& u_d, double t) {
    return geodesic_control(M, system, x, x_d, u_d, t, R, N_quad);
  };
}

std::string to_string(BoundMode mode) {
  return mode == BoundMode::kDeterministic ? "deterministic" : "stochastic";
}

BoundMode bound_mode_from_string(const std::string& s) {
  if (s == "deterministic") return BoundMode::kDeterministic;
  if (s == "stochastic") return BoundMode::kStochastic;
  throw std::invalid_argument("unknown bound mode '" + s + "'");
}

double alpha_ell_deterministic(const BoundConstants& c) {
  return c.alpha - c.L_u * c.eps1 * std::sqrt(c.m_over / c.m_under);
}

double alpha_ell_stochastic(const BoundConstants& c) {
  return c.alpha - (0.5 * c.alpha_d + c.L_u * c.eps1 * std::sqrt(c.m_over / c.m_under));
}

void BoundConstants::refresh() {
  alpha_s = L_m * g_bar * g_bar * (alpha_G + 0.5);
  alpha_ell = mode == BoundMode::kDeterministic ? alpha_ell_deterministic(*this)
                                                : alpha_ell_stochastic(*this);
  const double drift = L_u * eps0 + d_bar;
  const bool defined = (g_bar == 0.0 || alpha_G > 0.0) && (drift == 0.0 || alpha_d > 0.0);
  C = defined ? disturbance_constant(g_bar, d_bar, L_u, eps0, alpha_G, alpha_d)
              : std::numeric_limits<double>::quiet_NaN();
}

double eps1_from_metric_error(double rho_bar, double b_bar, double eps_ell) {
  return rho_bar * b_bar * b_bar * eps_ell;
}

void apply_metric_error(BoundConstants& c, double rho_bar, double b_bar, double eps_ell) {
  c.eps0 = 0.0;
  c.eps1 = eps1_from_metric_error(rho_bar, b_bar, eps_ell);
  c.refresh();
}

Envelope bound_envelope_det(const BoundConstants& c, double V_ell_0) {
  const double a = alpha_ell_deterministic(c);
  if (!(a > 0.0))
    throw CertificateRefused("deterministic bound refused: alpha_ell = " + format_double(a));
  const double start = V_ell_0 / std::sqrt(c.m_under);
  const double limit = (c.L_u * c.eps0 + c.d_bar) / a * std::sqrt(c.m_over / c.m_under);
  return [=](double t) {
    const double decay = std::exp(-a * t);
    return start * decay + limit * (1.0 - decay);
  };
}

Envelope bound_envelope_stoch(const BoundConstants& c, double V_sl_0_mean) {
  const double a = alpha_ell_stochastic(c);
  if (!(a > 0.0))
    throw CertificateRefused("stochastic bound refused: alpha_ell = " + format_double(a));
  const double C = disturbance_constant(c.g_bar, c.d_bar, c.L_u, c.eps0, c.alpha_G, c.alpha_d);
  const double limit = C / (2.0 * a) * (c.m_over / c.m_under);
  const double start = V_sl_0_mean / c.m_under;
  return [=](double t) { return limit + start * std::exp(-2.0 * a * t); };
}

double path_length(const MetricField& M, const Vector& x_d, const Vector& x, double t,
                   int segments) {
  const Vector v = path_quadrature(
      [&](const Vector& q, const Vector& dq) {
        Vector out(1);
        out(0) = std::sqrt(std::max(0.0, dq.dot(M(q, t) * dq)));
        return out;
      },
      x_d, x, segments);
  return v.size() ? v(0) : 0.0;
}

double path_energy(const MetricField& M, const Vector& x_d, const Vector& x, double t,
                   int segments) {
  const Vector v = path_quadrature(
      [&](const Vector& q, const Vector& dq) {
        Vector out(1);
        out(0) = dq.dot(M(q, t) * dq);
        return out;
      },
      x_d, x, segments);
  return v.size() ? v(0) : 0.0;
}

namespace {

Matrix metric_partial(const MetricField& M, const Vector& x, double t, int k) {
  const double h = 1e-5 * (1.0 + std::abs(x(k)));
  Vector xp = x, xm = x;
  xp(k) += h;
  xm(k) -= h;
  return (M(xp, t) - M(xm, t)) / (2.0 * h);
}

}  // namespace

BoundConstants estimate_constants(const MetricField& M, const FeedbackLaw& controller,
                                  const FeedbackLaw* reference, const SystemModel& system,
                                  const std::vector<CertGridPoint>& grid,
                                  const EstimateOptions& options) {
  if (grid.empty()) throw std::invalid_argument("estimate_constants: empty grid");
  const auto count = grid.size();
  std::vector<double> lo(count), hi(count), b_norm(count), gap(count), len(count);
  parallel_for(static_cast<int>(count), [&](int i) {
    const auto& p = grid[static_cast<std::size_t>(i)];
    const SymmetricEigen e = jacobi_eigen(sym(M(p.x, p.t)));
    lo[static_cast<std::size_t>(i)] = e.values(0);
    hi[static_cast<std::size_t>(i)] = e.values(e.values.size() - 1);
    b_norm[static_cast<std::size_t>(i)] =
        Eigen::JacobiSVD<Matrix>(system.B(p.x, p.t)).singularValues()(0);
    if (reference) {
      gap[static_cast<std::size_t>(i)] =
          (controller(p.x, p.x_d, p.u_d, p.t) - (*reference)(p.x, p.x_d, p.u_d, p.t)).norm();
      len[static_cast<std::size_t>(i)] = (p.x - p.x_d).norm();
    }
  });

  BoundConstants c;
  c.mode = options.mode;
  c.alpha = options.alpha;
  c.alpha_d = options.alpha_d;
  c.alpha_G = options.alpha_G;
  c.m_under = *std::min_element(lo.begin(), lo.end());
  c.m_over = *std::max_element(hi.begin(), hi.end());
  if (!(c.m_under > 0.0)) throw NumericsError("estimate_constants: metric not positive definite");
  c.L_u = system.L_u > 0.0 ? system.L_u : *std::max_element(b_norm.begin(), b_norm.end());
  c.d_bar = system.d_bar;
  c.g_bar = system.g_bar;

  if (reference) {
    // Least-squares line gap ≈ ε₀ + ε₁·len, then ε₀ raised to cover every point.
    double sl = 0, sg = 0, sll = 0, slg = 0;
    for (std::size_t i = 0; i < count; ++i) {
      sl += len[i];
      sg += gap[i];
      sll += len[i] * len[i];
      slg += len[i] * gap[i];
    }
    const double n = static_cast<double>(count);
    const double denom = n * sll - sl * sl;
    double eps1 = denom > 0.0 ? (n * slg - sl * sg) / denom : 0.0;
    eps1 = std::max(0.0, eps1);
    double eps0 = 0.0;
    for (std::size_t i = 0; i < count; ++i) eps0 = std::max(eps0, gap[i] - eps1 * len[i]);
    c.eps0 = eps0;
    c.eps1 = eps1;
  }

  // Sampled Lipschitz quotients of ∂M/∂x_i over random grid pairs.
  if (count >= 2 && options.lipschitz_pairs > 0) {
    RngStream rng(options.seed, streams::kGrid);
    const int pairs = options.lipschitz_pairs;
    std::vector<std::pair<std::size_t, std::size_t>> idx(static_cast<std::size_t>(pairs));
    for (auto& pr : idx) {
      pr.first = std::min(count - 1, static_cast<std::size_t>(rng.uniform(0.0, static_cast<double>(count))));
      pr.second = std::min(count - 1, static_cast<std::size_t>(rng.uniform(0.0, static_cast<double>(count))));
    }
    std::vector<double> q(static_cast<std::size_t>(pairs), 0.0);
    parallel_for(pairs, [&](int k) {
      const auto& pr = idx[static_cast<std::size_t>(k)];
      const auto& a = grid[pr.first];
      const auto& b = grid[pr.second];
      const double dist = (a.x - b.x).norm();
      if (dist < 1e-9) return;
      double best = 0.0;
      for (int i = 0; i < system.n; ++i) {
        const Matrix diff = metric_partial(M, a.x, a.t, i) - metric_partial(M, b.x, b.t, i);
        const SymmetricEigen e = jacobi_eigen(sym(diff));
        best = std::max({best, e.values.maxCoeff(), -e.values.minCoeff()});
      }
      q[static_cast<std::size_t>(k)] = best / dist;
    });
    c.L_m = *std::max_element(q.begin(), q.end());
    // Finite-difference noise on a constant metric.
    if (c.L_m < 1e-6 * c.m_over) c.L_m = 0.0;
  }
  c.refresh();
  return c;
}

double metric_error(const MetricField& a, const MetricField& b,
                    const std::vector<CertGridPoint>& grid) {
  double worst = 0.0;
  for (const auto& p : grid) {
    const Matrix d = sym(a(p.x, p.t) - b(p.x, p.t));
    worst = std::max({worst, max_eig_sym(d), -min_eig_sym(d)});
  }
  return worst;
}

std::vector<CertGridPoint> certification_grid(const SystemModel& system, int per_dim,
                                              std::size_t cap, const std::vector<Sample>& seeds,
                                              std::uint64_t seed) {
  const std::vector<Vector> base = lattice(system.state_box, per_dim, cap);
  RngStream rng(seed, streams::kGrid);
  std::vector<CertGridPoint> out;
  out.reserve(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    CertGridPoint p;
    p.x_d = base[i];
    if (!seeds.empty()) {
      const Sample& s = seeds[i % seeds.size()];
      p.x = p.x_d + (s.x - s.x_d);
      p.u_d = s.u_d;
      p.t = s.t;
    } else {
      p.x = p.x_d + system.error_box.sample(rng);
      p.u_d = system.input_box.sample(rng);
      p.t = rng.uniform(system.t_min, system.t_max);
    }
    out.push_back(std::move(p));
  }
  return out;
}

ContractionSummary grid_contraction(const MetricNet& metric, const ControllerNet& controller,
                                    const SystemModel& system,
                                    const std::vector<CertGridPoint>& grid, double alpha) {
  ContractionSummary s;
  s.max_eigs.resize(grid.size());
  parallel_for(static_cast<int>(grid.size()), [&](int i) {
    const auto& p = grid[static_cast<std::size_t>(i)];
    const Matrix Cu = c_u_matrix(metric, controller, system, Sample{p.x, p.x_d, p.u_d, p.t}, alpha);
    s.max_eigs[static_cast<std::size_t>(i)] = max_eig_sym(Cu);
  });
  std::size_t negative = 0;
  s.worst = -std::numeric_limits<double>::infinity();
  for (double v : s.max_eigs) {
    s.worst = std::max(s.worst, v);
    if (v < 0.0) ++negative;
  }
  s.fraction_negative = grid.empty() ? 0.0 : static_cast<double>(negative) / grid.size();
  return s;
}

Matrix closed_loop_contraction(const MetricField& M, const FeedbackLaw& controller,
                               const SystemModel& system, const CertGridPoint& p, double alpha) {
  const int n = system.n;
  const Vector u = controller(p.x, p.x_d, p.u_d, p.t);
  Matrix du(system.m, n);
  for (int k = 0; k < n; ++k) {
    const double h = 1e-6 * (1.0 + std::abs(p.x(k)));
    Vector xp = p.x, xm = p.x;
    xp(k) += h;
    xm(k) -= h;
    du.col(k) = (controller(xp, p.x_d, p.u_d, p.t) - controller(xm, p.x_d, p.u_d, p.t)) / (2.0 * h);
  }
  const Matrix B = system.B(p.x, p.t);
  Matrix A = system.jac_f(p.x, p.t) + B * du;
  for (int j = 0; j < system.m; ++j) A += system.jac_b(p.x, p.t, j) * u(j);
  const Vector xdot = system.h(p.x, u, p.t);
  const double ht = 1e-6 * (1.0 + std::abs(p.t));
  Matrix Mdot = (M(p.x, p.t + ht) - M(p.x, p.t - ht)) / (2.0 * ht);
  for (int k = 0; k < n; ++k) Mdot += metric_partial(M, p.x, p.t, k) * xdot(k);
  const Matrix Mx = M(p.x, p.t);
  const Matrix MA = Mx * A;
  return sym(Mdot + MA + MA.transpose() + 2.0 * alpha * Mx);
}

ClosedLoopRun simulate_closed_loop(const SystemModel& system, const FeedbackLaw& controller,
                                   const ReferenceInput& input, const Vector& x_d0,
                                   const Vector& e0, const ClosedLoopOptions& o,
                                   RngStream* wiener) {
  const int n = system.n;
  const double d_bar = o.d_bar;
  const VectorField rhs = [&](double t, const Vector& z) -> Vector {
    const Vector x = z.head(n), xd = z.tail(n);
    const Vector ud = input(t);
    Vector dz(2 * n);
    dz.head(n) = system.h(x, controller(x, xd, ud, t), t);
    dz.tail(n) = system.h(xd, ud, t);
    if (d_bar > 0.0) {
      const Vector e = x - xd;
      const double norm = e.norm();
      if (norm > 0.0)
        dz.head(n) += d_bar * e / norm;
      else
        dz(0) += d_bar;
    }
    return dz;
  };
  Vector z0(2 * n);
  z0 << x_d0 + e0, x_d0;
  Trajectory traj;
  if (o.mode == BoundMode::kStochastic) {
    if (!wiener) throw std::invalid_argument("simulate_closed_loop: stochastic mode needs a stream");
    const MatrixField diffusion = [&](double t, const Vector& z) -> Matrix {
      const Matrix G = system.G(z.head(n), t);
      Matrix full = Matrix::Zero(2 * n, G.cols());
      full.topRows(n) = G;
      return full;
    };
    traj = integrate_sde(rhs, diffusion, z0, 0.0, o.horizon, o.dt, *wiener);
  } else {
    traj = integrate_ode(rhs, z0, 0.0, o.horizon, o.dt);
  }
  ClosedLoopRun run;
  run.x0 = z0.head(n);
  run.x_d0 = x_d0;
  const int every = std::max(1, o.record_every);
  const std::size_t last = traj.t.size() - 1;
  for (std::size_t k = 0; k <= last; ++k) {
    if (k % static_cast<std::size_t>(every) != 0 && k != last) continue;
    run.t.push_back(traj.t[k]);
    run.error.push_back((traj.x[k].head(n) - traj.x[k].tail(n)).norm());
  }
  return run;
}

namespace {

std::uint64_t trajectory_seed(std::uint64_t seed, int i) {
  return seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(i + 1);
}

std::uint64_t trajectory_stream(std::uint64_t base, int i) {
  return base | (static_cast<std::uint64_t>(i + 1) << 32);
}

}  // namespace

CertificateReport verify_tracking(const MetricField& M, const FeedbackLaw& controller,
                                  const SystemModel& system, const BoundConstants& constants,
                                  const VerifyOptions& o) {
  if (o.n_traj < 1) throw std::invalid_argument("verify_tracking: n_traj must be >= 1");
  CertificateReport report;
  report.constants = constants;
  report.constants.mode = o.mode;
  report.constants.refresh();
  report.note =
      "initial path integrals use the straight line from x_d(0) to x(0), an upper "
      "estimate of the geodesic value";
  const bool stochastic = o.mode == BoundMode::kStochastic;
  // Refuses the certificate before any rollout when α_ℓ ≤ 0.
  if (stochastic)
    (void)bound_envelope_stoch(report.constants, 0.0);
  else
    (void)bound_envelope_det(report.constants, 0.0);

  ClosedLoopOptions co;
  co.horizon = o.horizon;
  co.dt = o.dt;
  co.mode = o.mode;
  co.d_bar = o.disturbance ? system.d_bar : 0.0;
  co.record_every = o.record_every;

  const auto N = static_cast<std::size_t>(o.n_traj);
  std::vector<ClosedLoopRun> runs(N);
  std::vector<double> V0(N);
  std::vector<std::uint64_t> seeds(N);
  parallel_for(o.n_traj, [&](int i) {
    const auto k = static_cast<std::size_t>(i);
    seeds[k] = trajectory_seed(o.seed, i);
    const TargetTrajectory target = generate_target(system, o.horizon, seeds[k], o.targets);
    RngStream init(o.seed, trajectory_stream(streams::kInit, i));
    const Vector e0 = sample_initial_error(system, init);
    const Vector& xd0 = target.x_d.front();
    V0[k] = stochastic ? path_energy(M, xd0, xd0 + e0, 0.0, o.quad_segments)
                       : path_length(M, xd0, xd0 + e0, 0.0, o.quad_segments);
    RngStream wiener(o.seed, trajectory_stream(streams::kWiener, i));
    ClosedLoopRun run = simulate_closed_loop(system, controller, target.input, xd0, e0, co,
                                             stochastic ? &wiener : nullptr);
    if (stochastic) {
      // Only the squared errors are needed for the ensemble statistics.
      for (double& e : run.error) e = e * e;
    }
    runs[k] = std::move(run);
  });

  const std::size_t T = runs.front().t.size();
  report.pass = true;
  report.max_violation = -std::numeric_limits<double>::infinity();
  const std::size_t keep = std::min(N, static_cast<std::size_t>(std::max(0, o.keep_records)));

  if (!stochastic) {
    for (std::size_t k = 0; k < N; ++k) {
      const Envelope env = bound_envelope_det(report.constants, V0[k]);
      TrajectoryRecord rec;
      rec.index = static_cast<int>(k);
      rec.target_seed = seeds[k];
      rec.V0 = V0[k];
      rec.violation = -std::numeric_limits<double>::infinity();
      const double e_init = runs[k].error.front();
      for (std::size_t j = 0; j < T; ++j) {
        const double t = runs[k].t[j], err = runs[k].error[j], bound = env(t);
        rec.violation = std::max(rec.violation, err / bound - 1.0);
        if (k < keep) {
          rec.t.push_back(t);
          rec.error.push_back(err);
          rec.envelope.push_back(bound);
          rec.x_e.push_back(err / e_init);
        }
      }
      rec.pass = rec.violation <= o.tol;
      if (!rec.pass && report.pass) {
        report.pass = false;
        report.failed_trajectory = rec.index;
      }
      report.max_violation = std::max(report.max_violation, rec.violation);
      if (k < keep) report.trajectories.push_back(std::move(rec));
    }
    return report;
  }

  double v_sum = 0.0;
  for (double v : V0) v_sum += v;
  report.mean_V0 = v_sum / static_cast<double>(N);
  const Envelope env = bound_envelope_stoch(report.constants, report.mean_V0);
  for (std::size_t j = 0; j < T; ++j) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t k = 0; k < N; ++k) {
      s += runs[k].error[j];
      s2 += runs[k].error[j] * runs[k].error[j];
    }
    const double mean = s / static_cast<double>(N);
    const double var = N > 1 ? std::max(0.0, (s2 - s * mean) / static_cast<double>(N - 1)) : 0.0;
    const double se = std::sqrt(var / static_cast<double>(N));
    const double t = runs.front().t[j];
    const double bound = env(t);
    report.t.push_back(t);
    report.mean_square.push_back(mean);
    report.standard_error.push_back(se);
    report.envelope.push_back(bound);
    const double violation = (mean - 3.0 * se) / bound - 1.0;
    report.max_violation = std::max(report.max_violation, violation);
    if (violation > 0.0) report.pass = false;
  }
  for (std::size_t k = 0; k < keep; ++k) {
    TrajectoryRecord rec;
    rec.index = static_cast<int>(k);
    rec.target_seed = seeds[k];
    rec.V0 = V0[k];
    const double e_init = std::sqrt(runs[k].error.front());
    for (std::size_t j = 0; j < T; ++j) {
      const double err = std::sqrt(runs[k].error[j]);
      rec.t.push_back(runs[k].t[j]);
      rec.error.push_back(err);
      rec.envelope.push_back(report.envelope[j]);
      rec.x_e.push_back(err / e_init);
    }
    report.trajectories.push_back(std::move(rec));
  }
  return report;
}

json constants_to_json(const BoundConstants& c) {
  return {{"mode", to_string(c.mode)}, {"m_under", c.m_under}, {"m_over", c.m_over},
          {"alpha", c.alpha},          {"alpha_ell", c.alpha_ell}, {"alpha_d", c.alpha_d},
          {"alpha_G", c.alpha_G},      {"alpha_s", c.alpha_s},   {"L_u", c.L_u},
          {"L_m", c.L_m},              {"eps0", c.eps0},         {"eps1", c.eps1},
          {"d_bar", c.d_bar},          {"g_bar", c.g_bar},       {"C", c.C}};
}

json certificate_to_json(const CertificateReport& r) {
  json j;
  j["constants"] = constants_to_json(r.constants);
  j["status"] = r.pass ? "pass" : "fail";
  j["max_violation"] = r.max_violation;
  j["failed_trajectory"] = r.failed_trajectory;
  j["note"] = r.note;
  json traj = json::array();
  for (const auto& t : r.trajectories)
    traj.push_back({{"index", t.index},
                    {"target_seed", t.target_seed},
                    {"V0", t.V0},
                    {"violation", t.violation},
                    {"pass", t.pass},
                    {"final_x_e", t.x_e.empty() ? 0.0 : t.x_e.back()}});
  j["trajectories"] = traj;
  if (!r.mean_square.empty()) {
    j["ensemble"] = {{"t", r.t},
                     {"mean_square", r.mean_square},
                     {"standard_error", r.standard_error},
                     {"envelope", r.envelope},
                     {"mean_V0", r.mean_V0}};
  }
  if (r.grid) {
    j["grid"] = {{"points", r.grid->max_eigs.size()},
                 {"worst_max_eig", r.grid->worst},
                 {"fraction_negative", r.grid->fraction_negative}};
  }
  return j;
}

void write_trajectory_csv(const std::string& path, const TrajectoryRecord& rec) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "t,error_norm,envelope,x_e\n";
  for (std::size_t j = 0; j < rec.t.size(); ++j)
    out << format_double(rec.t[j]) << ',' << format_double(rec.error[j]) << ','
        << format_double(rec.envelope[j]) << ',' << format_double(rec.x_e[j]) << '\n';
}

}  // namespace ckit
