#include "contraction_kit/systems.hpp"

#include <cmath>
#include <numbers>

namespace ckit {

bool Box::contains(const Vector& x, double tol) const {
  if (x.size() != lo.size()) return false;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (x(i) < lo(i) - tol || x(i) > hi(i) + tol) return false;
  return true;
}

Vector Box::sample(RngStream& rng) const {
  Vector x(lo.size());
  for (Eigen::Index i = 0; i < lo.size(); ++i) x(i) = rng.uniform(lo(i), hi(i));
  return x;
}

namespace {

Box symmetric_box(const Vector& half) { return Box{-half, half}; }

Vector vec(std::initializer_list<double> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v(i++) = x;
  return v;
}

}  // namespace

SystemModel make_pvtol() {
  constexpr double g = 9.81;
  constexpr double mass = 0.486;
  constexpr double inertia = 0.00383;
  const double pi = std::numbers::pi;

  SystemModel s;
  s.name = "pvtol";
  s.n = 6;
  s.m = 2;
  // x = (p_x, p_z, φ, v_x, v_z, φ̇), velocities in the body frame.
  s.f = [](const Vector& x, double) {
    const double c = std::cos(x(2)), sn = std::sin(x(2));
    Vector dx(6);
    dx << x(3) * c - x(4) * sn, x(3) * sn + x(4) * c, x(5), x(4) * x(5) - g * sn,
        -x(3) * x(5) - g * c, 0.0;
    return dx;
  };
  s.B = [](const Vector&, double) {
    Matrix b = Matrix::Zero(6, 2);
    b(4, 0) = 1.0 / mass;
    b(5, 1) = 1.0 / inertia;
    return b;
  };
  s.jac_f = [](const Vector& x, double) {
    const double c = std::cos(x(2)), sn = std::sin(x(2));
    Matrix j = Matrix::Zero(6, 6);
    j(0, 2) = -x(3) * sn - x(4) * c;
    j(0, 3) = c;
    j(0, 4) = -sn;
    j(1, 2) = x(3) * c - x(4) * sn;
    j(1, 3) = sn;
    j(1, 4) = c;
    j(2, 5) = 1.0;
    j(3, 2) = -g * c;
    j(3, 4) = x(5);
    j(3, 5) = x(4);
    j(4, 2) = g * sn;
    j(4, 3) = -x(5);
    j(4, 5) = -x(3);
    return j;
  };
  s.jac_b = [](const Vector&, double, int) { return Matrix::Zero(6, 6).eval(); };

  s.d_bar = 0.5;
  s.g_bar = 0.1;
  s.G = [gb = s.g_bar](const Vector&, double) {
    return (gb / std::sqrt(6.0) * Matrix::Identity(6, 6)).eval();
  };

  s.state_box = Box{vec({-10.0, -5.0, -pi / 3, -2.0, -1.0, -pi / 3}),
                    vec({10.0, 5.0, pi / 3, 2.0, 1.0, pi / 3})};
  s.input_box = Box{vec({mass * g - 1.0, -0.01}), vec({mass * g + 1.0, 0.01})};
  s.t_min = 0.0;
  s.t_max = 10.0;
  s.error_box = symmetric_box(vec({1.0, 1.0, 0.5, 1.0, 1.0, 0.5}));
  s.init_box = Box{vec({-1.0, -1.0, -0.02, 0.5, -0.1, -0.02}),
                   vec({1.0, 1.0, 0.02, 1.0, 0.1, 0.02})};
  s.init_error_box = symmetric_box(vec({0.5, 0.5, 0.2, 0.5, 0.5, 0.2}));
  s.u_nominal = vec({mass * g, 0.0});
  s.reference_amplitude = vec({0.2, 0.0002});

  s.b_bar = 1.0 / inertia;
  s.L_u = s.b_bar;
  return s;
}

SystemModel make_scalar_test(double a) {
  SystemModel s;
  s.name = "scalar";
  s.n = 1;
  s.m = 1;
  s.f = [a](const Vector& x, double) { return (a * x).eval(); };
  s.B = [](const Vector&, double) { return Matrix::Ones(1, 1).eval(); };
  s.jac_f = [a](const Vector&, double) { return Matrix::Constant(1, 1, a).eval(); };
  s.jac_b = [](const Vector&, double, int) { return Matrix::Zero(1, 1).eval(); };
  s.G = [](const Vector&, double) { return Matrix::Zero(1, 1).eval(); };
  s.state_box = Box{vec({-3.0}), vec({3.0})};
  s.input_box = Box{vec({-1.0}), vec({1.0})};
  s.error_box = symmetric_box(vec({1.0}));
  s.init_box = Box{vec({-1.0}), vec({1.0})};
  s.init_error_box = symmetric_box(vec({1.0}));
  s.u_nominal = vec({0.0});
  s.reference_amplitude = vec({0.5});
  s.b_bar = 1.0;
  s.L_u = 1.0;
  return s;
}

SystemModel make_lti(const Matrix& A, const Matrix& B) {
  if (A.rows() != A.cols() || B.rows() != A.rows())
    throw std::invalid_argument("make_lti: incompatible A and B");
  SystemModel s;
  s.name = "lti";
  s.n = static_cast<int>(A.rows());
  s.m = static_cast<int>(B.cols());
  const int n = s.n;
  s.f = [A](const Vector& x, double) { return (A * x).eval(); };
  s.B = [B](const Vector&, double) { return B; };
  s.jac_f = [A](const Vector&, double) { return A; };
  s.jac_b = [n](const Vector&, double, int) { return Matrix::Zero(n, n).eval(); };
  s.G = [n](const Vector&, double) { return Matrix::Zero(n, n).eval(); };
  s.state_box = Box{Vector::Constant(n, -3.0), Vector::Constant(n, 3.0)};
  s.input_box = Box{Vector::Constant(s.m, -1.0), Vector::Constant(s.m, 1.0)};
  s.error_box = symmetric_box(Vector::Constant(n, 1.0));
  s.init_box = Box{Vector::Constant(n, -1.0), Vector::Constant(n, 1.0)};
  s.init_error_box = symmetric_box(Vector::Constant(n, 1.0));
  s.u_nominal = Vector::Zero(s.m);
  s.reference_amplitude = Vector::Constant(s.m, 0.5);
  s.b_bar = B.jacobiSvd().singularValues()(0);
  s.L_u = s.b_bar;
  return s;
}

SystemModel make_lti() {
  Matrix A(2, 2);
  A << 0.0, 1.0, -1.0, 0.0;
  Matrix B(2, 1);
  B << 0.0, 1.0;
  return make_lti(A, B);
}

SystemModel make_system(const std::string& name) {
  if (name == "pvtol") return make_pvtol();
  if (name == "scalar") return make_scalar_test(-1.0);
  if (name == "lti") return make_lti();
  throw std::invalid_argument("unknown system '" + name + "'");
}

void set_disturbance(SystemModel& system, double d_bar, double g_bar) {
  if (d_bar < 0.0 || g_bar < 0.0) throw std::invalid_argument("set_disturbance: bounds must be >= 0");
  system.d_bar = d_bar;
  system.g_bar = g_bar;
  const int n = system.n;
  const double scale = g_bar / std::sqrt(static_cast<double>(n));
  system.G = [n, scale](const Vector&, double) { return (scale * Matrix::Identity(n, n)).eval(); };
}

double input_matrix_bound(const SystemModel& system, const std::vector<Vector>& states,
                          double t) {
  double bound = 0.0;
  for (const auto& x : states) {
    const Matrix b = system.B(x, t);
    if (b.size() == 0) continue;
    bound = std::max(bound, b.jacobiSvd().singularValues()(0));
  }
  return bound;
}

Matrix annihilator(const Matrix& B) {
  const Eigen::Index n = B.rows();
  if (n == 0) return Matrix(0, 0);
  const Matrix gram = B * B.transpose();
  const auto eig = jacobi_eigen(gram);
  const double top = std::max(0.0, eig.values(n - 1));
  const double cutoff = 1e-12 * top;
  Eigen::Index nullity = 0;
  while (nullity < n && eig.values(nullity) <= cutoff) ++nullity;
  Matrix out(nullity, n);
  for (Eigen::Index i = 0; i < nullity; ++i) out.row(i) = eig.vectors.col(i).transpose();
  return out;
}

Matrix directional_matrix_derivative(const StateMatrixFunction& F, const Vector& p,
                                     const Vector& x, double t) {
  const double h = 1e-5 * (1.0 + x.norm());
  Matrix out;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    if (p(k) == 0.0) continue;
    Vector xp = x, xm = x;
    xp(k) += h;
    xm(k) -= h;
    const Matrix partial = (F(xp, t) - F(xm, t)) / (2.0 * h);
    if (out.size() == 0)
      out = partial * p(k);
    else
      out += partial * p(k);
  }
  if (out.size() == 0) out = Matrix::Zero(F(x, t).rows(), F(x, t).cols());
  if (!out.allFinite()) throw NumericsError("directional_matrix_derivative: non-finite output");
  return out;
}

Matrix directional_matrix_derivative(
    const std::function<Matrix(const Vector& x, double t, int k)>& partial,
    const Vector& p, const Vector& x, double t) {
  Matrix out = partial(x, t, 0) * p(0);
  for (Eigen::Index k = 1; k < x.size(); ++k) out += partial(x, t, static_cast<int>(k)) * p(k);
  if (!out.allFinite()) throw NumericsError("directional_matrix_derivative: non-finite output");
  return out;
}

Vector ReferenceInput::operator()(double t) const {
  Vector u = nominal;
  const auto count = static_cast<Eigen::Index>(frequencies_hz.size());
  if (count == 0) return u;
  for (Eigen::Index j = 0; j < u.size(); ++j) {
    double acc = 0.0;
    for (Eigen::Index k = 0; k < count; ++k) {
      const double omega = 2.0 * std::numbers::pi * frequencies_hz[static_cast<std::size_t>(k)];
      acc += weights(j, k) * std::sin(omega * t + phases(j, k));
    }
    u(j) += amplitude(j) * acc / static_cast<double>(count);
  }
  return u;
}

TargetTrajectory generate_target(const SystemModel& system, double horizon,
                                 std::uint64_t seed, const TargetOptions& options) {
  if (!(horizon > 0.0)) throw std::invalid_argument("generate_target: horizon must be positive");
  RngStream rng(seed, streams::kTargets);
  const auto freq_count = static_cast<Eigen::Index>(options.frequencies_hz.size());

  for (int attempt = 1; attempt <= options.max_attempts; ++attempt) {
    ReferenceInput input;
    input.nominal = system.u_nominal;
    input.amplitude = system.reference_amplitude;
    input.frequencies_hz = options.frequencies_hz;
    input.weights.resize(system.m, freq_count);
    input.phases.resize(system.m, freq_count);
    for (int j = 0; j < system.m; ++j) {
      for (Eigen::Index k = 0; k < freq_count; ++k) {
        input.weights(j, k) = options.weight_scale * rng.uniform(-1.0, 1.0);
        input.phases(j, k) = rng.uniform(0.0, 2.0 * std::numbers::pi);
      }
    }
    const Vector x0 = system.init_box.sample(rng);

    const auto rhs = [&](double t, const Vector& x) { return system.h(x, input(t), t); };
    Trajectory path;
    try {
      path = integrate_ode(rhs, x0, 0.0, horizon, options.dt);
    } catch (const DivergenceError&) {
      continue;
    }
    bool inside = true;
    for (const auto& x : path.x) {
      if (!system.state_box.contains(x)) {
        inside = false;
        break;
      }
    }
    if (!inside) continue;

    TargetTrajectory target;
    target.t = std::move(path.t);
    target.x_d = std::move(path.x);
    target.u_d.reserve(target.t.size());
    for (double t : target.t) target.u_d.push_back(input(t));
    target.input = std::move(input);
    target.seed = seed;
    target.attempts = attempt;
    return target;
  }
  throw TargetGenerationError("generate_target: target left the state box on every attempt (" +
                              std::to_string(options.max_attempts) + ")");
}

Vector sample_initial_error(const SystemModel& system, RngStream& rng) {
  for (;;) {
    Vector e = system.init_error_box.sample(rng);
    if (e.norm() >= 1e-3) return e;
  }
}

}  // namespace ckit
