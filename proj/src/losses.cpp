#include "contraction_kit/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ckit {

LossReport& LossReport::operator+=(const LossReport& o) {
  l_u += o.l_u;
  l_c += o.l_c;
  l_w1 += o.l_w1;
  l_w2 += o.l_w2;
  l_cv += o.l_cv;
  cv_enabled = cv_enabled || o.cv_enabled;
  return *this;
}

LossReport& LossReport::operator*=(double s) {
  l_u *= s;
  l_c *= s;
  l_w1 *= s;
  l_w2 *= s;
  l_cv *= s;
  return *this;
}

double l_pd(const Matrix& A, const std::vector<Vector>& points, Matrix* grad) {
  if (points.empty()) throw std::invalid_argument("l_pd: no sample points");
  const double inv_k = 1.0 / static_cast<double>(points.size());
  if (grad) *grad = Matrix::Zero(A.rows(), A.cols());
  double total = 0.0;
  for (const auto& p : points) {
    const double v = -p.dot(A * p);
    if (v > 0.0) {
      total += v;
      if (grad) grad->noalias() -= inv_k * p * p.transpose();
    }
  }
  return total * inv_k;
}

SpherePoints::SpherePoints(int max_dim, int count, RngStream& rng) {
  for (int d = 1; d <= max_dim; ++d) sets_[d] = sample_unit_sphere(d, count, rng);
}

const std::vector<Vector>& SpherePoints::get(int dim) const {
  const auto it = sets_.find(dim);
  if (it == sets_.end())
    throw std::out_of_range("SpherePoints: no points for dimension " + std::to_string(dim));
  return it->second;
}

ParameterGradient ParameterGradient::zeros_like(const MetricNet& metric,
                                                const ControllerNet& controller) {
  return {Mlp::zeros(metric.theta.widths()), Mlp::zeros(controller.w1.widths()),
          Mlp::zeros(controller.w2.widths())};
}

namespace {

void add_into(Mlp& dst, const Mlp& src) {
  for (std::size_t l = 0; l < dst.layers().size(); ++l) {
    dst.layers()[l].weight += src.layers()[l].weight;
    dst.layers()[l].bias += src.layers()[l].bias;
  }
}

void scale_mlp(Mlp& net, double s) {
  for (auto& layer : net.layers()) {
    layer.weight *= s;
    layer.bias *= s;
  }
}

/// Everything the losses need at one sample, kept for the reverse pass.
struct SampleState {
  MetricPoint metric;
  ControllerPoint control;
  Vector f;
  Matrix B;
  Matrix jac_f;
  std::vector<Matrix> jac_b;
  Vector xdot;
  Matrix A;     // closed-loop ∂h/∂x
  Matrix Wdot;  // ∂W/∂t + Σ ∂W/∂x_k ẋ_k
  Matrix C_u;
};

SampleState forward_sample(const MetricNet& metric, const ControllerNet& controller,
                           const SystemModel& system, const Sample& s, double alpha) {
  const int n = system.n;
  SampleState st;
  st.metric = evaluate_metric(metric, s.x, s.t);
  st.control = evaluate_controller(controller, s.x, s.x_d, s.u_d);
  st.f = system.f(s.x, s.t);
  st.B = system.B(s.x, s.t);
  st.jac_f = system.jac_f(s.x, s.t);
  st.xdot = st.f + st.B * st.control.u;
  st.A = st.jac_f + st.B * st.control.du_dx;
  st.jac_b.reserve(static_cast<std::size_t>(system.m));
  for (int j = 0; j < system.m; ++j) {
    st.jac_b.push_back(system.jac_b(s.x, s.t, j));
    st.A += st.jac_b.back() * st.control.u(j);
  }
  st.Wdot = Matrix::Zero(n, n);
  for (int k = 0; k < n; ++k) st.Wdot += st.metric.W_partials[static_cast<std::size_t>(k)] * st.xdot(k);
  if (metric.time_input) st.Wdot += st.metric.W_partials.back();
  const Matrix& M = st.metric.M;
  const Matrix MA = M * st.A;
  st.C_u = -M * st.Wdot * M + MA + MA.transpose() + 2.0 * alpha * M;
  st.C_u = sym(st.C_u);
  return st;
}

/// −∂W/∂t − ∂_f W + 2 sym(∂f/∂x W) + 2αW, before projection.
Matrix weak_c1_core(const MetricNet& metric, const MetricPoint& mp, const Vector& f,
                    const Matrix& jac_f, double alpha) {
  const int n = metric.n;
  Matrix X = jac_f * mp.W;
  X = (X + X.transpose()).eval() + 2.0 * alpha * mp.W;
  for (int k = 0; k < n; ++k) X -= mp.W_partials[static_cast<std::size_t>(k)] * f(k);
  if (metric.time_input) X -= mp.W_partials.back();
  return X;
}

/// ∂_{b_j} W − 2 sym(∂b_j/∂x W), before projection.
Matrix weak_c2_core(const MetricPoint& mp, const Matrix& B, const Matrix& jac_bj, int j, int n) {
  Matrix Y = -(jac_bj * mp.W);
  Y = (Y + Y.transpose()).eval();
  for (int k = 0; k < n; ++k) Y += mp.W_partials[static_cast<std::size_t>(k)] * B(k, j);
  return Y;
}

}  // namespace

void ParameterGradient::add(const ParameterGradient& other) {
  add_into(theta, other.theta);
  add_into(w1, other.w1);
  add_into(w2, other.w2);
}

void ParameterGradient::scale(double s) {
  scale_mlp(theta, s);
  scale_mlp(w1, s);
  scale_mlp(w2, s);
}

Vector ParameterGradient::flatten() const {
  const Vector a = theta.flatten(), b = w1.flatten(), c = w2.flatten();
  Vector out(a.size() + b.size() + c.size());
  out << a, b, c;
  return out;
}

Matrix c_u_matrix(const MetricNet& metric, const ControllerNet& controller,
                  const SystemModel& system, const Sample& s, double alpha) {
  return forward_sample(metric, controller, system, s, alpha).C_u;
}

WeakCcm weak_ccm_matrices(const MetricNet& metric, const SystemModel& system, const Vector& x,
                          double t, double alpha) {
  const MetricPoint mp = evaluate_metric(metric, x, t);
  const Matrix B = system.B(x, t);
  const Matrix perp = annihilator(B);
  WeakCcm out;
  out.C1 = perp * weak_c1_core(metric, mp, system.f(x, t), system.jac_f(x, t), alpha) *
           perp.transpose();
  out.C1 = sym(out.C1);
  for (int j = 0; j < system.m; ++j) {
    const Matrix Y = weak_c2_core(mp, B, system.jac_b(x, t, j), j, system.n);
    out.C2.push_back(perp * Y * perp.transpose());
  }
  return out;
}

LossReport sample_loss(const MetricNet& metric, const ControllerNet& controller,
                       const SystemModel& system, const Sample& s, const LossOptions& options,
                       const SpherePoints& points, ParameterGradient* grad) {
  const int n = system.n, m = system.m;
  const double alpha = options.alpha;
  const SampleState st = forward_sample(metric, controller, system, s, alpha);
  const MetricPoint& mp = st.metric;
  const Matrix& M = mp.M;
  const auto& pts_n = points.get(n);

  LossReport r;
  Matrix g_cu, g_w;
  // L_PD(−C_u): derivative with respect to C_u is minus that with respect to −C_u.
  r.l_u = l_pd(-st.C_u, pts_n, grad ? &g_cu : nullptr);
  Matrix bound = -mp.W;
  bound.diagonal().array() += 1.0 / metric.m_under;
  r.l_c = l_pd(bound, pts_n, grad ? &g_w : nullptr);

  const Matrix perp = annihilator(st.B);
  const int r_dim = static_cast<int>(perp.rows());
  Matrix g_c1;
  std::vector<Matrix> c2_unit(static_cast<std::size_t>(m));
  if (r_dim > 0) {
    const Matrix C1 = sym(perp * weak_c1_core(metric, mp, st.f, st.jac_f, alpha) * perp.transpose());
    r.l_w1 = l_pd(-C1, points.get(r_dim), grad ? &g_c1 : nullptr);
    for (int j = 0; j < m; ++j) {
      const Matrix C2 = perp * weak_c2_core(mp, st.B, st.jac_b[static_cast<std::size_t>(j)], j, n) *
                        perp.transpose();
      const double norm = C2.norm();
      r.l_w2 += norm;
      if (norm > 0.0) c2_unit[static_cast<std::size_t>(j)] = C2 / norm;
    }
  }
  if (options.cv_enabled) {
    r.cv_enabled = true;
    r.l_cv = options.cv_scale * metric.m_bar / metric.m_under;
  }
  if (!grad) return r;

  // ---- reverse pass -------------------------------------------------------
  const int dirs = metric.direction_count();
  Matrix W_bar = Matrix::Zero(n, n);
  std::vector<Matrix> Wk_bar(static_cast<std::size_t>(dirs), Matrix::Zero(n, n));
  Vector u_bar = Vector::Zero(m);
  Matrix Ju_bar;

  {
    const Matrix G = -g_cu;  // d l_u / d C_u (symmetric)
    const Matrix A_bar = 2.0 * M * G;
    const Matrix GMWdot = G * M * st.Wdot;
    Matrix M_bar = G * st.A.transpose() + st.A * G + 2.0 * alpha * G - GMWdot - GMWdot.transpose();
    const Matrix Wdot_bar = -M * G * M;
    W_bar += -M * M_bar * M;
    for (int k = 0; k < n; ++k) {
      Wk_bar[static_cast<std::size_t>(k)] += Wdot_bar * st.xdot(k);
    }
    if (metric.time_input) Wk_bar.back() += Wdot_bar;
    Vector xdot_bar(n);
    for (int k = 0; k < n; ++k)
      xdot_bar(k) = Wdot_bar.cwiseProduct(mp.W_partials[static_cast<std::size_t>(k)]).sum();
    u_bar += st.B.transpose() * xdot_bar;
    for (int j = 0; j < m; ++j)
      u_bar(j) += A_bar.cwiseProduct(st.jac_b[static_cast<std::size_t>(j)]).sum();
    Ju_bar = st.B.transpose() * A_bar;
  }
  // l_c = L_PD(m̲⁻¹I − W): derivative with respect to W is minus g_w.
  W_bar -= g_w;

  if (r_dim > 0) {
    const Matrix X1_bar = -(perp.transpose() * g_c1 * perp);
    W_bar += st.jac_f.transpose() * X1_bar + X1_bar * st.jac_f + 2.0 * alpha * X1_bar;
    for (int k = 0; k < n; ++k) Wk_bar[static_cast<std::size_t>(k)] -= X1_bar * st.f(k);
    if (metric.time_input) Wk_bar.back() -= X1_bar;
    for (int j = 0; j < m; ++j) {
      const Matrix& unit = c2_unit[static_cast<std::size_t>(j)];
      if (unit.size() == 0) continue;
      const Matrix Y_bar = perp.transpose() * unit * perp;
      const Matrix& Db = st.jac_b[static_cast<std::size_t>(j)];
      W_bar -= Db.transpose() * Y_bar + Y_bar * Db;
      for (int k = 0; k < n; ++k) Wk_bar[static_cast<std::size_t>(k)] += Y_bar * st.B(k, j);
    }
  }

  // W = ΘᵀΘ + m̄⁻¹I,  W_k = Θ_kᵀΘ + ΘᵀΘ_k.
  {
    Matrix theta_bar = mp.theta * (W_bar + W_bar.transpose());
    Matrix tangent_bar(n * n, dirs);
    for (int k = 0; k < dirs; ++k) {
      const Matrix sk = Wk_bar[static_cast<std::size_t>(k)] + Wk_bar[static_cast<std::size_t>(k)].transpose();
      theta_bar += mp.theta_partials[static_cast<std::size_t>(k)] * sk;
      tangent_bar.col(k) = flatten_row_major(mp.theta * sk);
    }
    metric.theta.backward(mp.pass, flatten_row_major(theta_bar), tangent_bar, grad->theta);
  }

  // u = w2 τ + u_d, τ = tanh(w1 e),  ∂u/∂x_k = ∂w2/∂x_k τ + w2 (s ⊙ ȧ_k).
  {
    const ControllerPoint& c = st.control;
    const int h = controller.channels;
    const Vector slope = 1.0 - c.tau.array().square();
    Matrix w2_bar = u_bar * c.tau.transpose();
    Vector tau_bar = c.w2.transpose() * u_bar;
    Vector slope_bar = Vector::Zero(h);
    Matrix w1_bar = Matrix::Zero(h, n);
    Matrix w1_tangent_bar(h * n, n), w2_tangent_bar(m * h, n);
    for (int k = 0; k < n; ++k) {
      const Vector g = Ju_bar.col(k);
      w2_tangent_bar.col(k) = flatten_row_major(g * c.tau.transpose());
      tau_bar += c.w2_partials[static_cast<std::size_t>(k)].transpose() * g;
      const Vector q = c.w2.transpose() * g;
      const Vector sa = slope.cwiseProduct(c.a_dot.col(k));
      w2_bar += g * sa.transpose();
      slope_bar += q.cwiseProduct(c.a_dot.col(k));
      const Vector adot_bar = q.cwiseProduct(slope);
      w1_tangent_bar.col(k) = flatten_row_major(adot_bar * c.error.transpose());
      w1_bar.col(k) += adot_bar;
    }
    tau_bar.array() -= 2.0 * c.tau.array() * slope_bar.array();
    const Vector a_bar = tau_bar.cwiseProduct(slope);
    w1_bar += a_bar * c.error.transpose();
    controller.w1.backward(c.pass1, flatten_row_major(w1_bar), w1_tangent_bar, grad->w1);
    controller.w2.backward(c.pass2, flatten_row_major(w2_bar), w2_tangent_bar, grad->w2);
  }
  return r;
}

BatchLoss empirical_loss(const MetricNet& metric, const ControllerNet& controller,
                         const SystemModel& system, const std::vector<Sample>& batch,
                         const LossOptions& options, const SpherePoints& points,
                         bool with_gradient) {
  if (batch.empty()) throw std::invalid_argument("empirical_loss: empty batch");
  constexpr int kChunk = 16;
  const int count = static_cast<int>(batch.size());
  const int chunks = (count + kChunk - 1) / kChunk;
  std::vector<LossReport> reports(static_cast<std::size_t>(chunks));
  std::vector<ParameterGradient> grads;
  if (with_gradient)
    grads.assign(static_cast<std::size_t>(chunks), ParameterGradient::zeros_like(metric, controller));

  parallel_for(chunks, [&](int c) {
    const int lo = c * kChunk, hi = std::min(count, lo + kChunk);
    LossReport acc;
    for (int i = lo; i < hi; ++i) {
      acc += sample_loss(metric, controller, system, batch[static_cast<std::size_t>(i)], options,
                         points, with_gradient ? &grads[static_cast<std::size_t>(c)] : nullptr);
    }
    reports[static_cast<std::size_t>(c)] = acc;
  });

  BatchLoss out;
  for (const auto& r : reports) out.report += r;
  const double inv = 1.0 / count;
  out.report *= inv;
  if (options.cv_enabled) {
    out.report.cv_enabled = true;
    out.report.l_cv = options.cv_scale * metric.m_bar / metric.m_under;
  }
  if (with_gradient) {
    ParameterGradient total = std::move(grads.front());
    for (std::size_t c = 1; c < grads.size(); ++c) total.add(grads[c]);
    total.scale(inv);
    out.gradient = std::move(total);
  }
  return out;
}

BatchLoss empirical_loss(const MetricNet& metric, const ControllerNet& controller,
                         const SystemModel& system, const std::vector<Sample>& batch,
                         const LossOptions& options, int K, RngStream& rng, bool with_gradient) {
  const SpherePoints points(system.n, K, rng);
  return empirical_loss(metric, controller, system, batch, options, points, with_gradient);
}

}  // namespace ckit
