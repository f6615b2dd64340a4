#include "contraction_kit/netmetric.hpp"

#include <numeric>
#include <stdexcept>

namespace ckit {

namespace {

std::vector<int> all_states(int n) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

void check_inputs(const std::vector<int>& inputs, int n) {
  if (inputs.empty()) throw std::invalid_argument("network needs at least one state input");
  for (int i : inputs)
    if (i < 0 || i >= n) throw std::invalid_argument("state input index out of range");
}

std::vector<int> layer_widths(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

}  // namespace

Matrix reshape_row_major(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      v.data(), rows, cols);
}

Vector flatten_row_major(const Matrix& a) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r = a;
  return Eigen::Map<const Vector>(r.data(), r.size());
}

MetricNet MetricNet::create(int n, const std::vector<int>& hidden, double m_bar, double m_under,
                            RngStream& rng, bool time_input, double time_scale,
                            std::vector<int> state_inputs) {
  if (!(m_under > 0.0) || m_bar < m_under)
    throw std::invalid_argument("MetricNet: need m_bar >= m_under > 0");
  MetricNet net;
  net.n = n;
  net.m_bar = m_bar;
  net.m_under = m_under;
  net.time_input = time_input;
  net.time_scale = time_scale;
  net.state_inputs = state_inputs.empty() ? all_states(n) : std::move(state_inputs);
  check_inputs(net.state_inputs, n);
  const int in = static_cast<int>(net.state_inputs.size()) + (time_input ? 1 : 0);
  net.theta = Mlp(layer_widths(in, hidden, n * n), rng);
  return net;
}

Vector MetricNet::network_input(const Vector& x, double t) const {
  const auto k = static_cast<Eigen::Index>(state_inputs.size());
  Vector z(k + (time_input ? 1 : 0));
  for (Eigen::Index i = 0; i < k; ++i) z(i) = x(state_inputs[static_cast<std::size_t>(i)]);
  if (time_input) z(k) = t / time_scale;
  return z;
}

Matrix MetricNet::input_directions() const {
  const auto k = static_cast<Eigen::Index>(state_inputs.size());
  Matrix d = Matrix::Zero(k + (time_input ? 1 : 0), direction_count());
  for (Eigen::Index i = 0; i < k; ++i) d(i, state_inputs[static_cast<std::size_t>(i)]) = 1.0;
  if (time_input) d(k, n) = 1.0 / time_scale;
  return d;
}

ControllerNet ControllerNet::create(int n, int m, int channels, const std::vector<int>& hidden,
                                    RngStream& rng, std::vector<int> state_inputs) {
  if (channels < 1) throw std::invalid_argument("ControllerNet: channels must be >= 1");
  ControllerNet net;
  net.n = n;
  net.m = m;
  net.channels = channels;
  net.state_inputs = state_inputs.empty() ? all_states(n) : std::move(state_inputs);
  check_inputs(net.state_inputs, n);
  const int in = 2 * static_cast<int>(net.state_inputs.size());
  net.w1 = Mlp(layer_widths(in, hidden, channels * n), rng);
  net.w2 = Mlp(layer_widths(in, hidden, m * channels), rng);
  return net;
}

Vector ControllerNet::network_input(const Vector& x, const Vector& x_d) const {
  const auto k = static_cast<Eigen::Index>(state_inputs.size());
  Vector z(2 * k);
  for (Eigen::Index i = 0; i < k; ++i) {
    z(i) = x(state_inputs[static_cast<std::size_t>(i)]);
    z(k + i) = x_d(state_inputs[static_cast<std::size_t>(i)]);
  }
  return z;
}

Matrix ControllerNet::input_directions() const {
  const auto k = static_cast<Eigen::Index>(state_inputs.size());
  Matrix d = Matrix::Zero(2 * k, n);
  for (Eigen::Index i = 0; i < k; ++i) d(i, state_inputs[static_cast<std::size_t>(i)]) = 1.0;
  return d;
}

MetricPoint evaluate_metric(const MetricNet& metric, const Vector& x, double t) {
  if (x.size() != metric.n) throw std::invalid_argument("evaluate_metric: state dimension mismatch");
  const int n = metric.n;
  MetricPoint p;
  p.pass = metric.theta.forward(metric.network_input(x, t), metric.input_directions());
  p.theta = reshape_row_major(p.pass.output(), n, n);
  p.W = p.theta.transpose() * p.theta;
  p.W.diagonal().array() += 1.0 / metric.m_bar;
  const int dirs = metric.direction_count();
  p.theta_partials.reserve(static_cast<std::size_t>(dirs));
  p.W_partials.reserve(static_cast<std::size_t>(dirs));
  for (int k = 0; k < dirs; ++k) {
    Matrix dtheta = reshape_row_major(p.pass.output_tangent().col(k), n, n);
    Matrix cross = dtheta.transpose() * p.theta;
    p.W_partials.push_back(cross + cross.transpose());
    p.theta_partials.push_back(std::move(dtheta));
  }
  p.M = p.W.llt().solve(Matrix::Identity(n, n));
  p.M = sym(p.M);
  return p;
}

Matrix eval_W(const MetricNet& metric, const Vector& x, double t) {
  const Matrix theta = reshape_row_major(metric.theta.evaluate(metric.network_input(x, t)),
                                         metric.n, metric.n);
  Matrix w = theta.transpose() * theta;
  w.diagonal().array() += 1.0 / metric.m_bar;
  return w;
}

Matrix eval_M(const MetricNet& metric, const Vector& x, double t) {
  const Matrix w = eval_W(metric, x, t);
  return sym(w.llt().solve(Matrix::Identity(metric.n, metric.n)));
}

ControllerPoint evaluate_controller(const ControllerNet& controller, const Vector& x,
                                    const Vector& x_d, const Vector& u_d) {
  const int n = controller.n, m = controller.m, h = controller.channels;
  if (x.size() != n || x_d.size() != n || u_d.size() != m)
    throw std::invalid_argument("evaluate_controller: dimension mismatch");
  ControllerPoint c;
  const Vector z = controller.network_input(x, x_d);
  const Matrix dirs = controller.input_directions();
  c.pass1 = controller.w1.forward(z, dirs);
  c.pass2 = controller.w2.forward(z, dirs);
  c.w1 = reshape_row_major(c.pass1.output(), h, n);
  c.w2 = reshape_row_major(c.pass2.output(), m, h);
  c.error = x - x_d;
  const Vector a = c.w1 * c.error;
  c.tau = a.array().tanh();
  const Vector slope = 1.0 - c.tau.array().square();
  c.u = c.w2 * c.tau + u_d;

  c.du_dx.resize(m, n);
  c.a_dot.resize(h, n);
  c.w1_partials.reserve(static_cast<std::size_t>(n));
  c.w2_partials.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    Matrix dw1 = reshape_row_major(c.pass1.output_tangent().col(k), h, n);
    Matrix dw2 = reshape_row_major(c.pass2.output_tangent().col(k), m, h);
    c.a_dot.col(k) = dw1 * c.error + c.w1.col(k);
    c.du_dx.col(k) = dw2 * c.tau + c.w2 * slope.cwiseProduct(c.a_dot.col(k));
    c.w1_partials.push_back(std::move(dw1));
    c.w2_partials.push_back(std::move(dw2));
  }
  return c;
}

Vector eval_u(const ControllerNet& controller, const Vector& x, const Vector& x_d,
              const Vector& u_d, double) {
  const int n = controller.n, m = controller.m, h = controller.channels;
  if (x.size() != n || x_d.size() != n || u_d.size() != m)
    throw std::invalid_argument("eval_u: dimension mismatch");
  const Vector z = controller.network_input(x, x_d);
  const Matrix w1 = reshape_row_major(controller.w1.evaluate(z), h, n);
  const Matrix w2 = reshape_row_major(controller.w2.evaluate(z), m, h);
  const Vector tau = (w1 * (x - x_d)).array().tanh();
  return w2 * tau + u_d;
}

MetricDerivatives metric_time_and_flow_derivatives(const MetricNet& metric,
                                                   const SystemModel& system, const Vector& x,
                                                   const Vector& u, double t) {
  const MetricPoint p = evaluate_metric(metric, x, t);
  const Vector xdot = system.h(x, u, t);
  MetricDerivatives d;
  d.flow_dW = Matrix::Zero(metric.n, metric.n);
  for (int k = 0; k < metric.n; ++k) d.flow_dW += p.W_partials[static_cast<std::size_t>(k)] * xdot(k);
  d.dW_dt = metric.time_input ? p.W_partials.back() : Matrix::Zero(metric.n, metric.n);
  d.dM_dt = -p.M * (d.dW_dt + d.flow_dW) * p.M;
  return d;
}

}  // namespace ckit
