#include "contraction_kit/mlp.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace ckit {

Mlp::Mlp(const std::vector<int>& widths, RngStream& rng) : Mlp(zeros(widths)) {
  for (auto& layer : layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
    for (Eigen::Index i = 0; i < layer.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < layer.weight.cols(); ++j)
        layer.weight(i, j) = rng.uniform(-bound, bound);
  }
}

Mlp Mlp::zeros(const std::vector<int>& widths) {
  if (widths.size() < 2) throw std::invalid_argument("Mlp: need at least input and output widths");
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("Mlp: widths must be positive");
  Mlp net;
  for (std::size_t l = 1; l < widths.size(); ++l)
    net.layers_.push_back({Matrix::Zero(widths[l], widths[l - 1]), Vector::Zero(widths[l])});
  return net;
}

int Mlp::input_dim() const { return static_cast<int>(layers_.front().weight.cols()); }
int Mlp::output_dim() const { return static_cast<int>(layers_.back().weight.rows()); }

std::vector<int> Mlp::widths() const {
  std::vector<int> w{input_dim()};
  for (const auto& layer : layers_) w.push_back(static_cast<int>(layer.weight.rows()));
  return w;
}

std::size_t Mlp::parameter_count() const {
  std::size_t count = 0;
  for (const auto& layer : layers_)
    count += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
  return count;
}

Vector Mlp::evaluate(const Vector& input) const {
  if (input.size() != input_dim()) throw std::invalid_argument("Mlp: input dimension mismatch");
  Vector a = input;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Vector pre = layers_[l].weight * a + layers_[l].bias;
    a = (l + 1 < layers_.size()) ? Vector(pre.array().tanh()) : pre;
  }
  return a;
}

MlpPass Mlp::forward(const Vector& input, const Matrix& directions) const {
  if (input.size() != input_dim() || directions.rows() != input_dim())
    throw std::invalid_argument("Mlp: input dimension mismatch");
  MlpPass pass;
  const std::size_t depth = layers_.size() + 1;
  pass.activation.reserve(depth);
  pass.tangent.reserve(depth);
  pass.tangent_pre.reserve(depth);
  pass.activation.push_back(input);
  pass.tangent.push_back(directions);
  pass.tangent_pre.push_back(directions);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    Vector pre = layer.weight * pass.activation.back() + layer.bias;
    Matrix dpre = layer.weight * pass.tangent.back();
    if (l + 1 < layers_.size()) {
      Vector a = pre.array().tanh();
      const Vector slope = 1.0 - a.array().square();
      Matrix da = slope.asDiagonal() * dpre;
      pass.activation.push_back(std::move(a));
      pass.tangent.push_back(std::move(da));
    } else {
      pass.activation.push_back(std::move(pre));
      pass.tangent.push_back(dpre);
    }
    pass.tangent_pre.push_back(std::move(dpre));
  }
  return pass;
}

void Mlp::backward(const MlpPass& pass, const Vector& output_cotangent,
                   const Matrix& tangent_cotangent, Mlp& grad) const {
  const bool has_tangents = tangent_cotangent.cols() > 0;
  Vector pre_bar = output_cotangent;
  Matrix dpre_bar = tangent_cotangent;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const auto& layer = layers_[l];
    auto& g = grad.layers_[l];
    const Vector& a_in = pass.activation[l];
    g.weight.noalias() += pre_bar * a_in.transpose();
    g.bias += pre_bar;
    if (has_tangents) g.weight.noalias() += dpre_bar * pass.tangent[l].transpose();
    if (l == 0) break;

    // Layer l−1 output is a = tanh(pre), da = s ⊙ dpre with s = 1 − a².
    const Vector a_bar = layer.weight.transpose() * pre_bar;
    const Vector& a = pass.activation[l];
    const Vector slope = 1.0 - a.array().square();
    Vector slope_bar = Vector::Zero(a.size());
    if (has_tangents) {
      const Matrix da_bar = layer.weight.transpose() * dpre_bar;
      slope_bar = da_bar.cwiseProduct(pass.tangent_pre[l]).rowwise().sum();
      dpre_bar = slope.asDiagonal() * da_bar;
    }
    pre_bar = (a_bar.array() - 2.0 * a.array() * slope_bar.array()) * slope.array();
  }
}

Vector Mlp::flatten() const {
  Vector out(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index k = 0;
  for (const auto& layer : layers_) {
    for (Eigen::Index i = 0; i < layer.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) out(k++) = layer.weight(i, j);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) out(k++) = layer.bias(i);
  }
  return out;
}

void Mlp::assign(const Vector& params) {
  if (params.size() != static_cast<Eigen::Index>(parameter_count()))
    throw std::invalid_argument("Mlp::assign: parameter count mismatch");
  Eigen::Index k = 0;
  for (auto& layer : layers_) {
    for (Eigen::Index i = 0; i < layer.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) layer.weight(i, j) = params(k++);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = params(k++);
  }
}

void Mlp::set_zero() {
  for (auto& layer : layers_) {
    layer.weight.setZero();
    layer.bias.setZero();
  }
}

MlpEvaluation mlp_eval_with_grads(const Mlp& net, const Vector& input) {
  auto pass = std::make_shared<MlpPass>(
      net.forward(input, Matrix::Identity(net.input_dim(), net.input_dim())));
  MlpEvaluation out;
  out.output = pass->output();
  out.input_jacobian = pass->output_tangent();
  out.parameter_gradient = [net, pass](const Vector& cotangent) {
    if (cotangent.size() != net.output_dim())
      throw std::invalid_argument("mlp_eval_with_grads: cotangent dimension mismatch");
    Mlp grad = Mlp::zeros(net.widths());
    net.backward(*pass, cotangent, Matrix(), grad);
    return grad;
  };
  return out;
}

}  // namespace ckit
