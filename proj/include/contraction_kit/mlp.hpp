#pragma once

// Fully connected tanh networks with exact input tangents (forward mode) and
// reverse accumulation through both the values and the tangents.

#include <functional>
#include <vector>

#include "contraction_kit/numerics.hpp"

namespace ckit {

struct DenseLayer {
  Matrix weight;  // fan_out × fan_in
  Vector bias;
};

/// Values and tangents cached by Mlp::forward for the reverse pass.
struct MlpPass {
  std::vector<Vector> activation;      // [0] is the input, back() the output
  std::vector<Matrix> tangent;         // d activation / d input-direction, one column per direction
  std::vector<Matrix> tangent_pre;     // pre-activation tangents, index aligned with activation

  const Vector& output() const { return activation.back(); }
  const Matrix& output_tangent() const { return tangent.back(); }
};

/// tanh on hidden layers, identity on the output layer.
class Mlp {
 public:
  Mlp() = default;
  /// widths = {input, hidden..., output}. Weights uniform in ±1/√fan_in,
  /// biases zero.
  Mlp(const std::vector<int>& widths, RngStream& rng);
  /// Zero-initialized network of the given shape.
  static Mlp zeros(const std::vector<int>& widths);

  int input_dim() const;
  int output_dim() const;
  std::vector<int> widths() const;
  std::size_t parameter_count() const;

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  Vector evaluate(const Vector& input) const;

  /// Forward pass carrying the columns of `directions` as input tangents.
  MlpPass forward(const Vector& input, const Matrix& directions) const;

  /// Accumulates into `grad` the parameter gradient of
  ///   ⟨output_cotangent, y⟩ + ⟨tangent_cotangent, dy⟩
  /// for the pass. `tangent_cotangent` may have zero columns.
  void backward(const MlpPass& pass, const Vector& output_cotangent,
                const Matrix& tangent_cotangent, Mlp& grad) const;

  /// Row-major weights then bias, layer by layer.
  Vector flatten() const;
  void assign(const Vector& params);
  void set_zero();

 private:
  std::vector<DenseLayer> layers_;
};

struct MlpEvaluation {
  Vector output;
  Matrix input_jacobian;
  /// Maps an output cotangent to the parameter gradient of ⟨cotangent, y⟩.
  std::function<Mlp(const Vector& cotangent)> parameter_gradient;
};

MlpEvaluation mlp_eval_with_grads(const Mlp& net, const Vector& input);

}  // namespace ckit
