#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tvq/rng.hpp"

namespace tvq {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node;

// Shared handle to a node of the define-by-run graph. Values and gradients
// are 32-bit floats; a fresh graph is built every step and freed when the
// last handle goes out of scope.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, float stddev, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t size() const;
  std::vector<float>& data();
  const std::vector<float>& data() const;
  std::vector<float>& grad();
  const std::vector<float>& grad() const;
  bool requires_grad() const;
  float item() const;  // scalar tensors only
  void zero_grad();
  Tensor& set_name(std::string name);
  const std::string& name() const;
  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::string name;  // parameters only, for diagnostics
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates this node's grad into the parents' grads.
  std::function<void(Node&)> backward_fn;
};

// ---- forward ops ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);   // same shape
Tensor add(const Tensor& a, float s);
Tensor add_rowvec(const Tensor& a, const Tensor& bias);  // [R x C] + [C]
Tensor mul(const Tensor& a, const Tensor& b);   // elementwise, same shape
Tensor mul(const Tensor& a, float s);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);  // [R x K] * [K x C]
Tensor transpose(const Tensor& a);                // 2-D
// x: [Cin x T], w: [Cout x Cin x K], b: [Cout] or undefined.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding);
// x: [Cin x T], w: [Cin x Cout x K]; T_out = (T-1)*stride + K - 2*padding.
Tensor conv1d_transposed(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                         int padding);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sqrt_elem(const Tensor& x);  // gradient guarded near zero
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);  // over last dim
Tensor softmax(const Tensor& x);  // over last dim
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice(const Tensor& x, int r0, int r1, int c0, int c1);  // 2-D [r0,r1) x [c0,c1)
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor mean(const Tensor& x);                    // -> scalar
Tensor mse(const Tensor& a, const Tensor& b);    // -> scalar
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);  // -> scalar
// Forward takes the quantized values; backward passes gradients to
// pre_quant unchanged.
Tensor straight_through(const Tensor& pre_quant, const Tensor& quantized);
Tensor detach(const Tensor& x);

void backward(const Tensor& loss);

// ---- optimizer ------------------------------------------------------------

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);
  // One update from the gradients currently stored on the parameters.
  // A non-finite gradient aborts the whole step and reports the parameter.
  void step();
  void zero_grad();
  int64_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

}  // namespace tvq
