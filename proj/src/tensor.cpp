#include "tvq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

namespace tvq {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

std::shared_ptr<Node> make_node(Shape shape, std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data.assign(size_t(shape_numel(n->shape)), 0.0f);
  for (const auto& p : parents)
    if (p && p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->grad.assign(n->data.size(), 0.0f);
  n->parents = std::move(parents);
  return n;
}

void require_2d(const char* op, const Tensor& t) {
  if (t.shape().size() != 2)
    throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " +
                                shape_str(t.shape()));
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = make_node(std::move(shape), {});
  n->requires_grad = requires_grad;
  if (requires_grad) n->grad.assign(n->data.size(), 0.0f);
  return Tensor(n);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
  if (int64_t(data.size()) != shape_numel(shape))
    throw std::invalid_argument("Tensor::from: data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  Tensor t = zeros(std::move(shape), requires_grad);
  t.data() = std::move(data);
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = float(rng.normal(0.0, stddev));
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
int64_t Tensor::size() const { return int64_t(node_->data.size()); }
std::vector<float>& Tensor::data() { return node_->data; }
const std::vector<float>& Tensor::data() const { return node_->data; }
std::vector<float>& Tensor::grad() { return node_->grad; }
const std::vector<float>& Tensor::grad() const { return node_->grad; }
bool Tensor::requires_grad() const { return node_->requires_grad; }

float Tensor::item() const {
  if (node_->data.size() != 1)
    throw std::invalid_argument("Tensor::item: tensor is not scalar, shape " +
                                shape_str(node_->shape));
  return node_->data[0];
}

void Tensor::zero_grad() {
  if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Tensor& Tensor::set_name(std::string name) {
  node_->name = std::move(name);
  return *this;
}

const std::string& Tensor::name() const { return node_->name; }

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  auto n = make_node(a.shape(), {a.node(), b.node()});
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = av[i] + bv[i];
  n->backward_fn = [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  };
  return Tensor(n);
}

Tensor add(const Tensor& a, float s) {
  auto n = make_node(a.shape(), {a.node()});
  const auto& av = a.data();
  for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = av[i] + s;
  n->backward_fn = [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  };
  return Tensor(n);
}

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  require_2d("add_rowvec", a);
  const int rows = a.shape()[0], cols = a.shape()[1];
  if (bias.shape() != Shape{cols}) shape_error("add_rowvec", a.shape(), bias.shape());
  auto n = make_node(a.shape(), {a.node(), bias.node()});
  const auto& av = a.data();
  const auto& bv = bias.data();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) n->data[size_t(r) * cols + c] = av[size_t(r) * cols + c] + bv[c];
  n->backward_fn = [rows, cols](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    if (pb->requires_grad)
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) pb->grad[c] += self.grad[size_t(r) * cols + c];
  };
  return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  auto n = make_node(a.shape(), {a.node(), b.node()});
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = av[i] * bv[i];
  n->backward_fn = [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->data[i];
    if (pb->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->data[i];
  };
  return Tensor(n);
}

Tensor mul(const Tensor& a, float s) {
  auto n = make_node(a.shape(), {a.node()});
  const auto& av = a.data();
  for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = av[i] * s;
  n->backward_fn = [s](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * s;
  };
  return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, mul(b, -1.0f)); }

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  const int R = a.shape()[0], K = a.shape()[1], C = b.shape()[1];
  if (b.shape()[0] != K) shape_error("matmul", a.shape(), b.shape());
  auto n = make_node({R, C}, {a.node(), b.node()});
  const float* av = a.data().data();
  const float* bv = b.data().data();
  float* ov = n->data.data();
  for (int r = 0; r < R; ++r)
    for (int k = 0; k < K; ++k) {
      const float arK = av[size_t(r) * K + k];
      const float* brow = bv + size_t(k) * C;
      float* orow = ov + size_t(r) * C;
      for (int c = 0; c < C; ++c) orow[c] += arK * brow[c];
    }
  n->backward_fn = [R, K, C](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const float* g = self.grad.data();
    if (pa->requires_grad) {
      // dA[r][k] = sum_c g[r][c] * B[k][c]
      const float* bv = pb->data.data();
      for (int r = 0; r < R; ++r)
        for (int k = 0; k < K; ++k) {
          const float* grow = g + size_t(r) * C;
          const float* brow = bv + size_t(k) * C;
          float acc = 0.0f;
          for (int c = 0; c < C; ++c) acc += grow[c] * brow[c];
          pa->grad[size_t(r) * K + k] += acc;
        }
    }
    if (pb->requires_grad) {
      // dB[k][c] = sum_r A[r][k] * g[r][c]
      const float* av = pa->data.data();
      for (int r = 0; r < R; ++r)
        for (int k = 0; k < K; ++k) {
          const float arK = av[size_t(r) * K + k];
          const float* grow = g + size_t(r) * C;
          float* brow = pb->grad.data() + size_t(k) * C;
          for (int c = 0; c < C; ++c) brow[c] += arK * grow[c];
        }
    }
  };
  return Tensor(n);
}

Tensor transpose(const Tensor& a) {
  require_2d("transpose", a);
  const int R = a.shape()[0], C = a.shape()[1];
  auto n = make_node({C, R}, {a.node()});
  const auto& av = a.data();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) n->data[size_t(c) * R + r] = av[size_t(r) * C + c];
  n->backward_fn = [R, C](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) p->grad[size_t(r) * C + c] += self.grad[size_t(c) * R + r];
  };
  return Tensor(n);
}

// ---- convolutions ----------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
  require_2d("conv1d", x);
  if (w.shape().size() != 3) shape_error("conv1d", x.shape(), w.shape());
  const int Cin = x.shape()[0], T = x.shape()[1];
  const int Cout = w.shape()[0], K = w.shape()[2];
  if (w.shape()[1] != Cin) shape_error("conv1d", x.shape(), w.shape());
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv1d: bad stride/padding");
  if (b.defined() && b.shape() != Shape{Cout}) shape_error("conv1d", w.shape(), b.shape());
  const int Tp = T + 2 * padding;
  if (Tp < K)
    throw std::invalid_argument("conv1d: kernel " + std::to_string(K) +
                                " wider than padded input " + std::to_string(Tp));
  const int Tout = (Tp - K) / stride + 1;

  std::vector<std::shared_ptr<Node>> parents{x.node(), w.node()};
  if (b.defined()) parents.push_back(b.node());
  auto n = make_node({Cout, Tout}, std::move(parents));

  // Padded copy keeps the inner loops branch-free.
  std::vector<float> xp(size_t(Cin) * Tp, 0.0f);
  for (int ic = 0; ic < Cin; ++ic)
    std::copy_n(x.data().data() + size_t(ic) * T, T, xp.data() + size_t(ic) * Tp + padding);

  float* ov = n->data.data();
  if (b.defined())
    for (int oc = 0; oc < Cout; ++oc)
      std::fill_n(ov + size_t(oc) * Tout, Tout, b.data()[oc]);
  const float* wv = w.data().data();
  for (int oc = 0; oc < Cout; ++oc)
    for (int ic = 0; ic < Cin; ++ic)
      for (int k = 0; k < K; ++k) {
        const float wk = wv[(size_t(oc) * Cin + ic) * K + k];
        const float* xrow = xp.data() + size_t(ic) * Tp + k;
        float* orow = ov + size_t(oc) * Tout;
        for (int t = 0; t < Tout; ++t) orow[t] += wk * xrow[size_t(t) * stride];
      }

  const bool has_bias = b.defined();
  n->backward_fn = [=, xp = std::move(xp)](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    const float* g = self.grad.data();
    if (pw->requires_grad) {
      for (int oc = 0; oc < Cout; ++oc)
        for (int ic = 0; ic < Cin; ++ic)
          for (int k = 0; k < K; ++k) {
            const float* xrow = xp.data() + size_t(ic) * Tp + k;
            const float* grow = g + size_t(oc) * Tout;
            float acc = 0.0f;
            for (int t = 0; t < Tout; ++t) acc += grow[t] * xrow[size_t(t) * stride];
            pw->grad[(size_t(oc) * Cin + ic) * K + k] += acc;
          }
    }
    if (px->requires_grad) {
      std::vector<float> gxp(size_t(Cin) * Tp, 0.0f);
      const float* wv2 = pw->data.data();
      for (int oc = 0; oc < Cout; ++oc)
        for (int ic = 0; ic < Cin; ++ic)
          for (int k = 0; k < K; ++k) {
            const float wk = wv2[(size_t(oc) * Cin + ic) * K + k];
            float* gxrow = gxp.data() + size_t(ic) * Tp + k;
            const float* grow = g + size_t(oc) * Tout;
            for (int t = 0; t < Tout; ++t) gxrow[size_t(t) * stride] += wk * grow[t];
          }
      for (int ic = 0; ic < Cin; ++ic)
        for (int t = 0; t < T; ++t)
          px->grad[size_t(ic) * T + t] += gxp[size_t(ic) * Tp + padding + t];
    }
    if (has_bias) {
      auto& pbias = self.parents[2];
      if (pbias->requires_grad)
        for (int oc = 0; oc < Cout; ++oc) {
          float acc = 0.0f;
          for (int t = 0; t < Tout; ++t) acc += g[size_t(oc) * Tout + t];
          pbias->grad[oc] += acc;
        }
    }
  };
  return Tensor(n);
}

Tensor conv1d_transposed(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                         int padding) {
  require_2d("conv1d_transposed", x);
  if (w.shape().size() != 3) shape_error("conv1d_transposed", x.shape(), w.shape());
  const int Cin = x.shape()[0], T = x.shape()[1];
  const int Cout = w.shape()[1], K = w.shape()[2];
  if (w.shape()[0] != Cin) shape_error("conv1d_transposed", x.shape(), w.shape());
  if (stride < 1 || padding < 0)
    throw std::invalid_argument("conv1d_transposed: bad stride/padding");
  const int Tfull = (T - 1) * stride + K;  // before removing padding
  const int Tout = Tfull - 2 * padding;
  if (Tout < 1) throw std::invalid_argument("conv1d_transposed: padding removes entire output");
  if (b.defined() && b.shape() != Shape{Cout}) shape_error("conv1d_transposed", w.shape(), b.shape());

  std::vector<std::shared_ptr<Node>> parents{x.node(), w.node()};
  if (b.defined()) parents.push_back(b.node());
  auto n = make_node({Cout, Tout}, std::move(parents));

  std::vector<float> yfull(size_t(Cout) * Tfull, 0.0f);
  const float* xv = x.data().data();
  const float* wv = w.data().data();
  for (int ic = 0; ic < Cin; ++ic)
    for (int oc = 0; oc < Cout; ++oc)
      for (int k = 0; k < K; ++k) {
        const float wk = wv[(size_t(ic) * Cout + oc) * K + k];
        const float* xrow = xv + size_t(ic) * T;
        float* yrow = yfull.data() + size_t(oc) * Tfull + k;
        for (int t = 0; t < T; ++t) yrow[size_t(t) * stride] += wk * xrow[t];
      }
  for (int oc = 0; oc < Cout; ++oc)
    for (int t = 0; t < Tout; ++t) {
      float v = yfull[size_t(oc) * Tfull + padding + t];
      if (b.defined()) v += b.data()[oc];
      n->data[size_t(oc) * Tout + t] = v;
    }

  const bool has_bias = b.defined();
  n->backward_fn = [=](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    // Re-expand the output gradient to the unpadded length.
    std::vector<float> gfull(size_t(Cout) * Tfull, 0.0f);
    for (int oc = 0; oc < Cout; ++oc)
      for (int t = 0; t < Tout; ++t)
        gfull[size_t(oc) * Tfull + padding + t] = self.grad[size_t(oc) * Tout + t];
    if (px->requires_grad) {
      const float* wv2 = pw->data.data();
      for (int ic = 0; ic < Cin; ++ic)
        for (int oc = 0; oc < Cout; ++oc)
          for (int k = 0; k < K; ++k) {
            const float wk = wv2[(size_t(ic) * Cout + oc) * K + k];
            const float* grow = gfull.data() + size_t(oc) * Tfull + k;
            float* gxrow = px->grad.data() + size_t(ic) * T;
            for (int t = 0; t < T; ++t) gxrow[t] += wk * grow[size_t(t) * stride];
          }
    }
    if (pw->requires_grad) {
      const float* xv2 = px->data.data();
      for (int ic = 0; ic < Cin; ++ic)
        for (int oc = 0; oc < Cout; ++oc)
          for (int k = 0; k < K; ++k) {
            const float* xrow = xv2 + size_t(ic) * T;
            const float* grow = gfull.data() + size_t(oc) * Tfull + k;
            float acc = 0.0f;
            for (int t = 0; t < T; ++t) acc += xrow[t] * grow[size_t(t) * stride];
            pw->grad[(size_t(ic) * Cout + oc) * K + k] += acc;
          }
    }
    if (has_bias) {
      auto& pbias = self.parents[2];
      if (pbias->requires_grad)
        for (int oc = 0; oc < Cout; ++oc) {
          float acc = 0.0f;
          for (int t = 0; t < Tout; ++t) acc += self.grad[size_t(oc) * Tout + t];
          pbias->grad[oc] += acc;
        }
    }
  };
  return Tensor(n);
}

// ---- nonlinearities --------------------------------------------------------

Tensor relu(const Tensor& x) {
  auto n = make_node(x.shape(), {x.node()});
  const auto& xv = x.data();
  for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  n->backward_fn = [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (p->data[i] > 0.0f) p->grad[i] += self.grad[i];
  };
  return Tensor(n);
}

Tensor gelu(const Tensor& x) {
  // tanh approximation; differentiated analytically below.
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  auto n = make_node(x.shape(), {x.node()});
  const auto& xv = x.data();
  for (size_t i = 0; i < n->data.size(); ++i) {
    const float v = xv[i];
    n->data[i] = 0.5f * v * (1.0f + std::tanh(kC * (v + kA * v * v * v)));
  }
  n->backward_fn = [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const float v = p->data[i];
      const float u = kC * (v + kA * v * v * v);
      const float th = std::tanh(u);
      const float dudv = kC * (1.0f + 3.0f * kA * v * v);
      const float d = 0.5f * (1.0f + th) + 0.5f * v * (1.0f - th * th) * dudv;
      p->grad[i] += self.grad[i] * d;
    }
  };
  return Tensor(n);
}

Tensor sqrt_elem(const Tensor& x) {
  auto n = make_node(x.shape(), {x.node()});
  const auto& xv = x.data();
  for (size_t i = 0; i < n->data.size(); ++i)
    n->data[i] = xv[i] > 0.0f ? std::sqrt(xv[i]) : 0.0f;
  n->backward_fn = [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const float y = self.data[i];
      p->grad[i] += self.grad[i] * 0.5f / std::max(y, 1e-6f);
    }
  };
  return Tensor(n);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_2d("layer_norm", x);
  const int R = x.shape()[0], C = x.shape()[1];
  if (gain.shape() != Shape{C} || bias.shape() != Shape{C})
    shape_error("layer_norm", x.shape(), gain.shape());
  constexpr float kEps = 1e-5f;
  auto n = make_node(x.shape(), {x.node(), gain.node(), bias.node()});
  std::vector<float> xhat(size_t(R) * C);
  std::vector<float> inv(R);
  const auto& xv = x.data();
  for (int r = 0; r < R; ++r) {
    double mu = 0.0;
    for (int c = 0; c < C; ++c) mu += xv[size_t(r) * C + c];
    mu /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) {
      const double d = xv[size_t(r) * C + c] - mu;
      var += d * d;
    }
    var /= C;
    const float iv = float(1.0 / std::sqrt(var + kEps));
    inv[r] = iv;
    for (int c = 0; c < C; ++c) {
      const float xh = (xv[size_t(r) * C + c] - float(mu)) * iv;
      xhat[size_t(r) * C + c] = xh;
      n->data[size_t(r) * C + c] = xh * gain.data()[c] + bias.data()[c];
    }
  }
  n->backward_fn = [R, C, xhat = std::move(xhat), inv = std::move(inv)](Node& self) {
    auto& px = self.parents[0];
    auto& pg = self.parents[1];
    auto& pb = self.parents[2];
    const float* g = self.grad.data();
    if (pg->requires_grad || pb->requires_grad) {
      for (int c = 0; c < C; ++c) {
        double dg = 0.0, db = 0.0;
        for (int r = 0; r < R; ++r) {
          dg += double(g[size_t(r) * C + c]) * xhat[size_t(r) * C + c];
          db += g[size_t(r) * C + c];
        }
        if (pg->requires_grad) pg->grad[c] += float(dg);
        if (pb->requires_grad) pb->grad[c] += float(db);
      }
    }
    if (px->requires_grad) {
      for (int r = 0; r < R; ++r) {
        double m1 = 0.0, m2 = 0.0;  // mean(gg), mean(gg * xhat)
        for (int c = 0; c < C; ++c) {
          const double gg = double(g[size_t(r) * C + c]) * pg->data[c];
          m1 += gg;
          m2 += gg * xhat[size_t(r) * C + c];
        }
        m1 /= C;
        m2 /= C;
        for (int c = 0; c < C; ++c) {
          const double gg = double(g[size_t(r) * C + c]) * pg->data[c];
          px->grad[size_t(r) * C + c] +=
              float(inv[r] * (gg - m1 - double(xhat[size_t(r) * C + c]) * m2));
        }
      }
    }
  };
  return Tensor(n);
}

Tensor softmax(const Tensor& x) {
  require_2d("softmax", x);
  const int R = x.shape()[0], C = x.shape()[1];
  auto n = make_node(x.shape(), {x.node()});
  const auto& xv = x.data();
  for (int r = 0; r < R; ++r) {
    float mx = xv[size_t(r) * C];
    for (int c = 1; c < C; ++c) mx = std::max(mx, xv[size_t(r) * C + c]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      const float e = std::exp(xv[size_t(r) * C + c] - mx);
      n->data[size_t(r) * C + c] = e;
      sum += e;
    }
    const float is = float(1.0 / sum);
    for (int c = 0; c < C; ++c) n->data[size_t(r) * C + c] *= is;
  }
  n->backward_fn = [R, C](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    for (int r = 0; r < R; ++r) {
      double dot = 0.0;
      for (int c = 0; c < C; ++c)
        dot += double(self.grad[size_t(r) * C + c]) * self.data[size_t(r) * C + c];
      for (int c = 0; c < C; ++c)
        p->grad[size_t(r) * C + c] += self.data[size_t(r) * C + c] *
                                      float(double(self.grad[size_t(r) * C + c]) - dot);
    }
  };
  return Tensor(n);
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  require_2d("embedding_lookup", table);
  const int V = table.shape()[0], D = table.shape()[1];
  for (int id : ids)
    if (id < 0 || id >= V)
      throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                  " out of range [0, " + std::to_string(V) + ")");
  auto n = make_node({int(ids.size()), D}, {table.node()});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().data() + size_t(ids[i]) * D, D, n->data.data() + i * D);
  n->backward_fn = [ids, D](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    for (size_t i = 0; i < ids.size(); ++i)
      for (int d = 0; d < D; ++d)
        p->grad[size_t(ids[i]) * D + d] += self.grad[i * size_t(D) + d];
  };
  return Tensor(n);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) shape_error("reshape", x.shape(), shape);
  auto n = make_node(std::move(shape), {x.node()});
  n->data = x.data();
  n->backward_fn = [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  };
  return Tensor(n);
}

Tensor slice(const Tensor& x, int r0, int r1, int c0, int c1) {
  require_2d("slice", x);
  const int R = x.shape()[0], C = x.shape()[1];
  if (r0 < 0 || r1 > R || r0 >= r1 || c0 < 0 || c1 > C || c0 >= c1)
    throw std::invalid_argument("slice: range [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ")x[" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") invalid for " + shape_str(x.shape()));
  const int Rs = r1 - r0, Cs = c1 - c0;
  auto n = make_node({Rs, Cs}, {x.node()});
  for (int r = 0; r < Rs; ++r)
    std::copy_n(x.data().data() + size_t(r0 + r) * C + c0, Cs, n->data.data() + size_t(r) * Cs);
  n->backward_fn = [r0, c0, C, Rs, Cs](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    for (int r = 0; r < Rs; ++r)
      for (int c = 0; c < Cs; ++c)
        p->grad[size_t(r0 + r) * C + c0 + c] += self.grad[size_t(r) * Cs + c];
  };
  return Tensor(n);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  for (const auto& p : parts) require_2d("concat_rows", p);
  const int C = parts[0].shape()[1];
  int R = 0;
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& p : parts) {
    if (p.shape()[1] != C) shape_error("concat_rows", parts[0].shape(), p.shape());
    R += p.shape()[0];
    parents.push_back(p.node());
  }
  auto n = make_node({R, C}, std::move(parents));
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), n->data.begin() + off);
    off += p.data().size();
  }
  n->backward_fn = [](Node& self) {
    size_t off2 = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad)
        for (size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[off2 + i];
      off2 += p->data.size();
    }
  };
  return Tensor(n);
}

// ---- reductions and losses -------------------------------------------------

Tensor mean(const Tensor& x) {
  auto n = make_node({1}, {x.node()});
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const size_t N = x.data().size();
  n->data[0] = float(acc / double(N));
  n->backward_fn = [N](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    const float g = self.grad[0] / float(N);
    for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += g;
  };
  return Tensor(n);
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mse", a.shape(), b.shape());
  auto n = make_node({1}, {a.node(), b.node()});
  const auto& av = a.data();
  const auto& bv = b.data();
  double acc = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    const double d = double(av[i]) - double(bv[i]);
    acc += d * d;
  }
  const size_t N = av.size();
  n->data[0] = float(acc / double(N));
  n->backward_fn = [N](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const float g = self.grad[0] * 2.0f / float(N);
    for (size_t i = 0; i < pa->data.size(); ++i) {
      const float d = pa->data[i] - pb->data[i];
      if (pa->requires_grad) pa->grad[i] += g * d;
      if (pb->requires_grad) pb->grad[i] -= g * d;
    }
  };
  return Tensor(n);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  require_2d("cross_entropy", logits);
  const int R = logits.shape()[0], C = logits.shape()[1];
  if (int(targets.size()) != R)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(R) + " rows");
  for (int t : targets)
    if (t < 0 || t >= C)
      throw std::invalid_argument("cross_entropy: target " + std::to_string(t) +
                                  " out of range [0, " + std::to_string(C) + ")");
  auto n = make_node({1}, {logits.node()});
  std::vector<float> probs(size_t(R) * C);
  const auto& lv = logits.data();
  double loss = 0.0;
  for (int r = 0; r < R; ++r) {
    float mx = lv[size_t(r) * C];
    for (int c = 1; c < C; ++c) mx = std::max(mx, lv[size_t(r) * C + c]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      const float e = std::exp(lv[size_t(r) * C + c] - mx);
      probs[size_t(r) * C + c] = e;
      sum += e;
    }
    for (int c = 0; c < C; ++c) probs[size_t(r) * C + c] = float(probs[size_t(r) * C + c] / sum);
    loss += std::log(sum) + mx - lv[size_t(r) * C + targets[r]];
  }
  n->data[0] = float(loss / R);
  n->backward_fn = [R, C, targets, probs = std::move(probs)](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    const float g = self.grad[0] / float(R);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) {
        float d = probs[size_t(r) * C + c];
        if (c == targets[r]) d -= 1.0f;
        p->grad[size_t(r) * C + c] += g * d;
      }
  };
  return Tensor(n);
}

Tensor straight_through(const Tensor& pre_quant, const Tensor& quantized) {
  if (pre_quant.shape() != quantized.shape())
    shape_error("straight_through", pre_quant.shape(), quantized.shape());
  auto n = make_node(pre_quant.shape(), {pre_quant.node()});
  n->data = quantized.data();
  n->backward_fn = [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  };
  return Tensor(n);
}

Tensor detach(const Tensor& x) {
  auto n = make_node(x.shape(), {});
  n->data = x.data();
  return Tensor(n);
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  if (!loss.requires_grad()) return;  // nothing reachable requires gradients

  // Post-order DFS: parents land before their consumers, so the reversed
  // list visits each node exactly once after everything downstream of it.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---- Adam ------------------------------------------------------------------

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0f);
    v_.emplace_back(p.size(), 0.0f);
  }
}

void Adam::step() {
  for (const auto& p : params_)
    for (float g : p.grad())
      if (!std::isfinite(g))
        throw std::runtime_error("adam: non-finite gradient in parameter '" +
                                 (p.name().empty() ? std::string("<unnamed>") : p.name()) + "'");
  ++t_;
  const double bc1 = 1.0 - std::pow(double(cfg_.beta1), double(t_));
  const double bc2 = 1.0 - std::pow(double(cfg_.beta2), double(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& theta = params_[i].data();
    const auto& g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < theta.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      theta[j] -= float(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace tvq
