// Differentiable model families: per-sample loss, gradient, Hessian-vector
// product and gradient-vector product, all analytic and templated on the
// scalar type.
#ifndef METAGRAD_MODEL_HPP
#define METAGRAD_MODEL_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "metagrad/core.hpp"
#include "metagrad/dataset.hpp"

namespace metagrad {

/// Loss applied to the model output vector.
enum class Head {
  Squared,   ///< ½(o − y)², single output
  Logistic,  ///< binary cross-entropy on a single logit, y ∈ {0, 1}
  Softmax,   ///< multi-class cross-entropy on one logit per class
};

enum class Activation { Tanh, Sigmoid };

/// o = θᵀx (+ b), squared loss.
struct LinearRegression {
  Index input_dim = 1;
  bool bias = false;
};

/// Binary logistic regression, o = θᵀx (+ b) is the logit of class 1.
struct LogisticRegression {
  Index input_dim = 1;
  bool bias = false;
};

/// Fully connected network. `widths` lists the input width, hidden widths and
/// output width. Hidden layers use `activation`; the output layer is affine.
struct Mlp {
  std::vector<Index> widths{2, 8, 1};
  Activation activation = Activation::Tanh;
  Head head = Head::Squared;
};

using ModelFamily = std::variant<LinearRegression, LogisticRegression, Mlp>;

inline Index param_dim(const ModelFamily& model) {
  return std::visit(
      [](const auto& m) -> Index {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, Mlp>) {
          Index total = 0;
          for (std::size_t l = 1; l < m.widths.size(); ++l)
            total += m.widths[l] * m.widths[l - 1] + m.widths[l];
          return total;
        } else {
          return m.input_dim + (m.bias ? 1 : 0);
        }
      },
      model);
}

inline Head head_of(const ModelFamily& model) {
  if (std::holds_alternative<LinearRegression>(model)) return Head::Squared;
  if (std::holds_alternative<LogisticRegression>(model)) return Head::Logistic;
  return std::get<Mlp>(model).head;
}

inline Index output_dim(const ModelFamily& model) {
  if (const auto* mlp = std::get_if<Mlp>(&model)) return mlp->widths.back();
  return 1;
}

inline Index input_dim(const ModelFamily& model) {
  return std::visit(
      [](const auto& m) -> Index {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, Mlp>)
          return m.widths.front();
        else
          return m.input_dim;
      },
      model);
}

/// Rejects a model/dataset pairing whose shapes or loss heads disagree.
void validate(const ModelFamily& model, const Dataset& data);

std::string describe(const ModelFamily& model);

/// Seeded initial parameters: zeros for the linear families; for the MLP,
/// weights drawn from N(0, 1/fan_in) and zero biases.
VectorXd initial_params(const ModelFamily& model, std::uint64_t seed);

namespace detail {

template <typename Scalar>
Scalar softplus(Scalar x) {
  using std::exp;
  using std::log1p;
  using std::abs;
  return std::max(x, Scalar(0)) + log1p(exp(-abs(x)));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= 0) return Scalar(1) / (Scalar(1) + exp(-x));
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar head_loss(Head head, const Vector<Scalar>& out, double target) {
  switch (head) {
    case Head::Squared: {
      const Scalar r = out[0] - Scalar(target);
      return Scalar(0.5) * r * r;
    }
    case Head::Logistic:
      return softplus(out[0]) - Scalar(target) * out[0];
    case Head::Softmax: {
      using std::exp;
      using std::log;
      const Scalar top = out.maxCoeff();
      const Scalar lse = top + log((out.array() - top).exp().sum());
      return lse - out[static_cast<Index>(target)];
    }
  }
  return Scalar(0);
}

/// dL/do.
template <typename Scalar>
Vector<Scalar> head_grad(Head head, const Vector<Scalar>& out, double target) {
  Vector<Scalar> g(out.size());
  switch (head) {
    case Head::Squared:
      g[0] = out[0] - Scalar(target);
      break;
    case Head::Logistic:
      g[0] = sigmoid(out[0]) - Scalar(target);
      break;
    case Head::Softmax: {
      const Scalar top = out.maxCoeff();
      g = (out.array() - top).exp().matrix();
      g /= g.sum();
      g[static_cast<Index>(target)] -= Scalar(1);
      break;
    }
  }
  return g;
}

/// (d²L/do²) · dout.
template <typename Scalar>
Vector<Scalar> head_hvp(Head head, const Vector<Scalar>& out,
                        const Vector<Scalar>& dout) {
  switch (head) {
    case Head::Squared:
      return dout;
    case Head::Logistic: {
      const Scalar s = sigmoid(out[0]);
      return (s * (Scalar(1) - s)) * dout;
    }
    case Head::Softmax: {
      const Scalar top = out.maxCoeff();
      Vector<Scalar> p = (out.array() - top).exp().matrix();
      p /= p.sum();
      return (p.array() * dout.array()).matrix() - p * p.dot(dout);
    }
  }
  return dout;
}

template <typename Scalar>
struct ActivationDerivs {
  Vector<Scalar> value, first, second;
};

template <typename Scalar>
ActivationDerivs<Scalar> activate(Activation act, const Vector<Scalar>& z) {
  ActivationDerivs<Scalar> d;
  if (act == Activation::Tanh) {
    d.value = z.array().tanh().matrix();
    d.first = (Scalar(1) - d.value.array().square()).matrix();
    d.second = (Scalar(-2) * d.value.array() * d.first.array()).matrix();
  } else {
    d.value = z.unaryExpr([](Scalar x) { return sigmoid(x); });
    d.first = (d.value.array() * (Scalar(1) - d.value.array())).matrix();
    d.second =
        (d.first.array() * (Scalar(1) - Scalar(2) * d.value.array())).matrix();
  }
  return d;
}

/// Features of the generalized-linear families: x, optionally with a trailing
/// constant 1 for the intercept.
template <typename Scalar>
Vector<Scalar> linear_features(const VectorXd& x, bool bias) {
  Vector<Scalar> psi(x.size() + (bias ? 1 : 0));
  psi.head(x.size()) = x.cast<Scalar>();
  if (bias) psi[x.size()] = Scalar(1);
  return psi;
}

template <typename Scalar>
struct MlpLayerView {
  Eigen::Map<const Matrix<Scalar>> weight;
  Eigen::Map<const Vector<Scalar>> bias;
};

template <typename Scalar>
std::vector<MlpLayerView<Scalar>> mlp_layers(const Mlp& m,
                                             const Vector<Scalar>& params) {
  std::vector<MlpLayerView<Scalar>> layers;
  Index offset = 0;
  for (std::size_t l = 1; l < m.widths.size(); ++l) {
    const Index in = m.widths[l - 1], out = m.widths[l];
    layers.push_back({Eigen::Map<const Matrix<Scalar>>(params.data() + offset,
                                                       out, in),
                      Eigen::Map<const Vector<Scalar>>(
                          params.data() + offset + out * in, out)});
    offset += out * in + out;
  }
  return layers;
}

/// Activations of every layer for one input. pre[l] is the pre-activation of
/// layer l+1; post[0] is the input and post[l] the output of hidden layer l.
template <typename Scalar>
struct MlpTrace {
  std::vector<Vector<Scalar>> pre;
  std::vector<ActivationDerivs<Scalar>> act;
  std::vector<Vector<Scalar>> post;
  Vector<Scalar> output;
};

template <typename Scalar>
MlpTrace<Scalar> mlp_forward(const Mlp& m,
                             const std::vector<MlpLayerView<Scalar>>& layers,
                             const VectorXd& x) {
  MlpTrace<Scalar> tr;
  tr.post.push_back(x.cast<Scalar>());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Vector<Scalar> z = layers[l].weight * tr.post.back() + layers[l].bias;
    if (l + 1 == layers.size()) {
      tr.output = z;
      tr.pre.push_back(std::move(z));
    } else {
      tr.act.push_back(activate(m.activation, z));
      tr.post.push_back(tr.act.back().value);
      tr.pre.push_back(std::move(z));
    }
  }
  return tr;
}

/// Forward-mode tangent of the output in parameter direction v. Returns the
/// tangents of every layer input (post) alongside the output tangent.
template <typename Scalar>
std::vector<Vector<Scalar>> mlp_tangent(
    const Mlp& m, const std::vector<MlpLayerView<Scalar>>& layers,
    const std::vector<MlpLayerView<Scalar>>& direction,
    const MlpTrace<Scalar>& tr, std::vector<Vector<Scalar>>& pre_dot) {
  (void)m;
  std::vector<Vector<Scalar>> post_dot;
  post_dot.push_back(Vector<Scalar>::Zero(tr.post[0].size()));
  pre_dot.clear();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Vector<Scalar> zdot = direction[l].weight * tr.post[l] +
                          layers[l].weight * post_dot[l] + direction[l].bias;
    if (l + 1 < layers.size())
      post_dot.push_back((tr.act[l].first.array() * zdot.array()).matrix());
    pre_dot.push_back(std::move(zdot));
  }
  return post_dot;
}

template <typename Scalar>
Vector<Scalar> mlp_grad(const Mlp& m, const Vector<Scalar>& params,
                        const Example& z) {
  const auto layers = mlp_layers(m, params);
  const auto tr = mlp_forward(m, layers, z.features);
  Vector<Scalar> g(params.size());
  Vector<Scalar> delta = head_grad(m.head, tr.output, z.target);
  Index offset = params.size();
  for (std::size_t l = layers.size(); l-- > 0;) {
    const Index out = layers[l].weight.rows(), in = layers[l].weight.cols();
    offset -= out * in + out;
    Eigen::Map<Matrix<Scalar>>(g.data() + offset, out, in) =
        delta * tr.post[l].transpose();
    g.segment(offset + out * in, out) = delta;
    if (l > 0) {
      delta = ((layers[l].weight.transpose() * delta).array() *
               tr.act[l - 1].first.array())
                  .matrix();
    }
  }
  return g;
}

/// Forward-over-reverse Hessian-vector product of the MLP loss.
template <typename Scalar>
Vector<Scalar> mlp_hvp(const Mlp& m, const Vector<Scalar>& params,
                       const Example& z, const Vector<Scalar>& v) {
  const auto layers = mlp_layers(m, params);
  const auto dir = mlp_layers(m, v);
  const auto tr = mlp_forward(m, layers, z.features);
  std::vector<Vector<Scalar>> pre_dot;
  const auto post_dot = mlp_tangent(m, layers, dir, tr, pre_dot);

  Vector<Scalar> hv(params.size());
  Vector<Scalar> delta = head_grad(m.head, tr.output, z.target);
  Vector<Scalar> delta_dot = head_hvp(m.head, tr.output, pre_dot.back());
  Index offset = params.size();
  for (std::size_t l = layers.size(); l-- > 0;) {
    const Index out = layers[l].weight.rows(), in = layers[l].weight.cols();
    offset -= out * in + out;
    Eigen::Map<Matrix<Scalar>>(hv.data() + offset, out, in) =
        delta_dot * tr.post[l].transpose() + delta * post_dot[l].transpose();
    hv.segment(offset + out * in, out) = delta_dot;
    if (l > 0) {
      const Vector<Scalar> back = layers[l].weight.transpose() * delta;
      const Vector<Scalar> back_dot = dir[l].weight.transpose() * delta +
                                      layers[l].weight.transpose() * delta_dot;
      const auto& a = tr.act[l - 1];
      delta_dot = (a.second.array() * pre_dot[l - 1].array() * back.array() +
                   a.first.array() * back_dot.array())
                      .matrix();
      delta = (back.array() * a.first.array()).matrix();
    }
  }
  return hv;
}

}  // namespace detail

/// Model output vector (logits or prediction) for input x.
template <typename Scalar>
Vector<Scalar> output(const ModelFamily& model, const Vector<Scalar>& params,
                      const VectorXd& x) {
  if (const auto* mlp = std::get_if<Mlp>(&model)) {
    return detail::mlp_forward(*mlp, detail::mlp_layers(*mlp, params), x)
        .output;
  }
  const bool bias = std::holds_alternative<LinearRegression>(model)
                        ? std::get<LinearRegression>(model).bias
                        : std::get<LogisticRegression>(model).bias;
  Vector<Scalar> o(1);
  o[0] = params.dot(detail::linear_features<Scalar>(x, bias));
  return o;
}

template <typename Scalar>
Scalar loss(const ModelFamily& model, const Vector<Scalar>& params,
            const Example& z) {
  require(params.size() == param_dim(model), "loss: params size mismatch");
  const Scalar value =
      detail::head_loss(head_of(model), output(model, params, z.features),
                        z.target);
  check_finite(value, "loss");
  return value;
}

namespace detail {
inline bool linear_bias(const ModelFamily& model) {
  if (const auto* m = std::get_if<LinearRegression>(&model)) return m->bias;
  return std::get<LogisticRegression>(model).bias;
}
}  // namespace detail

template <typename Scalar>
Vector<Scalar> grad(const ModelFamily& model, const Vector<Scalar>& params,
                    const Example& z) {
  require(params.size() == param_dim(model), "grad: params size mismatch");
  Vector<Scalar> g;
  if (const auto* mlp = std::get_if<Mlp>(&model)) {
    g = detail::mlp_grad(*mlp, params, z);
  } else {
    const auto psi =
        detail::linear_features<Scalar>(z.features, detail::linear_bias(model));
    Vector<Scalar> o(1);
    o[0] = params.dot(psi);
    g = detail::head_grad(head_of(model), o, z.target)[0] * psi;
  }
  if (!g.allFinite()) throw DivergenceError("non-finite gradient");
  return g;
}

template <typename Scalar>
Vector<Scalar> hvp(const ModelFamily& model, const Vector<Scalar>& params,
                   const Example& z, const Vector<Scalar>& v) {
  require(params.size() == param_dim(model), "hvp: params size mismatch");
  require(v.size() == params.size(), "hvp: direction size mismatch");
  Vector<Scalar> hv;
  if (const auto* mlp = std::get_if<Mlp>(&model)) {
    hv = detail::mlp_hvp(*mlp, params, z, v);
  } else {
    const auto psi =
        detail::linear_features<Scalar>(z.features, detail::linear_bias(model));
    Vector<Scalar> o(1), dout(1);
    o[0] = params.dot(psi);
    dout[0] = psi.dot(v);
    hv = detail::head_hvp(head_of(model), o, dout)[0] * psi;
  }
  if (!hv.allFinite()) throw DivergenceError("non-finite Hessian-vector product");
  return hv;
}

/// ∇ℓ(z)·v through a single forward tangent pass; the gradient is never
/// formed.
template <typename Scalar>
Scalar grad_dot(const ModelFamily& model, const Vector<Scalar>& params,
                const Example& z, const Vector<Scalar>& v) {
  require(params.size() == param_dim(model), "grad_dot: params size mismatch");
  require(v.size() == params.size(), "grad_dot: direction size mismatch");
  Scalar value;
  if (const auto* mlp = std::get_if<Mlp>(&model)) {
    const auto layers = detail::mlp_layers(*mlp, params);
    const auto dir = detail::mlp_layers(*mlp, v);
    const auto tr = detail::mlp_forward(*mlp, layers, z.features);
    std::vector<Vector<Scalar>> pre_dot;
    detail::mlp_tangent(*mlp, layers, dir, tr, pre_dot);
    value = detail::head_grad(mlp->head, tr.output, z.target)
                .dot(pre_dot.back());
  } else {
    const auto psi =
        detail::linear_features<Scalar>(z.features, detail::linear_bias(model));
    Vector<Scalar> o(1);
    o[0] = params.dot(psi);
    value = detail::head_grad(head_of(model), o, z.target)[0] * psi.dot(v);
  }
  check_finite(value, "gradient-vector product");
  return value;
}

/// Gradient of the scalar model output (output width 1) with respect to the
/// parameters. Used by baselines that linearize the network.
VectorXd output_grad(const ModelFamily& model, const VectorXd& params,
                     const VectorXd& x);

}  // namespace metagrad

#endif  // METAGRAD_MODEL_HPP
