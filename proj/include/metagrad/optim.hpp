// Update rules h_t(s, g) with their exact vector-Jacobian products.
//
// Conventions (η = η_t, λ = weight decay, all operations elementwise):
//
//   sgd       θ' = (1 − ηλ)θ − η g
//   momentum  u' = μ u + g
//             θ' = (1 − ηλ)θ − η u'                      (heavy ball)
//   adam      m' = β₁ m + (1 − β₁) g
//             v' = β₂ v + (1 − β₂) g²
//             θ' = (1 − ηλ)θ − η m' / (√(v' + ε_root) + ε)
//
// Adam carries no bias correction. ε_root > 0 keeps the derivative of the
// square root bounded as v' → 0. Weight decay is decoupled from g.
#ifndef METAGRAD_OPTIM_HPP
#define METAGRAD_OPTIM_HPP

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "metagrad/core.hpp"

namespace metagrad {

enum class RuleKind { Sgd, SgdMomentum, Adam };

/// η_t as a pure function of t.
struct LrSchedule {
  enum class Kind { Constant, OneCycle };
  Kind kind = Kind::Constant;
  double max_lr = 0.1;
  // One-cycle linear: ramps from start_factor·max_lr to max_lr over the first
  // peak_fraction of training, then linearly to end_factor·max_lr at T.
  double start_factor = 1e-6;
  double peak_fraction = 0.25;
  double end_factor = 0.1;
  long total_steps = 1;

  double rate(long t) const {
    if (kind == Kind::Constant) return max_lr;
    const double total = static_cast<double>(std::max(total_steps, 1L));
    const double peak = peak_fraction * total;
    const double x = static_cast<double>(t);
    if (x <= peak && peak > 0.0)
      return max_lr * (start_factor + (1.0 - start_factor) * x / peak);
    const double tail = std::max(total - peak, 1.0);
    return max_lr * (1.0 + (end_factor - 1.0) * (x - peak) / tail);
  }
};

struct UpdateRule {
  RuleKind kind = RuleKind::Sgd;
  LrSchedule schedule;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double eps_root = 1e-6;
  double weight_decay = 0.0;

  std::size_t moment_blocks() const {
    switch (kind) {
      case RuleKind::Sgd: return 0;
      case RuleKind::SgdMomentum: return 1;
      case RuleKind::Adam: return 2;
    }
    return 0;
  }
};

/// Throws InvalidArgument unless the hyperparameters satisfy the rule's
/// domain (η_t > 0 for t < T, β ∈ [0, 1), ε_root > 0 for Adam).
void validate(const UpdateRule& rule);

std::string describe(const UpdateRule& rule);

/// s_t: parameters plus the rule's moment blocks (velocity, or m and v).
template <typename Scalar>
struct OptimizerStateT {
  Vector<Scalar> params;
  std::vector<Vector<Scalar>> moments;
  long step = 0;

  static OptimizerStateT initial(const UpdateRule& rule,
                                 Vector<Scalar> params) {
    OptimizerStateT s;
    s.moments.assign(rule.moment_blocks(),
                     Vector<Scalar>::Zero(params.size()));
    s.params = std::move(params);
    return s;
  }

  bool bit_equal(const OptimizerStateT& other) const {
    if (step != other.step || moments.size() != other.moments.size())
      return false;
    auto same = [](const Vector<Scalar>& a, const Vector<Scalar>& b) {
      return a.size() == b.size() &&
             std::equal(a.data(), a.data() + a.size(), b.data(),
                        [](Scalar x, Scalar y) {
                          return std::memcmp(&x, &y, sizeof(Scalar)) == 0;
                        });
    };
    if (!same(params, other.params)) return false;
    for (std::size_t k = 0; k < moments.size(); ++k)
      if (!same(moments[k], other.moments[k])) return false;
    return true;
  }
};

/// Δ_t = ∂f/∂s_t, block-structured like the state.
template <typename Scalar>
struct StateAdjointT {
  Vector<Scalar> params;
  std::vector<Vector<Scalar>> moments;

  static StateAdjointT zero(const UpdateRule& rule, Index dim) {
    StateAdjointT a;
    a.params = Vector<Scalar>::Zero(dim);
    a.moments.assign(rule.moment_blocks(), Vector<Scalar>::Zero(dim));
    return a;
  }

  bool all_finite() const {
    if (!params.allFinite()) return false;
    for (const auto& m : moments)
      if (!m.allFinite()) return false;
    return true;
  }
};

using OptimizerState = OptimizerStateT<double>;
using StateAdjoint = StateAdjointT<double>;

namespace detail {

template <typename Scalar>
void check_shapes(const UpdateRule& rule, const OptimizerStateT<Scalar>& s,
                  const Vector<Scalar>& g) {
  require(g.size() == s.params.size(), "update: gradient size mismatch");
  require(s.moments.size() == rule.moment_blocks(),
          "update: state has the wrong number of moment blocks");
  for (const auto& m : s.moments)
    require(m.size() == s.params.size(), "update: moment size mismatch");
}

template <typename Scalar>
void check_adjoint_shapes(const UpdateRule& rule,
                          const OptimizerStateT<Scalar>& s,
                          const StateAdjointT<Scalar>& a) {
  require(a.params.size() == s.params.size(),
          "adjoint: params block size mismatch");
  require(a.moments.size() == rule.moment_blocks(),
          "adjoint: wrong number of moment blocks");
  for (const auto& m : a.moments)
    require(m.size() == s.params.size(), "adjoint: moment size mismatch");
}

}  // namespace detail

template <typename Scalar>
OptimizerStateT<Scalar> apply(const UpdateRule& rule,
                              const OptimizerStateT<Scalar>& s,
                              const Vector<Scalar>& g) {
  detail::check_shapes(rule, s, g);
  const Scalar lr(rule.schedule.rate(s.step));
  const Scalar keep = Scalar(1) - lr * Scalar(rule.weight_decay);
  OptimizerStateT<Scalar> next;
  next.step = s.step + 1;
  switch (rule.kind) {
    case RuleKind::Sgd:
      next.params = keep * s.params - lr * g;
      break;
    case RuleKind::SgdMomentum: {
      Vector<Scalar> vel = Scalar(rule.momentum) * s.moments[0] + g;
      next.params = keep * s.params - lr * vel;
      next.moments.push_back(std::move(vel));
      break;
    }
    case RuleKind::Adam: {
      const Scalar b1(rule.beta1), b2(rule.beta2);
      Vector<Scalar> m = b1 * s.moments[0] + (Scalar(1) - b1) * g;
      Vector<Scalar> v =
          b2 * s.moments[1] + (Scalar(1) - b2) * g.cwiseProduct(g);
      const auto denom =
          (v.array() + Scalar(rule.eps_root)).sqrt() + Scalar(rule.eps);
      next.params = keep * s.params - lr * (m.array() / denom).matrix();
      next.moments.push_back(std::move(m));
      next.moments.push_back(std::move(v));
      break;
    }
  }
  if (!next.params.allFinite())
    throw DivergenceError("update produced non-finite parameters", s.step);
  for (const auto& m : next.moments)
    if (!m.allFinite())
      throw DivergenceError("update produced non-finite moments", s.step);
  return next;
}

/// Both adjoints of apply at (s, g): with respect to s holding g fixed, and
/// with respect to g holding s fixed.
template <typename Scalar>
struct UpdateVjp {
  StateAdjointT<Scalar> state;
  Vector<Scalar> grad;
};

template <typename Scalar>
UpdateVjp<Scalar> vjp(const UpdateRule& rule, const OptimizerStateT<Scalar>& s,
                      const Vector<Scalar>& g,
                      const StateAdjointT<Scalar>& next) {
  detail::check_shapes(rule, s, g);
  detail::check_adjoint_shapes(rule, s, next);
  const Scalar lr(rule.schedule.rate(s.step));
  const Scalar keep = Scalar(1) - lr * Scalar(rule.weight_decay);
  UpdateVjp<Scalar> out;
  out.state.params = keep * next.params;
  switch (rule.kind) {
    case RuleKind::Sgd:
      out.grad = -lr * next.params;
      break;
    case RuleKind::SgdMomentum: {
      // Total adjoint reaching u' = direct + through θ'.
      const Vector<Scalar> vel_adj = next.moments[0] - lr * next.params;
      out.state.moments.push_back(Scalar(rule.momentum) * vel_adj);
      out.grad = vel_adj;
      break;
    }
    case RuleKind::Adam: {
      const Scalar b1(rule.beta1), b2(rule.beta2);
      const Vector<Scalar> m = b1 * s.moments[0] + (Scalar(1) - b1) * g;
      const Vector<Scalar> v =
          b2 * s.moments[1] + (Scalar(1) - b2) * g.cwiseProduct(g);
      const auto root = (v.array() + Scalar(rule.eps_root)).sqrt();
      const auto denom = root + Scalar(rule.eps);
      // ∂θ'/∂m' = −η/denom, ∂θ'/∂v' = η m' / (2 root denom²).
      const Vector<Scalar> m_adj =
          (next.moments[0].array() - lr * next.params.array() / denom)
              .matrix();
      const Vector<Scalar> v_adj =
          (next.moments[1].array() + lr * next.params.array() * m.array() /
                                         (Scalar(2) * root * denom * denom))
              .matrix();
      out.state.moments.push_back(b1 * m_adj);
      out.state.moments.push_back(b2 * v_adj);
      out.grad = (Scalar(1) - b1) * m_adj +
                 (Scalar(2) * (Scalar(1) - b2)) *
                     g.cwiseProduct(v_adj);
      break;
    }
  }
  if (!out.state.all_finite() || !out.grad.allFinite())
    throw DivergenceError("non-finite update adjoint", s.step);
  return out;
}

template <typename Scalar>
StateAdjointT<Scalar> vjp_state(const UpdateRule& rule,
                                const OptimizerStateT<Scalar>& s,
                                const Vector<Scalar>& g,
                                const StateAdjointT<Scalar>& next) {
  return vjp(rule, s, g, next).state;
}

template <typename Scalar>
Vector<Scalar> vjp_grad(const UpdateRule& rule,
                        const OptimizerStateT<Scalar>& s,
                        const Vector<Scalar>& g,
                        const StateAdjointT<Scalar>& next) {
  return vjp(rule, s, g, next).grad;
}

}  // namespace metagrad

#endif  // METAGRAD_OPTIM_HPP
