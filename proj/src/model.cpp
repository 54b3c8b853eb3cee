#include "metagrad/model.hpp"

#include <sstream>

namespace metagrad {

void validate(const ModelFamily& model, const Dataset& data) {
  if (const auto* mlp = std::get_if<Mlp>(&model)) {
    require(mlp->widths.size() >= 2, "mlp needs input and output widths");
    for (Index w : mlp->widths) require(w >= 1, "mlp widths must be positive");
    if (mlp->head == Head::Softmax) {
      require(data.task_kind() == TaskKind::Classification,
              "softmax head needs a classification dataset");
      require(mlp->widths.back() == data.class_count(),
              "softmax head width must equal the class count");
    } else {
      require(mlp->widths.back() == 1, "scalar heads need output width 1");
    }
  }
  require(input_dim(model) == data.feature_dim(),
          "model input width " + std::to_string(input_dim(model)) +
              " does not match feature dim " +
              std::to_string(data.feature_dim()));
  const Head head = head_of(model);
  if (head == Head::Squared) {
    require(data.task_kind() == TaskKind::Regression,
            "squared loss needs a regression dataset");
  } else if (head == Head::Logistic) {
    require(data.task_kind() == TaskKind::Classification &&
                data.class_count() == 2,
            "logistic loss needs a two-class dataset");
  }
}

std::string describe(const ModelFamily& model) {
  std::ostringstream out;
  std::visit(
      [&out](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, LinearRegression>) {
          out << "linear-regression(d=" << m.input_dim
              << (m.bias ? ",bias" : "") << ")";
        } else if constexpr (std::is_same_v<M, LogisticRegression>) {
          out << "logistic-regression(d=" << m.input_dim
              << (m.bias ? ",bias" : "") << ")";
        } else {
          out << "mlp(";
          for (std::size_t i = 0; i < m.widths.size(); ++i)
            out << (i ? "-" : "") << m.widths[i];
          out << (m.activation == Activation::Tanh ? ",tanh" : ",sigmoid");
          out << (m.head == Head::Squared    ? ",squared"
                  : m.head == Head::Logistic ? ",logistic"
                                             : ",softmax")
              << ")";
        }
      },
      model);
  return out.str();
}

VectorXd initial_params(const ModelFamily& model, std::uint64_t seed) {
  VectorXd params = VectorXd::Zero(param_dim(model));
  const auto* mlp = std::get_if<Mlp>(&model);
  if (mlp == nullptr) return params;
  Rng rng(derive_seed(seed, 0x1a17));
  Index offset = 0;
  for (std::size_t l = 1; l < mlp->widths.size(); ++l) {
    const Index in = mlp->widths[l - 1], out = mlp->widths[l];
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (Index k = 0; k < in * out; ++k)
      params[offset + k] = scale * rng.normal();
    offset += in * out + out;
  }
  return params;
}

VectorXd output_grad(const ModelFamily& model, const VectorXd& params,
                     const VectorXd& x) {
  require(output_dim(model) == 1, "output_grad needs a scalar-output model");
  if (!std::holds_alternative<Mlp>(model))
    return detail::linear_features<double>(x, detail::linear_bias(model));
  const Mlp& m = std::get<Mlp>(model);
  const auto layers = detail::mlp_layers(m, params);
  const auto tr = detail::mlp_forward(m, layers, x);
  VectorXd g(params.size());
  VectorXd delta = VectorXd::Ones(1);
  Index offset = params.size();
  for (std::size_t l = layers.size(); l-- > 0;) {
    const Index out = layers[l].weight.rows(), in = layers[l].weight.cols();
    offset -= out * in + out;
    Eigen::Map<MatrixXd>(g.data() + offset, out, in) =
        delta * tr.post[l].transpose();
    g.segment(offset + out * in, out) = delta;
    if (l > 0)
      delta = ((layers[l].weight.transpose() * delta).array() *
               tr.act[l - 1].first.array())
                  .matrix();
  }
  return g;
}

}  // namespace metagrad
