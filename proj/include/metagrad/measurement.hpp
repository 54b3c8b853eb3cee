// Measurement functions φ: parameters -> scalar.
#ifndef METAGRAD_MEASUREMENT_HPP
#define METAGRAD_MEASUREMENT_HPP

#include <string>
#include <vector>

#include "metagrad/model.hpp"

namespace metagrad {

enum class MeasurementKind { TestLossOnExample, MeanTestLoss };

/// φ(θ) = scale · loss on one example, or scale · mean loss over a set.
struct MeasurementFn {
  MeasurementKind kind = MeasurementKind::TestLossOnExample;
  std::vector<Example> payload;
  double scale = 1.0;
  std::string name = "phi";

  static MeasurementFn on_example(Example z, std::string name = "phi") {
    return {MeasurementKind::TestLossOnExample, {std::move(z)}, 1.0,
            std::move(name)};
  }
  static MeasurementFn mean_loss(const Dataset& set, std::string name = "phi") {
    return {MeasurementKind::MeanTestLoss, set.examples(), 1.0,
            std::move(name)};
  }
  MeasurementFn scaled(double c) const {
    MeasurementFn out = *this;
    out.scale *= c;
    return out;
  }
};

template <typename Scalar>
Scalar measure(const MeasurementFn& phi, const ModelFamily& model,
               const Vector<Scalar>& params) {
  require(!phi.payload.empty(), "measurement has no payload");
  if (phi.kind == MeasurementKind::TestLossOnExample)
    return Scalar(phi.scale) * loss(model, params, phi.payload.front());
  Scalar total(0);
  for (const auto& z : phi.payload) total += loss(model, params, z);
  return Scalar(phi.scale) * total / Scalar(phi.payload.size());
}

template <typename Scalar>
Vector<Scalar> measure_grad(const MeasurementFn& phi,
                            const ModelFamily& model,
                            const Vector<Scalar>& params) {
  require(!phi.payload.empty(), "measurement has no payload");
  if (phi.kind == MeasurementKind::TestLossOnExample)
    return Scalar(phi.scale) * grad(model, params, phi.payload.front());
  Vector<Scalar> total = Vector<Scalar>::Zero(params.size());
  for (const auto& z : phi.payload) total += grad(model, params, z);
  return (Scalar(phi.scale) / Scalar(phi.payload.size())) * total;
}

}  // namespace metagrad

#endif  // METAGRAD_MEASUREMENT_HPP
