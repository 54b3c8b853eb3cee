#include "metagrad/optim.hpp"

#include <sstream>

namespace metagrad {

void validate(const UpdateRule& rule) {
  const LrSchedule& lr = rule.schedule;
  require(lr.max_lr > 0.0 && std::isfinite(lr.max_lr),
          "learning rate must be positive");
  require(lr.total_steps >= 0, "schedule total_steps must be >= 0");
  if (lr.kind == LrSchedule::Kind::OneCycle) {
    require(lr.start_factor > 0.0 && lr.start_factor <= 1.0,
            "one-cycle start_factor must lie in (0, 1]");
    require(lr.end_factor > 0.0, "one-cycle end_factor must be positive");
    require(lr.peak_fraction >= 0.0 && lr.peak_fraction < 1.0,
            "one-cycle peak_fraction must lie in [0, 1)");
  }
  require(rule.weight_decay >= 0.0, "weight decay must be non-negative");
  switch (rule.kind) {
    case RuleKind::Sgd:
      break;
    case RuleKind::SgdMomentum:
      require(rule.momentum >= 0.0 && rule.momentum < 1.0,
              "momentum must lie in [0, 1)");
      break;
    case RuleKind::Adam:
      require(rule.beta1 >= 0.0 && rule.beta1 < 1.0, "beta1 must lie in [0, 1)");
      require(rule.beta2 >= 0.0 && rule.beta2 < 1.0, "beta2 must lie in [0, 1)");
      require(rule.eps >= 0.0, "adam eps must be non-negative");
      require(rule.eps_root > 0.0, "adam eps_root must be positive");
      break;
  }
}

std::string describe(const UpdateRule& rule) {
  std::ostringstream out;
  out.precision(17);
  switch (rule.kind) {
    case RuleKind::Sgd: out << "sgd"; break;
    case RuleKind::SgdMomentum:
      out << "sgd-momentum(mu=" << rule.momentum << ")";
      break;
    case RuleKind::Adam:
      out << "adam(b1=" << rule.beta1 << ",b2=" << rule.beta2
          << ",eps=" << rule.eps << ",eps_root=" << rule.eps_root << ")";
      break;
  }
  out << ",lr="
      << (rule.schedule.kind == LrSchedule::Kind::Constant ? "constant("
                                                           : "one-cycle(")
      << rule.schedule.max_lr << "),wd=" << rule.weight_decay;
  return out.str();
}

}  // namespace metagrad
