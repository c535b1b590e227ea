#include "asgd/optim.hpp"

#include <sstream>

namespace asgd {

void Hyperparams::validate() const {
  if (!(base_lr > 0.0)) throw std::invalid_argument("base_lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
  for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
    if (!(lr_schedule[i].second > 0.0)) {
      throw std::invalid_argument("lr_schedule multipliers must be positive");
    }
    if (i > 0 && lr_schedule[i].first <= lr_schedule[i - 1].first) {
      throw std::invalid_argument("lr_schedule thresholds must be strictly increasing");
    }
  }
}

double lr_at(const Hyperparams& hyper, std::int64_t step) {
  double multiplier = 1.0;
  for (const auto& [threshold, mult] : hyper.lr_schedule) {
    if (threshold > step) break;
    multiplier = mult;
  }
  return hyper.base_lr * multiplier;
}

Eigen::VectorXf local_step(ParamVector& params, const Gradient& grad, OptimizerState& state,
                           const Hyperparams& hyper, std::int64_t step) {
  if (grad.size() != params.size() || state.velocity.size() != params.size() ||
      (grad.layout && params.layout && !(*grad.layout == *params.layout))) {
    throw ShapeError("gradient, velocity and parameter layouts disagree");
  }
  if (!grad.values.allFinite()) {
    std::ostringstream os;
    os << "non-finite gradient at local step " << step;
    throw DivergenceError(os.str());
  }
  const float lr = static_cast<float>(lr_at(hyper, step));
  const float mu = static_cast<float>(hyper.momentum);
  const float decay = static_cast<float>(hyper.weight_decay);

  auto& w = params.values;
  auto& v = state.velocity;
  v = mu * v - lr * (grad.values + decay * w);
  w += v;
  return v;
}

}  // namespace asgd
