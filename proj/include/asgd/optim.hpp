#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "asgd/model.hpp"

namespace asgd {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Hyperparams {
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  /// (step threshold, multiplier); thresholds strictly increasing.
  std::vector<std::pair<std::int64_t, double>> lr_schedule;

  /// Throws std::invalid_argument when a field is out of range.
  void validate() const;
};

struct OptimizerState {
  Eigen::VectorXf velocity;

  static OptimizerState zeros(Index size) { return {Eigen::VectorXf::Zero(size)}; }
};

/// base_lr times the multiplier of the last threshold <= step.
double lr_at(const Hyperparams& hyper, std::int64_t step);

/// One momentum-SGD step, in place:
///   v <- mu * v - lr * (g + lambda * w);  w <- w + v.
/// Returns the applied increment (v), so that w_after == w_before + delta
/// holds bitwise in f32.
Eigen::VectorXf local_step(ParamVector& params, const Gradient& grad, OptimizerState& state,
                           const Hyperparams& hyper, std::int64_t step);

}  // namespace asgd
