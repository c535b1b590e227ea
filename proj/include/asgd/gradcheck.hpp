#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "asgd/model.hpp"

namespace asgd {

/// Central finite-difference check of backward() in double precision.
///
/// Each layer kind gets a small probe network that routes gradients
/// through that kind; coordinates are sampled from the parameters whose
/// gradient depends on it. Coordinates whose +/-step perturbation flips a
/// ReLU unit (a kink) are resampled.
enum class ProbeKind { Conv2D, FullyConnected, ReLU, Dropout, SoftmaxXent };

const char* probe_name(ProbeKind kind);
std::vector<ProbeKind> all_probe_kinds();

struct GradCheckOptions {
  int samples = 200;
  double step = 1e-3;
  double tolerance = 1e-3;
  std::uint64_t seed = 1;
};

struct CoordinateCheck {
  Index coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  ProbeKind kind = ProbeKind::Conv2D;
  std::vector<CoordinateCheck> checks;
  int kinks_skipped = 0;
  double max_relative_error = 0.0;
  bool passed = false;
};

/// |a - n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric);

NetworkSpec probe_network(ProbeKind kind);

GradCheckReport gradient_check(ProbeKind kind, const GradCheckOptions& options = {});

/// Same check on an arbitrary network and batch, sampling from `candidates`.
GradCheckReport gradient_check(const CompiledNetwork& net, const VectorX<double>& params,
                               const Minibatch& batch, Mode mode,
                               const std::vector<Index>& candidates,
                               const GradCheckOptions& options);

}  // namespace asgd
