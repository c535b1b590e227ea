#include "asgd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace asgd {

namespace {

constexpr std::uint64_t kDropoutSeed = 0x5eed;

std::vector<Index> params_of_layers(const CompiledNetwork& net, const std::vector<std::size_t>& layers) {
  std::vector<Index> out;
  for (const auto& entry : net.layout().entries) {
    if (std::find(layers.begin(), layers.end(), entry.layer) == layers.end()) continue;
    for (Index i = 0; i < entry.size; ++i) out.push_back(entry.offset + i);
  }
  return out;
}

std::vector<std::size_t> layers_of_kind(const CompiledNetwork& net, ProbeKind kind) {
  std::vector<std::size_t> out;
  const auto& layers = net.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const bool has_params = layers[i].weight_offset >= 0;
    switch (kind) {
      case ProbeKind::Conv2D:
        if (std::holds_alternative<Conv2D>(layers[i].spec)) out.push_back(i);
        break;
      case ProbeKind::FullyConnected:
        if (std::holds_alternative<FullyConnected>(layers[i].spec)) out.push_back(i);
        break;
      case ProbeKind::ReLU:
      case ProbeKind::Dropout:
        // Parameters upstream of the layer under test.
        if (has_params && i == 0) out.push_back(i);
        break;
      case ProbeKind::SoftmaxXent:
        if (has_params) out.push_back(i);
        break;
    }
  }
  return out;
}

// Concatenated ReLU masks; a change between evaluations marks a kink.
std::vector<bool> relu_pattern(const CompiledNetwork& net, const ActivationCache<double>& cache) {
  std::vector<bool> pattern;
  const auto& layers = net.layers();
  for (std::size_t i = 0; i < cache.masks.size(); ++i) {
    if (!std::holds_alternative<ReLU>(layers[i].spec)) continue;
    const auto& m = cache.masks[i];
    for (Index k = 0; k < m.size(); ++k) pattern.push_back(m.data()[k] > 0.0);
  }
  return pattern;
}

struct Evaluation {
  double loss;
  std::vector<bool> pattern;
};

Evaluation evaluate(const CompiledNetwork& net, const VectorX<double>& params, const Minibatch& batch,
                    Mode mode) {
  Rng rng(kDropoutSeed);
  auto result = forward_loss<double>(net, params, batch, mode, &rng);
  return {result.loss, relu_pattern(net, result.cache)};
}

}  // namespace

const char* probe_name(ProbeKind kind) {
  switch (kind) {
    case ProbeKind::Conv2D: return "Conv2D";
    case ProbeKind::FullyConnected: return "FullyConnected";
    case ProbeKind::ReLU: return "ReLU";
    case ProbeKind::Dropout: return "Dropout";
    case ProbeKind::SoftmaxXent: return "SoftmaxXent";
  }
  return "?";
}

std::vector<ProbeKind> all_probe_kinds() {
  return {ProbeKind::Conv2D, ProbeKind::FullyConnected, ProbeKind::ReLU, ProbeKind::Dropout,
          ProbeKind::SoftmaxXent};
}

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

NetworkSpec probe_network(ProbeKind kind) {
  NetworkSpec spec;
  switch (kind) {
    case ProbeKind::Conv2D:
      spec.input = {3, 6, 6, false};
      spec.classes = 5;
      spec.layers = {Conv2D{3, 8, 3, 1, 1}, Conv2D{8, 4, 3, 2, 1}, FullyConnected{36, 5}, SoftmaxXent{}};
      break;
    case ProbeKind::FullyConnected:
      spec.input = {1, 4, 5, false};
      spec.classes = 5;
      spec.layers = {FullyConnected{20, 16}, FullyConnected{16, 5}, SoftmaxXent{}};
      break;
    case ProbeKind::ReLU:
      spec.input = {1, 4, 5, false};
      spec.classes = 5;
      spec.layers = {FullyConnected{20, 12}, ReLU{}, FullyConnected{12, 5}, SoftmaxXent{}};
      break;
    case ProbeKind::Dropout:
      spec.input = {1, 4, 5, false};
      spec.classes = 5;
      spec.layers = {FullyConnected{20, 12}, Dropout{0.5}, FullyConnected{12, 5}, SoftmaxXent{}};
      break;
    case ProbeKind::SoftmaxXent:
      spec.input = {1, 4, 4, false};
      spec.classes = 7;
      spec.layers = {FullyConnected{16, 21}, FullyConnected{21, 7}, SoftmaxXent{}};
      break;
  }
  return spec;
}

GradCheckReport gradient_check(const CompiledNetwork& net, const VectorX<double>& params,
                               const Minibatch& batch, Mode mode,
                               const std::vector<Index>& candidates,
                               const GradCheckOptions& options) {
  if (candidates.empty()) throw std::invalid_argument("no candidate coordinates to check");
  GradCheckReport report;
  Rng forward_rng(kDropoutSeed);
  const auto base = forward_loss<double>(net, params, batch, mode, &forward_rng);
  const VectorX<double> analytic = backward<double>(net, params, base.cache, batch);
  const auto base_pattern = relu_pattern(net, base.cache);

  Rng pick(options.seed);
  VectorX<double> probe = params;
  const int max_draws = options.samples * 50;
  int draws = 0;
  while (static_cast<int>(report.checks.size()) < options.samples && draws < max_draws) {
    ++draws;
    const Index coord = candidates[static_cast<std::size_t>(pick.index(candidates.size()))];
    probe[coord] = params[coord] + options.step;
    const Evaluation plus = evaluate(net, probe, batch, mode);
    probe[coord] = params[coord] - options.step;
    const Evaluation minus = evaluate(net, probe, batch, mode);
    probe[coord] = params[coord];
    if (plus.pattern != base_pattern || minus.pattern != base_pattern) {
      ++report.kinks_skipped;
      continue;
    }
    CoordinateCheck check;
    check.coordinate = coord;
    check.analytic = analytic[coord];
    check.numeric = (plus.loss - minus.loss) / (2.0 * options.step);
    check.relative_error = relative_error(check.analytic, check.numeric);
    report.max_relative_error = std::max(report.max_relative_error, check.relative_error);
    report.checks.push_back(check);
  }
  report.passed = static_cast<int>(report.checks.size()) >= options.samples &&
                  report.max_relative_error < options.tolerance;
  return report;
}

GradCheckReport gradient_check(ProbeKind kind, const GradCheckOptions& options) {
  const CompiledNetwork net = build_network(probe_network(kind));
  Rng rng(mix_seed(options.seed, static_cast<std::uint64_t>(kind)));

  VectorX<double> params(net.param_count());
  for (Index i = 0; i < params.size(); ++i) params[i] = 0.3 * rng.normal();

  constexpr Index kBatch = 3;
  const auto& in = net.input_shape();
  Minibatch batch;
  batch.examples = Tensor<float>({kBatch, in.channels, in.height, in.width});
  for (Index i = 0; i < batch.examples.size(); ++i) batch.examples.data[i] = static_cast<float>(rng.normal());
  for (Index i = 0; i < kBatch; ++i) {
    batch.labels.push_back(static_cast<int>(rng.index(static_cast<std::uint64_t>(net.classes()))));
  }

  const Mode mode = kind == ProbeKind::Dropout ? Mode::Train : Mode::Eval;
  GradCheckReport report =
      gradient_check(net, params, batch, mode, params_of_layers(net, layers_of_kind(net, kind)), options);
  report.kind = kind;
  return report;
}

}  // namespace asgd
