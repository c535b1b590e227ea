#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "asgd/rng.hpp"
#include "asgd/tensor.hpp"

namespace asgd {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Declarative network description
// ---------------------------------------------------------------------------

struct Conv2D {
  Index in_channels = 1;
  Index out_channels = 1;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 0;
};

struct FullyConnected {
  Index in_width = 1;
  Index out_width = 1;
};

struct ReLU {};

/// Inverted dropout: kept units are scaled by 1/(1-p) in Train mode.
struct Dropout {
  double p = 0.5;
};

/// Mean softmax cross-entropy over the batch. Must be the last layer.
struct SoftmaxXent {};

using LayerSpec = std::variant<Conv2D, FullyConnected, ReLU, Dropout, SoftmaxXent>;

std::string layer_name(const LayerSpec& layer);

/// (channels, height, width); fully-connected outputs are flat (width, 1, 1).
struct ActivationShape {
  Index channels = 1;
  Index height = 1;
  Index width = 1;
  bool flat = false;

  Index size() const { return channels * height * width; }
  std::vector<Index> dims() const;
  std::string str() const;
  bool operator==(const ActivationShape&) const = default;
};

struct NetworkSpec {
  ActivationShape input{1, 16, 16, false};
  Index classes = 10;
  std::vector<LayerSpec> layers;
};

/// 1x16x16 -> conv5(8) -> relu -> conv5/2(16) -> relu -> dropout(0.5) -> fc(10).
NetworkSpec default_network_spec();

// ---------------------------------------------------------------------------
// Flat parameter storage
// ---------------------------------------------------------------------------

struct ParamEntry {
  std::size_t layer = 0;
  std::vector<Index> shape;
  Index offset = 0;
  Index size = 0;
  bool is_bias = false;
  bool operator==(const ParamEntry&) const = default;
};

struct ParamLayout {
  std::vector<ParamEntry> entries;
  Index total = 0;
  bool operator==(const ParamLayout&) const = default;
};

/// Every trainable tensor of a network, concatenated in layer order
/// (weights then bias per layer), stored as f32.
struct ParamVector {
  std::shared_ptr<const ParamLayout> layout;
  Eigen::VectorXf values;

  Index size() const { return values.size(); }
  bool same_layout(const ParamLayout& other) const { return layout && *layout == other; }
};

/// Minibatch-mean gradient; same layout as the ParamVector it differentiates.
struct Gradient {
  std::shared_ptr<const ParamLayout> layout;
  Eigen::VectorXf values;

  Index size() const { return values.size(); }
};

struct Minibatch {
  Tensor<float> examples;  // (B, C, H, W)
  std::vector<int> labels;

  Index batch_size() const { return static_cast<Index>(labels.size()); }
};

// ---------------------------------------------------------------------------
// Compiled network and forward/backward passes
// ---------------------------------------------------------------------------

struct CompiledLayer {
  LayerSpec spec;
  ActivationShape in;
  ActivationShape out;
  Index weight_offset = -1;
  Index bias_offset = -1;
};

class CompiledNetwork {
 public:
  const NetworkSpec& spec() const { return spec_; }
  const std::vector<CompiledLayer>& layers() const { return layers_; }
  const ParamLayout& layout() const { return *layout_; }
  std::shared_ptr<const ParamLayout> shared_layout() const { return layout_; }
  Index param_count() const { return layout_->total; }
  Index classes() const { return spec_.classes; }
  const ActivationShape& input_shape() const { return spec_.input; }

  /// Output shape of each layer, in order.
  std::vector<ActivationShape> activation_shapes() const;

 private:
  friend CompiledNetwork build_network(const NetworkSpec& spec);
  NetworkSpec spec_;
  std::vector<CompiledLayer> layers_;
  std::shared_ptr<const ParamLayout> layout_;
};

CompiledNetwork build_network(const NetworkSpec& spec);

/// Weights ~ N(0, 0.01^2), biases 0.
ParamVector init_params(const CompiledNetwork& net, std::uint64_t seed);

ParamVector zero_params(const CompiledNetwork& net);

enum class Mode { Train, Eval };

template <typename Scalar>
struct ActivationCache {
  std::vector<MatrixRM<Scalar>> inputs;  // input to each layer
  std::vector<MatrixRM<Scalar>> masks;   // ReLU / dropout masks (empty otherwise)
  MatrixRM<Scalar> probabilities;        // softmax output
  std::vector<int> labels;
  Index param_count = 0;
};

template <typename Scalar>
struct ForwardResult {
  Scalar loss = 0;
  int top1_errors = 0;
  ActivationCache<Scalar> cache;
};

/// Mean softmax cross-entropy. Train mode draws dropout masks from `rng`;
/// Eval mode uses no randomness and `rng` may be null.
template <typename Scalar>
ForwardResult<Scalar> forward_loss(const CompiledNetwork& net, const VectorX<Scalar>& params,
                                   const Minibatch& batch, Mode mode, Rng* rng);

ForwardResult<float> forward_loss(const CompiledNetwork& net, const ParamVector& params,
                                  const Minibatch& batch, Mode mode, Rng* rng);

/// Exact gradient of the minibatch-mean loss for the pass recorded in `cache`.
template <typename Scalar>
VectorX<Scalar> backward(const CompiledNetwork& net, const VectorX<Scalar>& params,
                         const ActivationCache<Scalar>& cache, const Minibatch& batch);

Gradient backward(const CompiledNetwork& net, const ParamVector& params,
                  const ActivationCache<float>& cache, const Minibatch& batch);

/// Eval-mode logits, one row per example.
MatrixRM<float> logits(const CompiledNetwork& net, const ParamVector& params,
                       const Tensor<float>& examples);

std::vector<int> predict_top1(const CompiledNetwork& net, const ParamVector& params,
                              const Tensor<float>& examples);

}  // namespace asgd
