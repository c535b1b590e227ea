#include "asgd/model.hpp"

#include <cmath>
#include <sstream>

namespace asgd {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

ActivationShape conv_output(const Conv2D& c, const ActivationShape& in) {
  const Index h = (in.height + 2 * c.padding - c.kernel) / c.stride + 1;
  const Index w = (in.width + 2 * c.padding - c.kernel) / c.stride + 1;
  return {c.out_channels, h, w, false};
}

std::string describe(std::size_t index, const LayerSpec& layer) {
  std::ostringstream os;
  os << "layer " << index << " (" << layer_name(layer) << ")";
  return os.str();
}

// Output positions [lo, hi) whose input coordinate o * stride - padding + tap is in [0, size).
std::pair<Index, Index> valid_range(Index tap, Index size, Index out, const Conv2D& c) {
  const Index shift = c.padding - tap;
  Index lo = shift > 0 ? (shift + c.stride - 1) / c.stride : 0;
  Index hi = (size - 1 + shift) >= 0 ? (size - 1 + shift) / c.stride + 1 : 0;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

// Column r = (ci * k + ky) * k + kx, column p = oy * out_w + ox.
template <typename Scalar>
void im2col(const Scalar* image, const ActivationShape& in, const Conv2D& c,
            const ActivationShape& out, MatrixRM<Scalar>& cols) {
  const Index k = c.kernel;
  for (Index ci = 0; ci < in.channels; ++ci) {
    const Scalar* plane = image + ci * in.height * in.width;
    for (Index ky = 0; ky < k; ++ky) {
      const auto [y0, y1] = valid_range(ky, in.height, out.height, c);
      for (Index kx = 0; kx < k; ++kx) {
        const auto [x0, x1] = valid_range(kx, in.width, out.width, c);
        Scalar* row = cols.row((ci * k + ky) * k + kx).data();
        std::fill(row, row + out.height * out.width, Scalar(0));
        for (Index oy = y0; oy < y1; ++oy) {
          const Scalar* src = plane + (oy * c.stride - c.padding + ky) * in.width - c.padding + kx;
          Scalar* dst = row + oy * out.width;
          for (Index ox = x0; ox < x1; ++ox) dst[ox] = src[ox * c.stride];
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const MatrixRM<Scalar>& cols, const ActivationShape& in, const Conv2D& c,
                const ActivationShape& out, Scalar* image) {
  const Index k = c.kernel;
  for (Index ci = 0; ci < in.channels; ++ci) {
    Scalar* plane = image + ci * in.height * in.width;
    for (Index ky = 0; ky < k; ++ky) {
      const auto [y0, y1] = valid_range(ky, in.height, out.height, c);
      for (Index kx = 0; kx < k; ++kx) {
        const auto [x0, x1] = valid_range(kx, in.width, out.width, c);
        const Scalar* row = cols.row((ci * k + ky) * k + kx).data();
        for (Index oy = y0; oy < y1; ++oy) {
          Scalar* dst = plane + (oy * c.stride - c.padding + ky) * in.width - c.padding + kx;
          const Scalar* src = row + oy * out.width;
          for (Index ox = x0; ox < x1; ++ox) dst[ox * c.stride] += src[ox];
        }
      }
    }
  }
}

void check_params(const CompiledNetwork& net, Index size) {
  if (size != net.param_count()) {
    std::ostringstream os;
    os << "parameter vector has " << size << " values, network expects " << net.param_count();
    throw ShapeError(os.str());
  }
}

void check_examples(const CompiledNetwork& net, const Tensor<float>& examples) {
  const auto& in = net.input_shape();
  const std::vector<Index> expected{in.channels, in.height, in.width};
  if (examples.shape.size() != 4 ||
      !std::equal(expected.begin(), expected.end(), examples.shape.begin() + 1) ||
      !examples.consistent()) {
    std::ostringstream os;
    os << "examples must have shape (B, " << in.channels << ", " << in.height << ", " << in.width
       << ")";
    throw ShapeError(os.str());
  }
}

/// Runs every layer before SoftmaxXent and returns the logits.
template <typename Scalar>
MatrixRM<Scalar> run_layers(const CompiledNetwork& net, const VectorX<Scalar>& params,
                            MatrixRM<Scalar> x, Mode mode, Rng* rng,
                            ActivationCache<Scalar>* cache) {
  const Index batch = x.rows();
  const auto& layers = net.layers();
  for (std::size_t li = 0; li + 1 < layers.size(); ++li) {
    const CompiledLayer& layer = layers[li];
    MatrixRM<Scalar> mask;
    MatrixRM<Scalar> y = std::visit(
        Overloaded{
            [&](const Conv2D& c) -> MatrixRM<Scalar> {
              const Index rows = c.in_channels * c.kernel * c.kernel;
              const Index positions = layer.out.height * layer.out.width;
              Eigen::Map<const MatrixRM<Scalar>> weight(params.data() + layer.weight_offset,
                                                        c.out_channels, rows);
              Eigen::Map<const VectorX<Scalar>> bias(params.data() + layer.bias_offset,
                                                     c.out_channels);
              MatrixRM<Scalar> out(batch, layer.out.size());
              MatrixRM<Scalar> cols(rows, positions);
              for (Index n = 0; n < batch; ++n) {
                im2col(x.row(n).data(), layer.in, c, layer.out, cols);
                Eigen::Map<MatrixRM<Scalar>> yn(out.row(n).data(), c.out_channels, positions);
                yn.noalias() = weight * cols;
                yn.colwise() += bias;
              }
              return out;
            },
            [&](const FullyConnected& f) -> MatrixRM<Scalar> {
              Eigen::Map<const MatrixRM<Scalar>> weight(params.data() + layer.weight_offset,
                                                        f.out_width, f.in_width);
              Eigen::Map<const VectorX<Scalar>> bias(params.data() + layer.bias_offset,
                                                     f.out_width);
              MatrixRM<Scalar> out(batch, f.out_width);
              out.noalias() = x * weight.transpose();
              out.rowwise() += bias.transpose();
              return out;
            },
            [&](const ReLU&) -> MatrixRM<Scalar> {
              mask = (x.array() > Scalar(0)).template cast<Scalar>();
              return x.cwiseProduct(mask);
            },
            [&](const Dropout& d) -> MatrixRM<Scalar> {
              if (mode == Mode::Eval || d.p == 0.0) return x;
              if (rng == nullptr) throw std::invalid_argument("Train-mode dropout needs an rng");
              const Scalar scale = Scalar(1) / Scalar(1.0 - d.p);
              mask.resize(x.rows(), x.cols());
              Scalar* m = mask.data();
              for (Index i = 0; i < mask.size(); ++i) m[i] = rng->uniform() < d.p ? Scalar(0) : scale;
              return x.cwiseProduct(mask);
            },
            [&](const SoftmaxXent&) -> MatrixRM<Scalar> { return x; },
        },
        layer.spec);
    if (cache != nullptr) {
      cache->inputs.push_back(std::move(x));
      cache->masks.push_back(std::move(mask));
    }
    x = std::move(y);
  }
  return x;
}

template <typename Scalar>
MatrixRM<Scalar> batch_matrix(const Tensor<float>& examples, Index width) {
  const Index batch = examples.shape.front();
  return Eigen::Map<const MatrixRM<float>>(examples.data.data(), batch, width)
      .template cast<Scalar>();
}

}  // namespace

std::string layer_name(const LayerSpec& layer) {
  return std::visit(Overloaded{
                        [](const Conv2D& c) {
                          std::ostringstream os;
                          os << "Conv2D " << c.in_channels << "->" << c.out_channels << " k"
                             << c.kernel << " s" << c.stride << " p" << c.padding;
                          return os.str();
                        },
                        [](const FullyConnected& f) {
                          std::ostringstream os;
                          os << "FullyConnected " << f.in_width << "->" << f.out_width;
                          return os.str();
                        },
                        [](const ReLU&) { return std::string("ReLU"); },
                        [](const Dropout& d) {
                          std::ostringstream os;
                          os << "Dropout p=" << d.p;
                          return os.str();
                        },
                        [](const SoftmaxXent&) { return std::string("SoftmaxXent"); },
                    },
                    layer);
}

std::vector<Index> ActivationShape::dims() const {
  if (flat) return {size()};
  return {channels, height, width};
}

std::string ActivationShape::str() const {
  std::ostringstream os;
  if (flat) {
    os << size();
  } else {
    os << "(" << channels << "," << height << "," << width << ")";
  }
  return os.str();
}

NetworkSpec default_network_spec() {
  NetworkSpec spec;
  spec.input = {1, 16, 16, false};
  spec.classes = 10;
  spec.layers = {
      Conv2D{1, 8, 5, 1, 2}, ReLU{}, Conv2D{8, 16, 5, 2, 2}, ReLU{}, Dropout{0.5},
      FullyConnected{1024, 10}, SoftmaxXent{},
  };
  return spec;
}

std::vector<ActivationShape> CompiledNetwork::activation_shapes() const {
  std::vector<ActivationShape> shapes;
  shapes.reserve(layers_.size());
  for (const auto& layer : layers_) shapes.push_back(layer.out);
  return shapes;
}

CompiledNetwork build_network(const NetworkSpec& spec) {
  if (spec.classes < 2) throw ShapeError("class count must be at least 2");
  if (spec.input.channels < 1 || spec.input.height < 1 || spec.input.width < 1) {
    throw ShapeError("input shape must have positive dimensions");
  }
  if (spec.layers.empty() || !std::holds_alternative<SoftmaxXent>(spec.layers.back())) {
    throw ShapeError("network must end in SoftmaxXent");
  }

  CompiledNetwork net;
  net.spec_ = spec;
  auto layout = std::make_shared<ParamLayout>();
  ActivationShape current = spec.input;

  auto add_param = [&](std::size_t layer, std::vector<Index> shape, bool is_bias) {
    ParamEntry entry{layer, std::move(shape), layout->total, 0, is_bias};
    entry.size = Tensor<float>::element_count(entry.shape);
    layout->total += entry.size;
    layout->entries.push_back(std::move(entry));
    return layout->entries.back().offset;
  };

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    const std::string previous =
        i == 0 ? std::string("network input") : describe(i - 1, spec.layers[i - 1]);
    auto mismatch = [&](const std::string& what) {
      std::ostringstream os;
      os << describe(i, layer) << " after " << previous << " with output " << current.str()
         << ": " << what;
      throw ShapeError(os.str());
    };

    CompiledLayer compiled{layer, current, current};
    std::visit(
        Overloaded{
            [&](const Conv2D& c) {
              if (current.flat) mismatch("convolution needs a spatial input");
              if (c.in_channels < 1 || c.out_channels < 1 || c.kernel < 1 || c.stride < 1 ||
                  c.padding < 0) {
                mismatch("invalid convolution parameters");
              }
              if (c.in_channels != current.channels) {
                std::ostringstream os;
                os << "expected input channels " << current.channels << ", got " << c.in_channels;
                mismatch(os.str());
              }
              if (current.height + 2 * c.padding < c.kernel ||
                  current.width + 2 * c.padding < c.kernel) {
                mismatch("kernel larger than padded input");
              }
              compiled.out = conv_output(c, current);
              compiled.weight_offset =
                  add_param(i, {c.out_channels, c.in_channels, c.kernel, c.kernel}, false);
              compiled.bias_offset = add_param(i, {c.out_channels}, true);
            },
            [&](const FullyConnected& f) {
              if (f.in_width != current.size()) {
                std::ostringstream os;
                os << "expected input width " << current.size() << ", got " << f.in_width;
                mismatch(os.str());
              }
              if (f.out_width < 1) mismatch("output width must be positive");
              compiled.out = {f.out_width, 1, 1, true};
              compiled.weight_offset = add_param(i, {f.out_width, f.in_width}, false);
              compiled.bias_offset = add_param(i, {f.out_width}, true);
            },
            [&](const ReLU&) {},
            [&](const Dropout& d) {
              if (!(d.p >= 0.0 && d.p < 1.0)) mismatch("drop probability must lie in [0, 1)");
            },
            [&](const SoftmaxXent&) {
              if (i + 1 != spec.layers.size()) mismatch("SoftmaxXent must be the last layer");
              if (current.size() != spec.classes) {
                std::ostringstream os;
                os << "expected " << spec.classes << " logits, got " << current.size();
                mismatch(os.str());
              }
            },
        },
        layer);
    current = compiled.out;
    net.layers_.push_back(std::move(compiled));
  }
  net.layout_ = std::move(layout);
  return net;
}

ParamVector zero_params(const CompiledNetwork& net) {
  return {net.shared_layout(), Eigen::VectorXf::Zero(net.param_count())};
}

ParamVector init_params(const CompiledNetwork& net, std::uint64_t seed) {
  constexpr double kWeightStd = 0.01;
  ParamVector params = zero_params(net);
  Rng rng(seed);
  for (const auto& entry : net.layout().entries) {
    if (entry.is_bias) continue;
    for (Index i = 0; i < entry.size; ++i) {
      params.values[entry.offset + i] = static_cast<float>(kWeightStd * rng.normal());
    }
  }
  return params;
}

template <typename Scalar>
ForwardResult<Scalar> forward_loss(const CompiledNetwork& net, const VectorX<Scalar>& params,
                                   const Minibatch& batch, Mode mode, Rng* rng) {
  check_params(net, params.size());
  check_examples(net, batch.examples);
  const Index n = batch.batch_size();
  if (batch.examples.shape.front() != n || n == 0) {
    throw ShapeError("minibatch must hold one label per example and at least one example");
  }
  for (int label : batch.labels) {
    if (label < 0 || label >= net.classes()) {
      std::ostringstream os;
      os << "label " << label << " out of range [0, " << net.classes() << ")";
      throw std::out_of_range(os.str());
    }
  }

  ForwardResult<Scalar> result;
  auto& cache = result.cache;
  cache.labels = batch.labels;
  cache.param_count = params.size();
  MatrixRM<Scalar> z = run_layers<Scalar>(
      net, params, batch_matrix<Scalar>(batch.examples, net.input_shape().size()), mode, rng,
      &cache);

  cache.probabilities.resize(n, z.cols());
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    Index argmax = 0;
    const Scalar top = z.row(i).maxCoeff(&argmax);
    auto shifted = (z.row(i).array() - top).exp();
    const Scalar sum = shifted.sum();
    cache.probabilities.row(i) = shifted / sum;
    const int y = batch.labels[static_cast<std::size_t>(i)];
    total += std::log(sum) - (z(i, y) - top);
    if (argmax != y) ++result.top1_errors;
  }
  result.loss = total / static_cast<Scalar>(n);
  return result;
}

template <typename Scalar>
VectorX<Scalar> backward(const CompiledNetwork& net, const VectorX<Scalar>& params,
                         const ActivationCache<Scalar>& cache, const Minibatch& batch) {
  check_params(net, params.size());
  const auto& layers = net.layers();
  if (cache.labels != batch.labels || cache.param_count != params.size() ||
      cache.inputs.size() + 1 != layers.size()) {
    throw std::invalid_argument("activation cache does not belong to this batch and network");
  }
  const Index n = batch.batch_size();

  VectorX<Scalar> grad = VectorX<Scalar>::Zero(params.size());
  MatrixRM<Scalar> dy = cache.probabilities;
  for (Index i = 0; i < n; ++i) dy(i, batch.labels[static_cast<std::size_t>(i)]) -= Scalar(1);
  dy /= static_cast<Scalar>(n);

  for (std::size_t li = layers.size() - 1; li-- > 0;) {
    const CompiledLayer& layer = layers[li];
    const MatrixRM<Scalar>& x = cache.inputs[li];
    const MatrixRM<Scalar>& mask = cache.masks[li];
    const bool need_input_grad = li > 0;
    std::visit(
        Overloaded{
            [&](const Conv2D& c) {
              const Index rows = c.in_channels * c.kernel * c.kernel;
              const Index positions = layer.out.height * layer.out.width;
              Eigen::Map<const MatrixRM<Scalar>> weight(params.data() + layer.weight_offset,
                                                        c.out_channels, rows);
              Eigen::Map<MatrixRM<Scalar>> dweight(grad.data() + layer.weight_offset,
                                                   c.out_channels, rows);
              Eigen::Map<VectorX<Scalar>> dbias(grad.data() + layer.bias_offset, c.out_channels);
              MatrixRM<Scalar> dx;
              if (need_input_grad) dx = MatrixRM<Scalar>::Zero(n, layer.in.size());
              MatrixRM<Scalar> cols(rows, positions);
              MatrixRM<Scalar> dcols(rows, positions);
              for (Index b = 0; b < n; ++b) {
                Eigen::Map<const MatrixRM<Scalar>> dyn(dy.row(b).data(), c.out_channels,
                                                       positions);
                im2col(x.row(b).data(), layer.in, c, layer.out, cols);
                dweight.noalias() += dyn * cols.transpose();
                dbias += dyn.rowwise().sum();
                if (need_input_grad) {
                  dcols.noalias() = weight.transpose() * dyn;
                  col2im_add(dcols, layer.in, c, layer.out, dx.row(b).data());
                }
              }
              dy = std::move(dx);
            },
            [&](const FullyConnected& f) {
              Eigen::Map<const MatrixRM<Scalar>> weight(params.data() + layer.weight_offset,
                                                        f.out_width, f.in_width);
              Eigen::Map<MatrixRM<Scalar>> dweight(grad.data() + layer.weight_offset,
                                                   f.out_width, f.in_width);
              Eigen::Map<VectorX<Scalar>> dbias(grad.data() + layer.bias_offset, f.out_width);
              dweight.noalias() = dy.transpose() * x;
              dbias = dy.colwise().sum().transpose();
              if (need_input_grad) {
                MatrixRM<Scalar> dx = dy * weight;
                dy = std::move(dx);
              }
            },
            [&](const ReLU&) { dy = dy.cwiseProduct(mask); },
            [&](const Dropout&) {
              if (mask.size() != 0) dy = dy.cwiseProduct(mask);
            },
            [&](const SoftmaxXent&) {},
        },
        layer.spec);
  }
  return grad;
}

ForwardResult<float> forward_loss(const CompiledNetwork& net, const ParamVector& params,
                                  const Minibatch& batch, Mode mode, Rng* rng) {
  return forward_loss<float>(net, params.values, batch, mode, rng);
}

Gradient backward(const CompiledNetwork& net, const ParamVector& params,
                  const ActivationCache<float>& cache, const Minibatch& batch) {
  return {net.shared_layout(), backward<float>(net, params.values, cache, batch)};
}

MatrixRM<float> logits(const CompiledNetwork& net, const ParamVector& params,
                       const Tensor<float>& examples) {
  check_params(net, params.size());
  check_examples(net, examples);
  return run_layers<float>(net, params.values,
                           batch_matrix<float>(examples, net.input_shape().size()), Mode::Eval,
                           nullptr, nullptr);
}

std::vector<int> predict_top1(const CompiledNetwork& net, const ParamVector& params,
                              const Tensor<float>& examples) {
  constexpr Index kChunk = 256;
  check_examples(net, examples);
  const Index total = examples.shape.front();
  const Index width = net.input_shape().size();
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(total));
  for (Index start = 0; start < total; start += kChunk) {
    const Index count = std::min(kChunk, total - start);
    MatrixRM<float> x =
        Eigen::Map<const MatrixRM<float>>(examples.data.data() + start * width, count, width);
    const MatrixRM<float> z =
        run_layers<float>(net, params.values, std::move(x), Mode::Eval, nullptr, nullptr);
    for (Index i = 0; i < count; ++i) {
      Index argmax = 0;
      z.row(i).maxCoeff(&argmax);
      labels.push_back(static_cast<int>(argmax));
    }
  }
  return labels;
}

template ForwardResult<float> forward_loss<float>(const CompiledNetwork&, const VectorX<float>&,
                                                  const Minibatch&, Mode, Rng*);
template ForwardResult<double> forward_loss<double>(const CompiledNetwork&,
                                                    const VectorX<double>&, const Minibatch&,
                                                    Mode, Rng*);
template VectorX<float> backward<float>(const CompiledNetwork&, const VectorX<float>&,
                                        const ActivationCache<float>&, const Minibatch&);
template VectorX<double> backward<double>(const CompiledNetwork&, const VectorX<double>&,
                                          const ActivationCache<double>&, const Minibatch&);

}  // namespace asgd
