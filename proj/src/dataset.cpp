#include "asgd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "asgd/bytes.hpp"

namespace asgd {

namespace {

// Separable Gaussian blur with zero boundary.
void smooth_inplace(float* image, Index height, Index width, double sigma) {
  if (sigma <= 0.0) return;
  const Index radius = static_cast<Index>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (Index i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
  }
  std::vector<double> tmp(static_cast<std::size_t>(height * width), 0.0);
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      double acc = 0.0;
      for (Index k = -radius; k <= radius; ++k) {
        const Index xx = x + k;
        if (xx >= 0 && xx < width) acc += kernel[static_cast<std::size_t>(k + radius)] * image[y * width + xx];
      }
      tmp[static_cast<std::size_t>(y * width + x)] = acc;
    }
  }
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      double acc = 0.0;
      for (Index k = -radius; k <= radius; ++k) {
        const Index yy = y + k;
        if (yy >= 0 && yy < height) {
          acc += kernel[static_cast<std::size_t>(k + radius)] * tmp[static_cast<std::size_t>(yy * width + x)];
        }
      }
      image[y * width + x] = static_cast<float>(acc);
    }
  }
}

Dataset make_split(const Tensor<float>& prototypes, int per_class, double noise_std, Rng& rng) {
  const Index classes = prototypes.shape[0];
  const Index width = prototypes.size() / classes;
  const Index count = classes * per_class;
  Dataset set;
  set.classes = static_cast<int>(classes);
  set.images = Tensor<float>({count, prototypes.shape[1], prototypes.shape[2], prototypes.shape[3]});
  set.labels.resize(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    const Index label = i % classes;
    set.labels[static_cast<std::size_t>(i)] = static_cast<int>(label);
    for (Index p = 0; p < width; ++p) {
      set.images.data[i * width + p] =
          prototypes.data[label * width + p] + static_cast<float>(noise_std * rng.normal());
    }
  }
  return set;
}

}  // namespace

void DatasetConfig::validate() const {
  if (classes < 2) throw std::invalid_argument("dataset needs at least 2 classes");
  if (height < 8 || width < 8) throw std::invalid_argument("dataset images must be at least 8x8");
  if (train_per_class < 0 || test_per_class < 0) {
    throw std::invalid_argument("per-class counts must be non-negative");
  }
  if (!(noise_std >= 0.0)) throw std::invalid_argument("noise_std must be non-negative");
}

SyntheticData generate(const DatasetConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const Index k = config.classes;
  const Index width = config.height * config.width;

  SyntheticData data;
  data.prototypes = Tensor<float>({k, 1, config.height, config.width});
  for (Index c = 0; c < k; ++c) {
    float* proto = data.prototypes.data.data() + c * width;
    for (Index p = 0; p < width; ++p) proto[p] = static_cast<float>(rng.normal());
    smooth_inplace(proto, config.height, config.width, config.smoothness);
    Eigen::Map<Eigen::VectorXf> v(proto, width);
    v.array() -= v.mean();
    const float rms = std::sqrt(v.squaredNorm() / static_cast<float>(width));
    if (rms > 0.0f) v *= static_cast<float>(config.prototype_scale) / rms;
  }
  data.train = make_split(data.prototypes, config.train_per_class, config.noise_std, rng);
  data.test = make_split(data.prototypes, config.test_per_class, config.noise_std, rng);
  return data;
}

double nearest_prototype_accuracy(const Tensor<float>& prototypes, const Dataset& set) {
  if (set.size() == 0) return 0.0;
  const Index classes = prototypes.shape[0];
  const Index width = prototypes.size() / classes;
  const Eigen::Map<const MatrixRM<float>> protos(prototypes.data.data(), classes, width);
  const Eigen::Map<const MatrixRM<float>> images(set.images.data.data(), set.size(), width);
  Index correct = 0;
  for (Index i = 0; i < set.size(); ++i) {
    Index best = 0;
    (protos.rowwise() - images.row(i)).rowwise().squaredNorm().minCoeff(&best);
    if (best == set.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

EpochSampler::EpochSampler(Index set_size, std::uint64_t seed) : rng_(seed) {
  if (set_size <= 0) throw std::invalid_argument("cannot sample from an empty set");
  order_.resize(static_cast<std::size_t>(set_size));
  reshuffle();
}

void EpochSampler::reshuffle() {
  std::iota(order_.begin(), order_.end(), Index{0});
  rng_.shuffle(std::span<Index>(order_));
  cursor_ = 0;
}

std::vector<Index> EpochSampler::next(Index count) {
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(count));
  while (static_cast<Index>(out.size()) < count) {
    if (cursor_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

Minibatch gather(const Dataset& set, std::span<const Index> indices) {
  const Index width = set.example_width();
  const Index count = static_cast<Index>(indices.size());
  std::vector<Index> shape = set.images.shape;
  shape[0] = count;
  Minibatch batch;
  batch.examples = Tensor<float>(shape);
  batch.labels.resize(indices.size());
  for (Index i = 0; i < count; ++i) {
    const Index src = indices[static_cast<std::size_t>(i)];
    if (src < 0 || src >= set.size()) throw std::out_of_range("example index out of range");
    batch.examples.data.segment(i * width, width) = set.images.data.segment(src * width, width);
    batch.labels[static_cast<std::size_t>(i)] = set.labels[static_cast<std::size_t>(src)];
  }
  return batch;
}

Minibatch sample_minibatch(const Dataset& set, Index size, EpochSampler& sampler) {
  if (size < 1 || size > set.size()) throw std::invalid_argument("minibatch size must lie in [1, set size]");
  const auto indices = sampler.next(size);
  return gather(set, indices);
}

void shift_and_flip(std::span<const float> src, std::span<float> dst, Index channels,
                    Index height, Index width, Index dy, Index dx, bool flip) {
  for (Index c = 0; c < channels; ++c) {
    const float* in = src.data() + c * height * width;
    float* out = dst.data() + c * height * width;
    for (Index y = 0; y < height; ++y) {
      const Index sy = y + dy;
      for (Index x = 0; x < width; ++x) {
        const Index cx = flip ? width - 1 - x : x;
        const Index sx = cx + dx;
        out[y * width + x] =
            (sy >= 0 && sy < height && sx >= 0 && sx < width) ? in[sy * width + sx] : 0.0f;
      }
    }
  }
}

Minibatch augment(const Minibatch& batch, Rng& rng, const AugmentPolicy& policy) {
  if (policy.pad < 0) throw std::invalid_argument("augmentation pad must be non-negative");
  const auto& shape = batch.examples.shape;
  const Index channels = shape[1], height = shape[2], width = shape[3];
  const Index stride = channels * height * width;
  Minibatch out{Tensor<float>(shape), batch.labels};
  for (Index n = 0; n < batch.batch_size(); ++n) {
    const Index span_len = 2 * policy.pad + 1;
    const Index dy = static_cast<Index>(rng.index(static_cast<std::uint64_t>(span_len))) - policy.pad;
    const Index dx = static_cast<Index>(rng.index(static_cast<std::uint64_t>(span_len))) - policy.pad;
    const bool flip = rng.uniform() < policy.flip_prob;
    shift_and_flip({batch.examples.data.data() + n * stride, static_cast<std::size_t>(stride)},
                   {out.examples.data.data() + n * stride, static_cast<std::size_t>(stride)},
                   channels, height, width, dy, dx, flip);
  }
  return out;
}

Minibatch augment_eval(const Minibatch& batch, const AugmentPolicy& policy) {
  if (policy.pad < 0) throw std::invalid_argument("augmentation pad must be non-negative");
  return batch;
}

MinibatchStream::MinibatchStream(const Dataset& set, Index batch_size, std::uint64_t seed,
                                 AugmentPolicy policy)
    : set_(&set),
      batch_size_(batch_size),
      sampler_(set.size(), mix_seed(seed, 0)),
      augment_rng_(mix_seed(seed, 1)),
      policy_(policy) {}

Minibatch MinibatchStream::next() {
  return augment(sample_minibatch(*set_, batch_size_, sampler_), augment_rng_, policy_);
}

std::vector<std::uint8_t> encode_raw_dataset(const Dataset& set) {
  const auto& shape = set.images.shape;
  ByteWriter out;
  out.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("ASDD"), 4));
  out.u16(kRawDatasetVersion);
  out.u32(static_cast<std::uint32_t>(set.classes));
  out.u32(static_cast<std::uint32_t>(set.size()));
  out.u8(static_cast<std::uint8_t>(shape[1]));
  out.u16(static_cast<std::uint16_t>(shape[2]));
  out.u16(static_cast<std::uint16_t>(shape[3]));
  const Index width = set.example_width();
  for (Index i = 0; i < set.size(); ++i) {
    out.u32(static_cast<std::uint32_t>(set.labels[static_cast<std::size_t>(i)]));
    for (Index p = 0; p < width; ++p) {
      const float v = std::clamp(set.images.data[i * width + p], 0.0f, 1.0f);
      out.u8(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
    }
  }
  return out.take();
}

Dataset decode_raw_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  if (std::memcmp(in.raw(4).data(), "ASDD", 4) != 0) in.fail("bad dataset magic");
  const std::uint16_t version = in.u16();
  if (version != kRawDatasetVersion) in.fail("unsupported dataset version " + std::to_string(version));
  const std::uint32_t classes = in.u32();
  const std::uint32_t count = in.u32();
  const Index channels = in.u8();
  const Index height = in.u16();
  const Index width = in.u16();
  if (classes < 2) in.fail("dataset needs at least 2 classes");
  const Index pixels = channels * height * width;
  if (static_cast<std::uint64_t>(count) * static_cast<std::uint64_t>(4 + pixels) > in.remaining()) {
    in.fail("dataset declares more examples than the file holds");
  }
  Dataset set;
  set.classes = static_cast<int>(classes);
  set.images = Tensor<float>({static_cast<Index>(count), channels, height, width});
  set.labels.resize(count);
  for (Index i = 0; i < static_cast<Index>(count); ++i) {
    const std::uint32_t label = in.u32();
    if (label >= classes) in.fail("label " + std::to_string(label) + " out of range");
    set.labels[static_cast<std::size_t>(i)] = static_cast<int>(label);
    const auto raw = in.raw(static_cast<std::size_t>(pixels));
    for (Index p = 0; p < pixels; ++p) {
      set.images.data[i * pixels + p] = static_cast<float>(raw[static_cast<std::size_t>(p)]) / 255.0f;
    }
  }
  if (in.remaining() != 0) in.fail("trailing bytes after dataset");
  return set;
}

void save_raw_dataset(const std::string& path, const Dataset& set) {
  write_file(path, encode_raw_dataset(set));
}

Dataset load_raw_dataset(const std::string& path) { return decode_raw_dataset(read_file(path)); }

}  // namespace asgd
