#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "asgd/model.hpp"
#include "asgd/rng.hpp"

namespace asgd {

struct DatasetConfig {
  int classes = 10;
  int train_per_class = 500;
  int test_per_class = 100;
  Index height = 16;
  Index width = 16;
  double noise_std = 0.35;
  /// RMS amplitude of each class prototype.
  double prototype_scale = 0.4;
  /// Gaussian blur radius (pixels) that makes prototypes spatially smooth.
  double smoothness = 1.5;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Images (N, C, H, W) with one label per image.
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  int classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index example_width() const { return size() == 0 ? 0 : images.size() / size(); }
};

struct SyntheticData {
  Dataset train;
  Dataset test;
  Tensor<float> prototypes;  // (K, 1, H, W)
};

/// Each example is its class prototype plus i.i.d. Gaussian pixel noise.
SyntheticData generate(const DatasetConfig& config);

/// Fraction of `set` whose nearest prototype (L2) is its own class.
double nearest_prototype_accuracy(const Tensor<float>& prototypes, const Dataset& set);

/// Epoch-wise shuffled index stream. A minibatch that straddles an epoch
/// boundary takes the tail of one permutation and the head of the next.
class EpochSampler {
 public:
  EpochSampler(Index set_size, std::uint64_t seed);

  std::vector<Index> next(Index count);
  std::int64_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  Rng rng_;
  std::vector<Index> order_;
  std::size_t cursor_ = 0;
  std::int64_t epoch_ = 0;
};

Minibatch gather(const Dataset& set, std::span<const Index> indices);
Minibatch sample_minibatch(const Dataset& set, Index size, EpochSampler& sampler);

struct AugmentPolicy {
  Index pad = 2;
  double flip_prob = 0.5;
};

/// Zero-pad by `pad`, take a random crop of the original size, then flip
/// horizontally with probability `flip_prob`.
Minibatch augment(const Minibatch& batch, Rng& rng, const AugmentPolicy& policy);

/// The deterministic Eval view: center crop of the padded image, no flip.
Minibatch augment_eval(const Minibatch& batch, const AugmentPolicy& policy);

/// Shift every image by (dy, dx) with zero fill and optionally mirror it.
/// This is the primitive both augmentation paths are built on.
void shift_and_flip(std::span<const float> src, std::span<float> dst, Index channels,
                    Index height, Index width, Index dy, Index dx, bool flip);

/// Sampler plus augmentation rng, i.e. the full training-input stream of one replica.
class MinibatchStream {
 public:
  MinibatchStream(const Dataset& set, Index batch_size, std::uint64_t seed,
                  AugmentPolicy policy);

  Minibatch next();

 private:
  const Dataset* set_;
  Index batch_size_;
  EpochSampler sampler_;
  Rng augment_rng_;
  AugmentPolicy policy_;
};

// Raw dataset file: "ASDD", u16 version, u32 K, u32 count, u8 C, u16 H, u16 W,
// then count x (u32 label, C*H*W u8 pixels). Pixels map to [0, 1].
inline constexpr std::uint16_t kRawDatasetVersion = 1;

std::vector<std::uint8_t> encode_raw_dataset(const Dataset& set);
Dataset decode_raw_dataset(std::span<const std::uint8_t> bytes);
void save_raw_dataset(const std::string& path, const Dataset& set);
Dataset load_raw_dataset(const std::string& path);

}  // namespace asgd
