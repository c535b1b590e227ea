#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

namespace asgd {

using Index = Eigen::Index;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Row-major dense matrix; a batch of activations is one example per row.
template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major tensor with an explicit shape.
template <typename Scalar>
struct Tensor {
  std::vector<Index> shape;
  VectorX<Scalar> data;

  Tensor() = default;
  explicit Tensor(std::vector<Index> dims)
      : shape(std::move(dims)), data(VectorX<Scalar>::Zero(element_count(shape))) {}

  static Index element_count(const std::vector<Index>& dims) {
    return std::accumulate(dims.begin(), dims.end(), Index{1}, std::multiplies<>());
  }

  Index size() const { return data.size(); }
  bool consistent() const { return element_count(shape) == data.size(); }
  bool all_finite() const { return data.allFinite(); }

  bool operator==(const Tensor& other) const {
    return shape == other.shape && data.size() == other.data.size() && data == other.data;
  }
};

}  // namespace asgd
