#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msenc/error.hpp"

namespace msenc {

using Index = Eigen::Index;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

enum class Mode { Train, Eval };

// Height x width x channels of one trunk layer. Positions are flattened
// row-major, so grid cell (h, w) is row h * width + w.
struct LayerShape {
  Index height = 0;
  Index width = 0;
  Index channels = 0;

  Index positions() const { return height * width; }
  Index size() const { return height * width * channels; }
  bool operator==(const LayerShape&) const = default;
};

inline std::string to_string(const LayerShape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

// Routing key for the encoder: a subject index, or the subject-agnostic
// group pathway.
class SubjectId {
 public:
  constexpr SubjectId() = default;
  constexpr explicit SubjectId(int index) : index_(index) {}
  static constexpr SubjectId group() { return SubjectId(); }

  constexpr bool is_group() const { return index_ < 0; }
  constexpr int index() const { return index_; }
  constexpr bool operator==(const SubjectId&) const = default;

 private:
  int index_ = -1;
};

// One sample's trunk features: layer l is a P_l x C_l matrix.
template <typename T>
struct FeatureStack {
  std::vector<Matrix<T>> layers;
};

// N samples stacked per layer: layer l is an (N * P_l) x C_l matrix, sample n
// occupying rows [n * P_l, (n + 1) * P_l).
template <typename T>
struct FeatureBatch {
  Index samples = 0;
  std::vector<Matrix<T>> layers;
};

template <typename T>
FeatureBatch<T> stack_samples(const std::vector<FeatureStack<T>>& stacks) {
  FeatureBatch<T> batch;
  batch.samples = static_cast<Index>(stacks.size());
  if (stacks.empty()) return batch;
  const auto num_layers = stacks.front().layers.size();
  batch.layers.resize(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) {
    const Index p = stacks.front().layers[l].rows();
    const Index c = stacks.front().layers[l].cols();
    batch.layers[l].resize(batch.samples * p, c);
    for (Index n = 0; n < batch.samples; ++n) {
      const auto& layer = stacks[static_cast<std::size_t>(n)].layers[l];
      require(layer.rows() == p && layer.cols() == c, ErrorKind::ShapeMismatch,
              "sample " + std::to_string(n) + " layer " + std::to_string(l) + " differs from sample 0");
      batch.layers[l].middleRows(n * p, p) = layer;
    }
  }
  return batch;
}

template <typename T>
FeatureStack<T> sample_of(const FeatureBatch<T>& batch, Index n) {
  FeatureStack<T> stack;
  for (const auto& layer : batch.layers) {
    const Index p = layer.rows() / batch.samples;
    stack.layers.push_back(layer.middleRows(n * p, p));
  }
  return stack;
}

}  // namespace msenc
