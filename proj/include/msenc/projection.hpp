#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "msenc/parallel.hpp"
#include "msenc/tensor.hpp"

namespace msenc {

using Rng = std::mt19937_64;

// Affine batch normalization over the latent dimensions. Normalization uses
// the biased batch variance; the running variance tracks the unbiased one.
template <typename T>
struct BatchNorm {
  Vector<T> gain;
  Vector<T> bias;
  Vector<T> running_mean;
  Vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  static BatchNorm identity(Index dim) {
    BatchNorm bn;
    bn.gain = Vector<T>::Ones(dim);
    bn.bias = Vector<T>::Zero(dim);
    bn.running_mean = Vector<T>::Zero(dim);
    bn.running_var = Vector<T>::Ones(dim);
    return bn;
  }
};

// Factorized projection of one trunk layer: a channel filter (1x1 conv to D
// outputs) followed by a per-latent spatial pooling map over the H x W grid.
template <typename T>
struct LayerProjection {
  LayerShape shape;
  Matrix<T> channel_filter;  // C x D
  Matrix<T> spatial_map;     // P x D
  BatchNorm<T> bn;

  Index latent_dim() const { return channel_filter.cols(); }

  void validate() const {
    const Index d = latent_dim();
    require(channel_filter.rows() == shape.channels, ErrorKind::ShapeMismatch,
            "channel_filter rows " + std::to_string(channel_filter.rows()) + " != C " + std::to_string(shape.channels));
    require(spatial_map.rows() == shape.positions() && spatial_map.cols() == d, ErrorKind::ShapeMismatch,
            "spatial_map must be P x D");
    require(bn.gain.size() == d && bn.bias.size() == d && bn.running_mean.size() == d && bn.running_var.size() == d,
            ErrorKind::ShapeMismatch, "batch-norm vectors must have length D");
    require(channel_filter.allFinite() && spatial_map.allFinite() && bn.gain.allFinite() && bn.bias.allFinite(),
            ErrorKind::InvalidArgument, "projection parameters must be finite");
    require((bn.running_var.array() >= T(0)).all(), ErrorKind::InvalidArgument, "running variance must be >= 0");
  }

  Index trainable_count() const { return (shape.channels + shape.positions()) * latent_dim() + 2 * latent_dim(); }
};

template <typename T>
LayerProjection<T> make_layer_projection(const LayerShape& shape, Index latent_dim) {
  LayerProjection<T> p;
  p.shape = shape;
  p.channel_filter = Matrix<T>::Zero(shape.channels, latent_dim);
  p.spatial_map = Matrix<T>::Zero(shape.positions(), latent_dim);
  p.bn = BatchNorm<T>::identity(latent_dim);
  return p;
}

struct ProjectionConfig {
  std::vector<LayerShape> layer_shapes;
  Index latent_dim = 1024;
  double dropout_rate = 0.0;

  Index num_layers() const { return static_cast<Index>(layer_shapes.size()); }
  void validate() const {
    require(!layer_shapes.empty(), ErrorKind::InvalidArgument, "at least one layer is required");
    require(latent_dim >= 1, ErrorKind::InvalidArgument, "latent dimension must be >= 1");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, ErrorKind::InvalidArgument, "dropout rate must lie in [0, 1)");
  }
};

// Inverted element-wise dropout on raw features. Eval mode, or rate 0, is the
// identity and consumes no random numbers.
template <typename T>
void feature_dropout(FeatureBatch<T>& batch, double rate, Mode mode, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, ErrorKind::InvalidArgument, "dropout rate must lie in [0, 1)");
  if (mode == Mode::Eval || rate == 0.0) return;
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale = T(1.0 / (1.0 - rate));
  for (auto& layer : batch.layers) {
    T* data = layer.data();
    for (Index i = 0, n = layer.size(); i < n; ++i) data[i] = keep(rng) ? data[i] * scale : T(0);
  }
}

template <typename T>
FeatureStack<T> feature_dropout(const FeatureStack<T>& stack, double rate, Mode mode, Rng& rng) {
  FeatureBatch<T> batch{1, stack.layers};
  feature_dropout(batch, rate, mode, rng);
  return FeatureStack<T>{std::move(batch.layers)};
}

// out[d] = sum_p spatial_map[p, d] * sum_c layer[p, c] * channel_filter[c, d]
template <typename T>
Vector<T> project_layer(const Matrix<T>& layer, const LayerProjection<T>& p) {
  require(layer.rows() == p.shape.positions() && layer.cols() == p.shape.channels, ErrorKind::ShapeMismatch,
          "layer is " + std::to_string(layer.rows()) + "x" + std::to_string(layer.cols()) + ", projection expects " +
              std::to_string(p.shape.positions()) + "x" + std::to_string(p.shape.channels));
  const Matrix<T> channels = layer * p.channel_filter;  // P x D
  return channels.cwiseProduct(p.spatial_map).colwise().sum().transpose();
}

// The equivalent dense (P * C) x D weight. Row p * C + c matches the
// row-major flattening of a P x C layer.
template <typename T>
Matrix<T> densify(const LayerProjection<T>& p) {
  const Index positions = p.spatial_map.rows();
  const Index channels = p.channel_filter.rows();
  Matrix<T> dense(positions * channels, p.latent_dim());
  for (Index pos = 0; pos < positions; ++pos)
    for (Index c = 0; c < channels; ++c)
      dense.row(pos * channels + c) = p.spatial_map.row(pos).cwiseProduct(p.channel_filter.row(c));
  return dense;
}

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::Eval;
  Matrix<T> normalized;  // x_hat, N x D
  Vector<T> inv_std;
};

template <typename T>
Matrix<T> batchnorm_forward(const Matrix<T>& z, BatchNorm<T>& bn, Mode mode, BatchNormCache<T>* cache = nullptr) {
  const Index n = z.rows();
  require(z.cols() == bn.gain.size(), ErrorKind::ShapeMismatch, "batch-norm input width != D");
  Vector<T> mean;
  Vector<T> var;
  if (mode == Mode::Train) {
    require(n >= 2, ErrorKind::BatchTooSmall, "batch norm in train mode needs >= 2 samples, got " + std::to_string(n));
    mean = z.colwise().mean().transpose();
    var = (z.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
    const T unbias = T(n) / T(n - 1);
    bn.running_mean = (T(1) - bn.momentum) * bn.running_mean + bn.momentum * mean;
    bn.running_var = (T(1) - bn.momentum) * bn.running_var + bn.momentum * unbias * var;
  } else {
    mean = bn.running_mean;
    var = bn.running_var;
  }
  const Vector<T> inv_std = (var.array() + bn.eps).rsqrt().matrix();
  Matrix<T> normalized = (z.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array();
  Matrix<T> out = (normalized.array().rowwise() * bn.gain.transpose().array()).rowwise() + bn.bias.transpose().array();
  if (cache) {
    cache->mode = mode;
    cache->normalized = std::move(normalized);
    cache->inv_std = inv_std;
  }
  return out;
}

template <typename T>
struct BatchNormGrad {
  Matrix<T> input;
  Vector<T> gain;
  Vector<T> bias;
};

template <typename T>
BatchNormGrad<T> batchnorm_backward(const Matrix<T>& dout, const BatchNorm<T>& bn, const BatchNormCache<T>& cache) {
  BatchNormGrad<T> g;
  const auto& xhat = cache.normalized;
  g.bias = dout.colwise().sum().transpose();
  g.gain = dout.cwiseProduct(xhat).colwise().sum().transpose();
  const Matrix<T> dxhat = dout.array().rowwise() * bn.gain.transpose().array();
  if (cache.mode == Mode::Eval) {
    g.input = dxhat.array().rowwise() * cache.inv_std.transpose().array();
    return g;
  }
  const T n = T(dout.rows());
  const RowVector<T> sum_dxhat = dxhat.colwise().sum();
  const RowVector<T> sum_dxhat_xhat = dxhat.cwiseProduct(xhat).colwise().sum();
  Matrix<T> centered = (dxhat * n).rowwise() - sum_dxhat;
  centered -= (xhat.array().rowwise() * sum_dxhat_xhat.array()).matrix();
  g.input = (centered.array().rowwise() * (cache.inv_std.transpose().array() / n)).matrix();
  return g;
}

template <typename T>
struct LayerCache {
  Matrix<T> input;     // (N * P) x C, after dropout
  Matrix<T> channels;  // (N * P) x D
  BatchNormCache<T> bn;
};

template <typename T>
struct ProjectionCache {
  Index samples = 0;
  std::vector<LayerCache<T>> layers;
};

template <typename T>
struct LayerProjectionGrad {
  Matrix<T> channel_filter;
  Matrix<T> spatial_map;
  Vector<T> bn_gain;
  Vector<T> bn_bias;
};

// Projects every sample of one layer: returns N x D pre-norm latents.
template <typename T>
Matrix<T> project_layer_batch(const Matrix<T>& stacked, Index samples, const LayerProjection<T>& p,
                              Matrix<T>* channels_out = nullptr, int threads = 1) {
  const Index positions = p.shape.positions();
  require(stacked.rows() == samples * positions && stacked.cols() == p.shape.channels, ErrorKind::ShapeMismatch,
          "stacked layer does not match projection shape " + to_string(p.shape));
  const Index d = p.latent_dim();
  Matrix<T> channels(samples * positions, d);
  Matrix<T> z(samples, d);
  parallel_chunks(partition(samples, threads), threads, [&](std::size_t, Range r) {
    if (r.size() == 0) return;
    channels.middleRows(r.begin * positions, r.size() * positions).noalias() =
        stacked.middleRows(r.begin * positions, r.size() * positions) * p.channel_filter;
    for (Index n = r.begin; n < r.end; ++n)
      z.row(n) = channels.middleRows(n * positions, positions).cwiseProduct(p.spatial_map).colwise().sum();
  });
  if (channels_out) *channels_out = std::move(channels);
  return z;
}

// Mean over layers of batchnorm(project_layer(.)), for N samples at once so
// train-mode statistics are batch statistics.
template <typename T>
Matrix<T> project_stack_batch(const FeatureBatch<T>& batch, std::vector<LayerProjection<T>>& layers, Mode mode,
                              ProjectionCache<T>* cache = nullptr, int threads = 1) {
  require(!layers.empty(), ErrorKind::InvalidArgument, "projection needs at least one layer");
  require(batch.layers.size() == layers.size(), ErrorKind::ShapeMismatch,
          "batch has " + std::to_string(batch.layers.size()) + " layers, projection has " + std::to_string(layers.size()));
  const Index d = layers.front().latent_dim();
  Matrix<T> latent = Matrix<T>::Zero(batch.samples, d);
  if (cache) {
    cache->samples = batch.samples;
    cache->layers.assign(layers.size(), {});
  }
  const T inv_layers = T(1) / T(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    require(layers[l].latent_dim() == d, ErrorKind::ShapeMismatch, "latent dimension differs across layers");
    LayerCache<T>* lc = cache ? &cache->layers[l] : nullptr;
    const Matrix<T> z =
        project_layer_batch(batch.layers[l], batch.samples, layers[l], lc ? &lc->channels : nullptr, threads);
    latent += batchnorm_forward(z, layers[l].bn, mode, lc ? &lc->bn : nullptr) * inv_layers;
    if (lc) lc->input = batch.layers[l];
  }
  return latent;
}

// Single-sample projection. Train mode needs batch statistics and therefore
// fails with BatchTooSmall here.
template <typename T>
Vector<T> project_stack(const FeatureStack<T>& stack, std::vector<LayerProjection<T>> layers, Mode mode) {
  FeatureBatch<T> batch{1, stack.layers};
  return project_stack_batch(batch, layers, mode).row(0).transpose();
}

template <typename T>
struct ProjectionBackward {
  std::vector<LayerProjectionGrad<T>> layers;
  std::vector<Matrix<T>> input;  // filled only when requested
};

// Backpropagates d(loss)/d(latent) through the averaged, batch-normalized
// layer projections.
template <typename T>
ProjectionBackward<T> project_stack_backward(const Matrix<T>& dlatent, const std::vector<LayerProjection<T>>& layers,
                                             const ProjectionCache<T>& cache, bool want_input_grad = false,
                                             int threads = 1) {
  ProjectionBackward<T> out;
  const T inv_layers = T(1) / T(layers.size());
  const Index samples = cache.samples;
  const auto chunks = partition(samples, threads);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& p = layers[l];
    const auto& lc = cache.layers[l];
    const Index positions = p.shape.positions();
    const Matrix<T> dnorm = dlatent * inv_layers;
    BatchNormGrad<T> bng = batchnorm_backward(dnorm, p.bn, lc.bn);
    const Matrix<T>& dz = bng.input;

    std::vector<Matrix<T>> dfilter(chunks.size());
    std::vector<Matrix<T>> dspatial(chunks.size());
    Matrix<T> dinput;
    if (want_input_grad) dinput.resize(lc.input.rows(), lc.input.cols());
    parallel_chunks(chunks, threads, [&](std::size_t ci, Range r) {
      dspatial[ci] = Matrix<T>::Zero(positions, p.latent_dim());
      if (r.size() == 0) {
        dfilter[ci] = Matrix<T>::Zero(p.shape.channels, p.latent_dim());
        return;
      }
      Matrix<T> dchannels(r.size() * positions, p.latent_dim());
      for (Index n = r.begin; n < r.end; ++n) {
        const auto dz_row = dz.row(n).array();
        dchannels.middleRows((n - r.begin) * positions, positions) = p.spatial_map.array().rowwise() * dz_row;
        dspatial[ci].array() += lc.channels.middleRows(n * positions, positions).array().rowwise() * dz_row;
      }
      dfilter[ci].noalias() = lc.input.middleRows(r.begin * positions, r.size() * positions).transpose() * dchannels;
      if (want_input_grad)
        dinput.middleRows(r.begin * positions, r.size() * positions).noalias() =
            dchannels * p.channel_filter.transpose();
    });
    LayerProjectionGrad<T> g;
    g.channel_filter = dfilter[0];
    g.spatial_map = dspatial[0];
    for (std::size_t ci = 1; ci < chunks.size(); ++ci) {
      g.channel_filter += dfilter[ci];
      g.spatial_map += dspatial[ci];
    }
    g.bn_gain = std::move(bng.gain);
    g.bn_bias = std::move(bng.bias);
    out.layers.push_back(std::move(g));
    if (want_input_grad) out.input.push_back(std::move(dinput));
  }
  return out;
}

}  // namespace msenc
