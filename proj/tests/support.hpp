#pragma once

// Independent reference computations shared by the unit suites and the
// acceptance runner. Nothing here calls into the library's numerics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "msenc/msenc.hpp"

namespace oracle {

using msenc::Index;
template <typename T>
using Matrix = msenc::Matrix<T>;
template <typename T>
using Vector = msenc::Vector<T>;

// Symmetric eigendecomposition by cyclic Jacobi rotations. Eigenvalues come
// back in descending order, eigenvectors as matching columns.
struct Eigen {
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;  // vectors[k] is the k-th eigenvector
};

inline Eigen jacobi_eigen(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p];
          const double akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k];
          const double aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p];
          const double vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x][x] > a[y][y]; });
  Eigen out;
  for (std::size_t k : order) {
    out.values.push_back(a[k][k]);
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = v[i][k];
    // Largest-magnitude entry positive.
    std::size_t arg = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (std::abs(col[i]) > std::abs(col[arg])) arg = i;
    if (col[arg] < 0)
      for (double& x : col) x = -x;
    out.vectors.push_back(std::move(col));
  }
  return out;
}

// Sample covariance (divisor N - 1) computed with plain loops.
inline std::vector<std::vector<double>> covariance(const Matrix<double>& x) {
  const auto n = static_cast<std::size_t>(x.rows());
  const auto v = static_cast<std::size_t>(x.cols());
  std::vector<double> mean(v, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < v; ++j) mean[j] += x(Index(i), Index(j)) / double(n);
  std::vector<std::vector<double>> c(v, std::vector<double>(v, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < v; ++a)
      for (std::size_t b = 0; b < v; ++b)
        c[a][b] += (x(Index(i), Index(a)) - mean[a]) * (x(Index(i), Index(b)) - mean[b]) / double(n - 1);
  return c;
}

// Largest-remainder apportionment of n over integer percentages, ties toward
// the earlier bucket. Pure integer arithmetic.
inline std::array<Index, 3> split_counts(Index n, std::array<Index, 3> percent = {85, 10, 5}) {
  std::array<Index, 3> counts{};
  std::array<Index, 3> rem{};
  Index assigned = 0;
  for (int i = 0; i < 3; ++i) {
    counts[i] = n * percent[i] / 100;
    rem[i] = n * percent[i] % 100;
    assigned += counts[i];
  }
  for (Index left = n - assigned; left > 0; --left) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (rem[i] > rem[best]) best = i;
    ++counts[best];
    rem[best] = -1;
  }
  return counts;
}

// out[d] = sum over (p, c) of layer[p][c] * spatial[p][d] * filter[c][d].
template <typename T>
Vector<T> dense_projection(const Matrix<T>& layer, const Matrix<T>& filter, const Matrix<T>& spatial) {
  Vector<T> out = Vector<T>::Zero(filter.cols());
  for (Index d = 0; d < filter.cols(); ++d)
    for (Index p = 0; p < layer.rows(); ++p)
      for (Index c = 0; c < layer.cols(); ++c) out(d) += layer(p, c) * spatial(p, d) * filter(c, d);
  return out;
}

// Norm-wise relative error ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double rel_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

template <typename M>
double rel_error(const M& a, const M& b) {
  return rel_error(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                   std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

// Central differences of f with respect to every entry of `values`.
inline std::vector<double> central_difference(std::span<double> values, const std::function<double()>& f,
                                              double h = 1e-5) {
  std::vector<double> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = f();
    values[i] = saved - h;
    const double down = f();
    values[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// R^2 of one column, computed directly.
inline double r2(const std::vector<double>& pred, const std::vector<double>& target) {
  double mean = 0.0;
  for (double t : target) mean += t / double(target.size());
  double res = 0.0, tot = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    res += (pred[i] - target[i]) * (pred[i] - target[i]);
    tot += (target[i] - mean) * (target[i] - mean);
  }
  return 1.0 - res / tot;
}

}  // namespace oracle

namespace fixture {

using msenc::Index;

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("msenc-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <typename T>
msenc::Matrix<T> gaussian(Index rows, Index cols, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  msenc::Matrix<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = T(normal(rng));
  return m;
}

template <typename T>
msenc::Vector<T> gaussian_vec(Index n, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  msenc::Vector<T> v(n);
  for (Index i = 0; i < n; ++i) v(i) = T(normal(rng));
  return v;
}

// A small fully random head: every trainable block and the batch-norm running
// statistics are nonzero so gradient checks see all terms.
inline msenc::HeadModel<double> random_head(std::uint64_t seed, const msenc::ModelConfig& c) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> positive(0.5, 2.0);
  msenc::HeadModel<double> m;
  m.config = c;
  for (const auto& shape : c.layer_shapes) {
    auto p = msenc::make_layer_projection<double>(shape, c.latent_dim);
    p.channel_filter = gaussian<double>(shape.channels, c.latent_dim, rng);
    p.spatial_map = gaussian<double>(shape.positions(), c.latent_dim, rng);
    p.bn.gain = gaussian_vec<double>(c.latent_dim, rng);
    p.bn.bias = gaussian_vec<double>(c.latent_dim, rng);
    p.bn.running_mean = gaussian_vec<double>(c.latent_dim, rng);
    for (Index d = 0; d < c.latent_dim; ++d) p.bn.running_var(d) = positive(rng);
    m.layers.push_back(std::move(p));
  }
  m.encoder = msenc::EncoderParams<double>::zeros(c.latent_dim, c.embedding_dim, c.num_subjects);
  m.encoder.shared_weight = gaussian<double>(c.latent_dim, c.embedding_dim, rng);
  m.encoder.shared_bias = gaussian_vec<double>(c.embedding_dim, rng);
  for (auto& w : m.encoder.subject_weight) w = gaussian<double>(c.latent_dim, c.embedding_dim, rng);
  const msenc::Matrix<double> act = gaussian<double>(4 * c.activity_dim, c.activity_dim, rng);
  m.pca = msenc::fit_pca(act, c.embedding_dim);
  return m;
}

inline msenc::ModelConfig tiny_config() {
  msenc::ModelConfig c;
  c.layer_shapes = {{2, 2, 3}, {1, 3, 2}};
  c.latent_dim = 4;
  c.embedding_dim = 3;
  c.activity_dim = 5;
  c.num_subjects = 3;
  return c;
}

inline msenc::FeatureBatch<double> random_batch(const msenc::ModelConfig& c, Index n, std::mt19937_64& rng) {
  msenc::FeatureBatch<double> b;
  b.samples = n;
  for (const auto& s : c.layer_shapes) b.layers.push_back(gaussian<double>(n * s.positions(), s.channels, rng));
  return b;
}

struct GradientAudit {
  std::string name;
  double error = 0.0;
};

// Compares backward() against central differences of the MSE loss for every
// trainable array of `model`, in the given mode. Subjects mix groups and
// individuals so all encoder paths are exercised.
inline std::vector<GradientAudit> audit_head_gradients(msenc::HeadModel<double> model, msenc::Mode mode,
                                                       std::uint64_t seed, Index n = 6) {
  std::mt19937_64 rng(seed);
  const msenc::FeatureBatch<double> batch = random_batch(model.config, n, rng);
  const msenc::Matrix<double> target = gaussian<double>(n, model.config.activity_dim, rng);
  std::vector<msenc::SubjectId> subjects;
  for (Index i = 0; i < n; ++i)
    subjects.push_back(i % 4 == 3 ? msenc::SubjectId::group()
                                  : msenc::SubjectId(static_cast<int>(i % model.config.num_subjects)));
  msenc::ForwardOptions opt;
  opt.mode = mode;

  auto loss = [&]() {
    msenc::HeadModel<double> copy = model;  // train mode updates running stats
    const auto pred = msenc::forward(copy, batch, subjects, opt);
    return msenc::mse_loss(pred, target).loss;
  };
  msenc::HeadModel<double> work = model;
  msenc::ForwardCache<double> cache;
  const auto pred = msenc::forward(work, batch, subjects, opt, &cache);
  const auto l = msenc::mse_loss(pred, target);
  work.layers = model.layers;  // restore running stats; generation is unchanged
  auto grads = msenc::backward(work, cache, l.grad);
  auto grad_arrays = grads.arrays();
  auto params = msenc::trainable_arrays(model);

  std::vector<GradientAudit> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto fd = oracle::central_difference(params[i].values, loss);
    out.push_back({params[i].name, oracle::rel_error(std::span<const double>(grad_arrays[i].data(), grad_arrays[i].size()),
                                                     std::span<const double>(fd))});
  }
  return out;
}

}  // namespace fixture
