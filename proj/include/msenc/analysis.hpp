#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "msenc/io.hpp"
#include "msenc/model.hpp"

namespace msenc {

// Closed-form parameter counts for a head configuration.
struct ParamReport {
  std::vector<std::int64_t> projection_per_layer;  // (C + P) * D + 2D, batch norm included
  std::int64_t projection = 0;
  std::int64_t batchnorm = 0;  // the 2D per layer already inside `projection`
  std::int64_t shared = 0;     // D * K + K
  std::int64_t subject_each = 0;
  std::int64_t subject = 0;    // S * D * K
  std::int64_t pca = 0;        // V * K + V
  std::int64_t trainable_total = 0;
  std::int64_t frozen_total = 0;
  std::int64_t grand_total = 0;
  std::int64_t naive_dense_total = 0;  // V * sum_l P_l * C_l
  double projection_savings_ratio = 0.0;  // dense P*C*D over factorized (P + C)*D, summed over layers
  double end_to_end_savings_ratio = 0.0;  // naive dense regression over trainable head
};

inline ParamReport count_params(const ModelConfig& c) {
  c.validate();
  ParamReport r;
  const std::int64_t d = c.latent_dim;
  const std::int64_t k = c.embedding_dim;
  const std::int64_t v = c.activity_dim;
  const std::int64_t s = c.num_subjects;
  std::int64_t dense_projection = 0;
  std::int64_t factorized_projection = 0;
  std::int64_t dense_inputs = 0;
  for (const auto& shape : c.layer_shapes) {
    const std::int64_t p = shape.positions();
    const std::int64_t ch = shape.channels;
    r.projection_per_layer.push_back((ch + p) * d + 2 * d);
    r.projection += r.projection_per_layer.back();
    r.batchnorm += 2 * d;
    dense_projection += p * ch * d;
    factorized_projection += (p + ch) * d;
    dense_inputs += p * ch;
  }
  r.shared = d * k + k;
  r.subject_each = d * k;
  r.subject = s * d * k;
  r.pca = v * k + v;
  r.trainable_total = r.projection + r.shared + r.subject;
  r.frozen_total = r.pca;
  r.grand_total = r.trainable_total + r.frozen_total;
  r.naive_dense_total = v * dense_inputs;
  r.projection_savings_ratio = double(dense_projection) / double(factorized_projection);
  r.end_to_end_savings_ratio = double(r.naive_dense_total) / double(r.trainable_total);
  return r;
}

inline json to_json(const ParamReport& r) {
  return {{"projection_per_layer", r.projection_per_layer},
          {"projection", r.projection},
          {"batchnorm", r.batchnorm},
          {"shared", r.shared},
          {"subject_each", r.subject_each},
          {"subject", r.subject},
          {"pca", r.pca},
          {"trainable_total", r.trainable_total},
          {"frozen_total", r.frozen_total},
          {"grand_total", r.grand_total},
          {"naive_dense_total", r.naive_dense_total},
          {"projection_savings_ratio", r.projection_savings_ratio},
          {"end_to_end_savings_ratio", r.end_to_end_savings_ratio}};
}

struct GmmOptions {
  int max_iterations = 200;
  double tolerance = 1e-6;       // stop when mean log-likelihood gains less
  double variance_floor = 1e-6;
  int max_reinitializations = 10;
};

// Diagonal-covariance Gaussian mixture. The trace holds the mean per-point
// log-likelihood after each E-step since the last reinitialization.
struct GmmModel {
  int k = 0;
  Matrix<double> means;      // k x P
  Matrix<double> variances;  // k x P
  Vector<double> weights;    // k
  std::vector<double> log_likelihood_trace;
  int iterations = 0;
  bool converged = false;
  int reinitializations = 0;
};

struct GmmResult {
  GmmModel model;
  std::vector<Index> exemplars;  // per component, the row with the highest responsibility
  std::vector<int> assignments;  // per row, the most responsible component
};

namespace detail {

// Row-wise log of sum_k w_k N(x | mu_k, diag var_k); fills responsibilities.
inline double gmm_e_step(const Matrix<double>& x, const GmmModel& g, Matrix<double>& resp,
                         std::vector<double>* best_loglik = nullptr) {
  const Index n = x.rows();
  const Index p = x.cols();
  resp.resize(n, g.k);
  Vector<double> log_norm(g.k);
  for (int c = 0; c < g.k; ++c)
    log_norm(c) = std::log(g.weights(c)) -
                  0.5 * (double(p) * std::log(2.0 * std::numbers::pi) + g.variances.row(c).array().log().sum());
  double total = 0.0;
  if (best_loglik) best_loglik->assign(static_cast<std::size_t>(n), 0.0);
  for (Index i = 0; i < n; ++i) {
    double top = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < g.k; ++c) {
      const double maha = ((x.row(i) - g.means.row(c)).array().square() / g.variances.row(c).array()).sum();
      resp(i, c) = log_norm(c) - 0.5 * maha;
      top = std::max(top, resp(i, c));
    }
    double sum = 0.0;
    for (int c = 0; c < g.k; ++c) sum += std::exp(resp(i, c) - top);
    const double log_px = top + std::log(sum);
    for (int c = 0; c < g.k; ++c) resp(i, c) = std::exp(resp(i, c) - log_px);
    total += log_px;
    if (best_loglik) (*best_loglik)[static_cast<std::size_t>(i)] = log_px;
  }
  return total / double(n);
}

inline std::vector<Index> kmeanspp(const Matrix<double>& x, int k, std::mt19937_64& rng) {
  const Index n = x.rows();
  std::vector<Index> centers;
  centers.push_back(std::uniform_int_distribution<Index>(0, n - 1)(rng));
  std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < k) {
    const auto& last = x.row(centers.back());
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
      dist[static_cast<std::size_t>(i)] = std::min(dist[static_cast<std::size_t>(i)], (x.row(i) - last).squaredNorm());
      total += dist[static_cast<std::size_t>(i)];
    }
    if (!(total > 0.0)) {
      centers.push_back(std::uniform_int_distribution<Index>(0, n - 1)(rng));
      continue;
    }
    std::discrete_distribution<Index> pick(dist.begin(), dist.end());
    centers.push_back(pick(rng));
  }
  return centers;
}

}  // namespace detail

// Fits a diagonal GMM to the rows of `maps` (one spatial pooling map per row)
// by EM from a k-means++ start. Deterministic for a given seed.
inline GmmResult cluster_pooling_maps(const Matrix<double>& maps, int k, std::uint64_t seed,
                                      const GmmOptions& opt = {}) {
  const Index n = maps.rows();
  const Index p = maps.cols();
  require(k >= 1 && n >= k, ErrorKind::InvalidArgument,
          "need 1 <= k <= number of maps (k=" + std::to_string(k) + ", maps=" + std::to_string(n) + ")");
  std::mt19937_64 rng(seed);
  const RowVector<double> global_mean = maps.colwise().mean();
  const RowVector<double> global_var =
      (maps.rowwise() - global_mean).array().square().colwise().mean().max(opt.variance_floor).matrix();

  GmmModel g;
  g.k = k;
  g.means.resize(k, p);
  const auto centers = detail::kmeanspp(maps, k, rng);
  for (int c = 0; c < k; ++c) g.means.row(c) = maps.row(centers[static_cast<std::size_t>(c)]);
  g.variances = global_var.replicate(k, 1);
  g.weights = Vector<double>::Constant(k, 1.0 / k);

  Matrix<double> resp;
  std::vector<double> point_loglik;
  for (g.iterations = 0; g.iterations < opt.max_iterations; ++g.iterations) {
    const double ll = detail::gmm_e_step(maps, g, resp, &point_loglik);
    if (!g.log_likelihood_trace.empty() && ll - g.log_likelihood_trace.back() < opt.tolerance) {
      g.log_likelihood_trace.push_back(ll);
      g.converged = true;
      break;
    }
    g.log_likelihood_trace.push_back(ll);

    const Vector<double> mass = resp.colwise().sum().transpose();
    bool reinitialized = false;
    for (int c = 0; c < k; ++c) {
      if (mass(c) > 1e-8 * double(n)) continue;
      require(g.reinitializations < opt.max_reinitializations, ErrorKind::DegenerateComponent,
              "component " + std::to_string(c) + " collapsed after " + std::to_string(g.reinitializations) +
                  " reinitializations");
      // Restart the collapsed component on the worst-explained point.
      const auto worst = std::min_element(point_loglik.begin(), point_loglik.end()) - point_loglik.begin();
      g.means.row(c) = maps.row(worst);
      g.variances.row(c) = global_var;
      g.weights(c) = 1.0 / k;
      point_loglik[static_cast<std::size_t>(worst)] = std::numeric_limits<double>::infinity();
      ++g.reinitializations;
      reinitialized = true;
    }
    if (reinitialized) {
      g.weights /= g.weights.sum();
      g.log_likelihood_trace.clear();
      continue;
    }
    for (int c = 0; c < k; ++c) {
      g.weights(c) = mass(c) / double(n);
      const RowVector<double> mean = (resp.col(c).transpose() * maps) / mass(c);
      g.means.row(c) = mean;
      const RowVector<double> var =
          (resp.col(c).transpose() * (maps.rowwise() - mean).array().square().matrix()) / mass(c);
      g.variances.row(c) = var.array().max(opt.variance_floor).matrix();
    }
  }
  if (!g.converged) detail::gmm_e_step(maps, g, resp);

  GmmResult out;
  out.exemplars.resize(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    Index best = 0;
    resp.col(c).maxCoeff(&best);
    out.exemplars[static_cast<std::size_t>(c)] = best;
  }
  out.assignments.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    resp.row(i).maxCoeff(&best);
    out.assignments[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  out.model = std::move(g);
  return out;
}

}  // namespace msenc
