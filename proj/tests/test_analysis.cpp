#include <gtest/gtest.h>

#include "support.hpp"

using namespace msenc;

TEST(CountParams, BaseArchitecture) {
  const ParamReport r = count_params(presets::base_arch(327'684));
  for (auto per_layer : r.projection_per_layer) EXPECT_EQ(per_layer, (768 + 256) * 1024 + 2 * 1024);
  EXPECT_EQ(r.projection, 6 * 1'050'624);
  EXPECT_EQ(r.shared, 1024 * 2048 + 2048);
  EXPECT_EQ(r.subject_each, 2'097'152);
  EXPECT_EQ(r.subject, 8 * 2'097'152);
  EXPECT_EQ(r.trainable_total, 25'180'160);
  EXPECT_EQ(r.pca, 327'684LL * 2048 + 327'684);
  EXPECT_EQ(r.grand_total, r.trainable_total + r.pca);
  EXPECT_DOUBLE_EQ(r.projection_savings_ratio, 256.0 * 768.0 / (256.0 + 768.0));
  EXPECT_DOUBLE_EQ(r.projection_savings_ratio, 192.0);
}

TEST(CountParams, MatchesEnumeratedModel) {
  for (const auto& c : {fixture::tiny_config(), presets::base_arch(64, 2)}) {
    if (c.latent_dim > 64) {
      // Full enumeration of the base architecture allocates ~25M doubles; use floats.
      Rng rng(0);
      PcaEmbedding<float> pca;
      pca.basis = Matrix<float>::Zero(c.activity_dim, c.embedding_dim);
      pca.center = Vector<float>::Zero(c.activity_dim);
      pca.explained_variance = Vector<float>::Zero(c.embedding_dim);
      auto m = init_model<float>(c, pca, rng);
      std::int64_t n = 0;
      for (const auto& a : trainable_arrays(m)) n += static_cast<std::int64_t>(a.values.size());
      EXPECT_EQ(n, count_params(c).trainable_total);
    } else {
      auto m = fixture::random_head(1, c);
      std::int64_t n = 0;
      for (const auto& a : trainable_arrays(m)) n += static_cast<std::int64_t>(a.values.size());
      EXPECT_EQ(n, count_params(c).trainable_total);
      EXPECT_EQ(m.pca.basis.size() + m.pca.center.size(), count_params(c).pca);
    }
  }
}

namespace {

Matrix<double> two_blobs(Index per_blob, Index dim, std::mt19937_64& rng) {
  Matrix<double> x = fixture::gaussian<double>(2 * per_blob, dim, rng, 0.1);
  x.bottomRows(per_blob).array() += 5.0;
  return x;
}

}  // namespace

TEST(Gmm, SeparatesTwoBlobs) {
  std::mt19937_64 rng(2);
  const Matrix<double> x = two_blobs(40, 3, rng);
  const auto r = cluster_pooling_maps(x, 2, 7);
  EXPECT_TRUE(r.model.converged);
  const int a = r.assignments.front();
  for (Index i = 0; i < 40; ++i) EXPECT_EQ(r.assignments[std::size_t(i)], a);
  for (Index i = 40; i < 80; ++i) EXPECT_NE(r.assignments[std::size_t(i)], a);
  EXPECT_NEAR(r.model.weights.sum(), 1.0, 1e-12);
  EXPECT_NEAR(r.model.weights(0), 0.5, 1e-9);
  EXPECT_EQ(r.exemplars.size(), 2u);
  EXPECT_NE(r.assignments[std::size_t(r.exemplars[0])], r.assignments[std::size_t(r.exemplars[1])]);
}

TEST(Gmm, SingleComponentIsSampleMeanAndBiasedVariance) {
  std::mt19937_64 rng(3);
  const Matrix<double> x = fixture::gaussian<double>(30, 4, rng);
  const auto r = cluster_pooling_maps(x, 1, 0);
  for (Index j = 0; j < 4; ++j) {
    double mean = 0.0;
    for (Index i = 0; i < 30; ++i) mean += x(i, j) / 30.0;
    double var = 0.0;
    for (Index i = 0; i < 30; ++i) var += (x(i, j) - mean) * (x(i, j) - mean) / 30.0;
    EXPECT_NEAR(r.model.means(0, j), mean, 1e-12);
    EXPECT_NEAR(r.model.variances(0, j), var, 1e-12);
  }
  EXPECT_DOUBLE_EQ(r.model.weights(0), 1.0);
}

TEST(Gmm, DuplicatingDataKeepsMeans) {
  std::mt19937_64 rng(4);
  const Matrix<double> x = fixture::gaussian<double>(25, 3, rng);
  Matrix<double> doubled(50, 3);
  doubled << x, x;
  const auto a = cluster_pooling_maps(x, 1, 0);
  const auto b = cluster_pooling_maps(doubled, 1, 0);
  EXPECT_LE((a.model.means - b.model.means).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((a.model.variances - b.model.variances).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Gmm, LogLikelihoodTraceIsMonotone) {
  std::mt19937_64 rng(5);
  const Matrix<double> x = fixture::gaussian<double>(120, 5, rng);
  for (int k : {2, 3, 5}) {
    const auto r = cluster_pooling_maps(x, k, 11);
    const auto& trace = r.model.log_likelihood_trace;
    ASSERT_GE(trace.size(), 2u);
    for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_GE(trace[i], trace[i - 1] - 1e-9);
    EXPECT_NEAR(r.model.weights.sum(), 1.0, 1e-12);
  }
}

TEST(Gmm, VarianceFloorHoldsOnDuplicatePoints) {
  Matrix<double> x = Matrix<double>::Zero(10, 2);
  x.bottomRows(5).setConstant(1.0);
  GmmOptions opt;
  opt.variance_floor = 1e-3;
  const auto r = cluster_pooling_maps(x, 2, 0, opt);
  EXPECT_GE(r.model.variances.minCoeff(), 1e-3);
  EXPECT_TRUE(r.model.means.allFinite());
}

TEST(Gmm, DeterministicForSeed) {
  std::mt19937_64 rng(6);
  const Matrix<double> x = fixture::gaussian<double>(60, 4, rng);
  const auto a = cluster_pooling_maps(x, 3, 9);
  const auto b = cluster_pooling_maps(x, 3, 9);
  EXPECT_EQ(a.model.means, b.model.means);
  EXPECT_EQ(a.assignments, b.assignments);
}

TEST(Gmm, InvalidComponentCount) {
  const Matrix<double> x = Matrix<double>::Zero(3, 2);
  for (int k : {0, 4}) {
    try {
      cluster_pooling_maps(x, k, 0);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::InvalidArgument);
    }
  }
}
