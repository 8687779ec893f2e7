#include <gtest/gtest.h>

#include <Eigen/SVD>

#include "support.hpp"

using namespace msenc;

namespace {

template <typename T>
LayerProjection<T> random_projection(const LayerShape& shape, Index d, std::mt19937_64& rng) {
  auto p = make_layer_projection<T>(shape, d);
  p.channel_filter = fixture::gaussian<T>(shape.channels, d, rng);
  p.spatial_map = fixture::gaussian<T>(shape.positions(), d, rng);
  return p;
}

template <typename T>
Vector<T> flatten(const Matrix<T>& layer) {
  return Eigen::Map<const Vector<T>>(layer.data(), layer.size());
}

}  // namespace

TEST(ProjectLayer, SinglePixelIsChannelDotProduct) {
  auto p = make_layer_projection<double>({1, 1, 2}, 1);
  p.channel_filter << 2.0, -3.0;
  p.spatial_map << 1.0;
  Matrix<double> x(1, 2);
  x << 5.0, 7.0;
  EXPECT_DOUBLE_EQ(project_layer(x, p)(0), 2.0 * 5.0 - 3.0 * 7.0);
}

TEST(ProjectLayer, ZeroSpatialMapAnnihilates) {
  std::mt19937_64 rng(1);
  auto p = random_projection<double>({3, 2, 4}, 5, rng);
  p.spatial_map.setZero();
  EXPECT_EQ(project_layer(fixture::gaussian<double>(6, 4, rng), p), Vector<double>::Zero(5));
}

TEST(ProjectLayer, ShapeMismatch) {
  std::mt19937_64 rng(1);
  auto p = random_projection<double>({2, 2, 3}, 2, rng);
  try {
    project_layer(fixture::gaussian<double>(4, 2, rng), p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
}

TEST(Densify, SingleLatentOuterProduct) {
  auto p = make_layer_projection<double>({1, 2, 1}, 1);
  p.spatial_map << 3.0, 4.0;
  p.channel_filter << 0.5;
  const Matrix<double> dense = densify(p);
  ASSERT_EQ(dense.rows(), 2);
  EXPECT_DOUBLE_EQ(dense(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(dense(1, 0), 2.0);
}

TEST(Densify, MatchesLoopOracleAndProjectLayerFloat64) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const LayerShape shape{1 + trial % 4, 1 + (trial / 4) % 4, 1 + trial % 8};
    const Index d = 1 + trial % 8;
    const auto p = random_projection<double>(shape, d, rng);
    const Matrix<double> x = fixture::gaussian<double>(shape.positions(), shape.channels, rng);
    const Vector<double> fast = project_layer(x, p);
    const Vector<double> dense = densify(p).transpose() * flatten(x);
    const Vector<double> loops = oracle::dense_projection(x, p.channel_filter, p.spatial_map);
    EXPECT_LE(oracle::rel_error(fast, loops), 1e-12);
    EXPECT_LE(oracle::rel_error(dense, loops), 1e-12);
  }
}

TEST(Densify, Float32WithinTolerance) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const LayerShape shape{2, 3, 5};
    const auto p = random_projection<float>(shape, 4, rng);
    const Matrix<float> x = fixture::gaussian<float>(shape.positions(), shape.channels, rng);
    const Vector<double> fast = project_layer(x, p).cast<double>();
    const Vector<double> loops =
        oracle::dense_projection<double>(x.cast<double>(), p.channel_filter.cast<double>(), p.spatial_map.cast<double>());
    EXPECT_LE(oracle::rel_error(fast, loops), 1e-5);
  }
}

TEST(Densify, EveryColumnReshapesToRankOne) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const LayerShape shape{2 + trial % 3, 3, 2 + trial % 5};
    const auto p = random_projection<double>(shape, 3, rng);
    const Matrix<double> dense = densify(p);
    for (Index d = 0; d < 3; ++d) {
      const Matrix<double> m = Eigen::Map<const Matrix<double>>(dense.col(d).eval().data(), shape.positions(), shape.channels);
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
      const auto s = svd.singularValues();
      ASSERT_GT(s(0), 0.0);
      EXPECT_LE(s(1) / s(0), 1e-12);
    }
  }
}

TEST(ProjectLayer, IsLinear) {
  std::mt19937_64 rng(5);
  const LayerShape shape{3, 3, 4};
  const auto p = random_projection<double>(shape, 6, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix<double> x = fixture::gaussian<double>(9, 4, rng);
    const Matrix<double> y = fixture::gaussian<double>(9, 4, rng);
    const double a = 0.75, b = -2.5;
    const Vector<double> lhs = project_layer<double>(a * x + b * y, p);
    const Vector<double> rhs = a * project_layer(x, p) + b * project_layer(y, p);
    EXPECT_LE(oracle::rel_error(lhs, rhs), 1e-14);
  }
}

TEST(ProjectLayer, TrainableCountPerLayer) {
  const auto p = make_layer_projection<double>({16, 16, 768}, 1024);
  EXPECT_EQ(p.trainable_count(), (768 + 256) * 1024 + 2 * 1024);
}

TEST(BatchNorm, TrainNormalizesEachDimension) {
  std::mt19937_64 rng(6);
  Matrix<double> z = fixture::gaussian<double>(64, 5, rng, 3.0);
  z.rowwise() += RowVector<double>::LinSpaced(5, -4.0, 4.0);
  auto bn = BatchNorm<double>::identity(5);
  const Matrix<double> out = batchnorm_forward(z, bn, Mode::Train);
  const RowVector<double> mean = out.colwise().mean();
  const RowVector<double> var = (out.rowwise() - mean).array().square().colwise().mean();
  EXPECT_LE(mean.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((var.array() - 1.0).abs().maxCoeff(), 1e-5);
}

TEST(BatchNorm, EvalWithIdentityStatsIsNearIdentity) {
  std::mt19937_64 rng(7);
  const Matrix<double> z = fixture::gaussian<double>(10, 4, rng);
  auto bn = BatchNorm<double>::identity(4);
  const Matrix<double> out = batchnorm_forward(z, bn, Mode::Eval);
  EXPECT_LE((out - z / std::sqrt(1.0 + 1e-5)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE((out - z).cwiseAbs().maxCoeff(), 1e-5 * z.cwiseAbs().maxCoeff());
}

TEST(BatchNorm, ConstantBatchGivesBias) {
  auto bn = BatchNorm<double>::identity(3);
  bn.bias << 0.5, -1.0, 2.0;
  const Matrix<double> z = Matrix<double>::Constant(4, 3, 7.0);
  const Matrix<double> out = batchnorm_forward(z, bn, Mode::Train);
  for (Index i = 0; i < 4; ++i) EXPECT_EQ(out.row(i), bn.bias.transpose());
}

TEST(BatchNorm, TrainNeedsTwoSamples) {
  auto bn = BatchNorm<double>::identity(3);
  try {
    batchnorm_forward<double>(Matrix<double>::Ones(1, 3), bn, Mode::Train);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::BatchTooSmall);
  }
  EXPECT_NO_THROW(batchnorm_forward<double>(Matrix<double>::Ones(1, 3), bn, Mode::Eval));
}

TEST(BatchNorm, RunningStatsMoveByMomentum) {
  Matrix<double> z(4, 1);
  z << 1.0, 2.0, 3.0, 6.0;  // mean 3, biased var 3.5, unbiased 14/3
  auto bn = BatchNorm<double>::identity(1);
  batchnorm_forward(z, bn, Mode::Train);
  EXPECT_NEAR(bn.running_mean(0), 0.9 * 0.0 + 0.1 * 3.0, 1e-15);
  EXPECT_NEAR(bn.running_var(0), 0.9 * 1.0 + 0.1 * (14.0 / 3.0), 1e-15);
  const auto before = bn.running_mean;
  batchnorm_forward(z, bn, Mode::Eval);
  EXPECT_EQ(bn.running_mean, before);
}

TEST(ProjectStack, SingleLayerEqualsBatchNormOfProjection) {
  std::mt19937_64 rng(8);
  const LayerShape shape{2, 2, 3};
  std::vector<LayerProjection<double>> layers{random_projection<double>(shape, 4, rng)};
  layers[0].bn.running_mean = fixture::gaussian_vec<double>(4, rng);
  layers[0].bn.running_var = Vector<double>::Constant(4, 2.0);
  FeatureStack<double> stack{{fixture::gaussian<double>(4, 3, rng)}};
  const Vector<double> got = project_stack(stack, layers, Mode::Eval);
  auto bn = layers[0].bn;
  const Matrix<double> z = project_layer(stack.layers[0], layers[0]).transpose();
  const Vector<double> want = batchnorm_forward(z, bn, Mode::Eval).row(0).transpose();
  EXPECT_LE(oracle::rel_error(got, want), 1e-15);
}

TEST(ProjectStack, IdenticalLayersEqualOneBranch) {
  std::mt19937_64 rng(9);
  const LayerShape shape{2, 3, 2};
  const auto p = random_projection<double>(shape, 3, rng);
  const Matrix<double> x = fixture::gaussian<double>(6, 2, rng);
  const Vector<double> one = project_stack(FeatureStack<double>{{x}}, {p}, Mode::Eval);
  const Vector<double> two = project_stack(FeatureStack<double>{{x, x}}, {p, p}, Mode::Eval);
  EXPECT_LE(oracle::rel_error(one, two), 1e-15);
}

TEST(ProjectStack, TwoLayerEvalMatchesDenseComposition) {
  std::mt19937_64 rng(10);
  const std::vector<LayerShape> shapes{{2, 2, 3}, {3, 1, 4}};
  std::vector<LayerProjection<double>> layers;
  FeatureStack<double> stack;
  for (const auto& s : shapes) {
    auto p = random_projection<double>(s, 5, rng);
    p.bn.gain = fixture::gaussian_vec<double>(5, rng);
    p.bn.bias = fixture::gaussian_vec<double>(5, rng);
    p.bn.running_mean = fixture::gaussian_vec<double>(5, rng);
    p.bn.running_var = Vector<double>::Constant(5, 0.7);
    layers.push_back(p);
    stack.layers.push_back(fixture::gaussian<double>(s.positions(), s.channels, rng));
  }
  Vector<double> want = Vector<double>::Zero(5);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& p = layers[l];
    const Vector<double> z = oracle::dense_projection(stack.layers[l], p.channel_filter, p.spatial_map);
    for (Index d = 0; d < 5; ++d)
      want(d) += 0.5 * (p.bn.gain(d) * (z(d) - p.bn.running_mean(d)) / std::sqrt(0.7 + 1e-5) + p.bn.bias(d));
  }
  EXPECT_LE(oracle::rel_error(project_stack(stack, layers, Mode::Eval), want), 1e-12);
}

TEST(FeatureDropout, ZeroRateAndEvalAreIdentity) {
  std::mt19937_64 data_rng(11);
  FeatureStack<double> stack{{fixture::gaussian<double>(5, 4, data_rng)}};
  Rng rng(1);
  EXPECT_EQ(feature_dropout(stack, 0.0, Mode::Train, rng).layers[0], stack.layers[0]);
  EXPECT_EQ(feature_dropout(stack, 0.0, Mode::Eval, rng).layers[0], stack.layers[0]);
  EXPECT_EQ(feature_dropout(stack, 0.9, Mode::Eval, rng).layers[0], stack.layers[0]);
  EXPECT_THROW(feature_dropout(stack, 1.0, Mode::Train, rng), Error);
}

TEST(FeatureDropout, SurvivorFractionAndMeanOverAMillionElements) {
  const Index n = 1 << 20;
  FeatureBatch<double> batch{1, {Matrix<double>::Ones(n, 1)}};
  Rng rng(12);
  const double rate = 0.9;
  feature_dropout(batch, rate, Mode::Train, rng);
  const auto& x = batch.layers[0];
  const double survivors = double((x.array() != 0.0).count());
  const double p = 1.0 - rate;
  const double sigma = std::sqrt(double(n) * p * (1.0 - p));
  EXPECT_LE(std::abs(survivors - double(n) * p), 3.0 * sigma);
  for (Index i = 0; i < n; ++i)
    if (x(i, 0) != 0.0) ASSERT_DOUBLE_EQ(x(i, 0), 1.0 / p);
  // Mean of inverted dropout of ones is survivors / (n p); same binomial bound.
  EXPECT_LE(std::abs(x.mean() - 1.0), 3.0 * sigma / (double(n) * p));
}

namespace {

// Loss = sum(latent * weights) so every output entry carries a distinct
// upstream gradient.
struct StackProblem {
  std::vector<LayerProjection<double>> layers;
  FeatureBatch<double> batch;
  Matrix<double> weights;

  double loss(Mode mode) const {
    auto copy = layers;
    return project_stack_batch(batch, copy, mode).cwiseProduct(weights).sum();
  }
};

StackProblem make_problem(std::uint64_t seed, Index n) {
  std::mt19937_64 rng(seed);
  StackProblem prob;
  prob.batch.samples = n;
  for (const LayerShape& s : {LayerShape{2, 2, 3}, LayerShape{1, 3, 2}}) {
    auto p = random_projection<double>(s, 4, rng);
    p.bn.gain = fixture::gaussian_vec<double>(4, rng);
    p.bn.bias = fixture::gaussian_vec<double>(4, rng);
    p.bn.running_mean = fixture::gaussian_vec<double>(4, rng);
    p.bn.running_var = Vector<double>::Constant(4, 1.3);
    prob.layers.push_back(p);
    prob.batch.layers.push_back(fixture::gaussian<double>(n * s.positions(), s.channels, rng));
  }
  prob.weights = fixture::gaussian<double>(n, 4, rng);
  return prob;
}

}  // namespace

class ProjectionGradient : public ::testing::TestWithParam<Mode> {};

TEST_P(ProjectionGradient, MatchesCentralDifferences) {
  const Mode mode = GetParam();
  StackProblem prob = make_problem(13, 5);
  ProjectionCache<double> cache;
  auto work = prob.layers;
  project_stack_batch(prob.batch, work, mode, &cache);
  const ProjectionBackward<double> g = project_stack_backward(prob.weights, prob.layers, cache, true);
  auto f = [&]() { return prob.loss(mode); };
  for (std::size_t l = 0; l < prob.layers.size(); ++l) {
    auto& p = prob.layers[l];
    const auto& gl = g.layers[l];
    const std::pair<std::span<double>, std::span<const double>> blocks[] = {
        {as_span(p.channel_filter), {gl.channel_filter.data(), std::size_t(gl.channel_filter.size())}},
        {as_span(p.spatial_map), {gl.spatial_map.data(), std::size_t(gl.spatial_map.size())}},
        {as_span(p.bn.gain), {gl.bn_gain.data(), std::size_t(gl.bn_gain.size())}},
        {as_span(p.bn.bias), {gl.bn_bias.data(), std::size_t(gl.bn_bias.size())}},
    };
    for (const auto& [values, analytic] : blocks) {
      const auto fd = oracle::central_difference(values, f);
      EXPECT_LE(oracle::rel_error(analytic, fd), 1e-6) << "layer " << l;
    }
    auto& x = prob.batch.layers[l];
    const auto fd = oracle::central_difference(as_span(x), f);
    EXPECT_LE(oracle::rel_error(std::span<const double>(g.input[l].data(), std::size_t(g.input[l].size())), fd), 1e-6)
        << "input of layer " << l;
  }
}

INSTANTIATE_TEST_SUITE_P(BothModes, ProjectionGradient, ::testing::Values(Mode::Train, Mode::Eval),
                         [](const auto& info) { return info.param == Mode::Train ? "Train" : "Eval"; });

TEST(ProjectionThreads, ParallelMatchesSerial) {
  StackProblem prob = make_problem(14, 37);
  ProjectionCache<double> c1, c4;
  auto w1 = prob.layers;
  auto w4 = prob.layers;
  const Matrix<double> a = project_stack_batch(prob.batch, w1, Mode::Train, &c1, 1);
  const Matrix<double> b = project_stack_batch(prob.batch, w4, Mode::Train, &c4, 4);
  EXPECT_LE(oracle::rel_error(a, b), 1e-12);
  const auto g1 = project_stack_backward(prob.weights, prob.layers, c1, false, 1);
  const auto g4 = project_stack_backward(prob.weights, prob.layers, c4, false, 4);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_LE(oracle::rel_error(g1.layers[l].channel_filter, g4.layers[l].channel_filter), 1e-12);
    EXPECT_LE(oracle::rel_error(g1.layers[l].spatial_map, g4.layers[l].spatial_map), 1e-12);
  }
}
