#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/QR>

#include "msenc/dataset.hpp"
#include "msenc/model.hpp"

namespace msenc {

struct SynthSpec {
  Index subjects = 4;
  std::vector<LayerShape> layer_shapes{{4, 4, 16}, {4, 4, 16}};
  Index latent_dim = 32;
  Index embedding_dim = 16;
  Index activity_dim = 64;
  Index samples = 4096;
  double noise = 0.0;           // sigma of additive gaussian target noise
  std::uint64_t seed = 0;
  Index feature_rank = 24;      // shared low-rank structure of the features
  double feature_noise = 0.1;   // isotropic feature noise on top of it
  double subject_scale = 0.5;   // planted subject maps relative to the shared map
  double missing_fraction = 0.0;  // per-subject fraction of vertices marked invalid
  Index num_rois = 4;

  void validate() const {
    require(subjects >= 1 && latent_dim >= 1 && embedding_dim >= 1 && activity_dim >= embedding_dim && samples >= 2,
            ErrorKind::InvalidArgument, "synthetic dimensions must be positive with K <= V and N >= 2");
    require(!layer_shapes.empty(), ErrorKind::InvalidArgument, "synthetic data needs at least one layer");
    require(noise >= 0.0 && feature_noise >= 0.0, ErrorKind::InvalidArgument, "noise levels must be >= 0");
    require(missing_fraction >= 0.0 && missing_fraction < 1.0, ErrorKind::InvalidArgument,
            "missing_fraction must lie in [0, 1)");
    require(num_rois >= 0 && num_rois <= activity_dim, ErrorKind::InvalidArgument, "num_rois must lie in [0, V]");
  }
};

inline json to_json(const SynthSpec& s) {
  json shapes = json::array();
  for (const auto& l : s.layer_shapes) shapes.push_back({l.height, l.width, l.channels});
  return {{"subjects", s.subjects},           {"layer_shapes", shapes},
          {"latent_dim", s.latent_dim},       {"embedding_dim", s.embedding_dim},
          {"activity_dim", s.activity_dim},   {"samples", s.samples},
          {"noise", s.noise},                 {"seed", s.seed},
          {"feature_rank", s.feature_rank},   {"feature_noise", s.feature_noise},
          {"subject_scale", s.subject_scale}, {"missing_fraction", s.missing_fraction},
          {"num_rois", s.num_rois}};
}

inline SynthSpec synth_spec_from_json(const json& j, SynthSpec s = {}) {
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  if (j.contains("layer_shapes")) {
    s.layer_shapes.clear();
    for (const auto& l : j.at("layer_shapes"))
      s.layer_shapes.push_back({l.at(0).get<Index>(), l.at(1).get<Index>(), l.at(2).get<Index>()});
  }
  take("subjects", s.subjects);
  take("latent_dim", s.latent_dim);
  take("embedding_dim", s.embedding_dim);
  take("activity_dim", s.activity_dim);
  take("samples", s.samples);
  take("noise", s.noise);
  take("seed", s.seed);
  take("feature_rank", s.feature_rank);
  take("feature_noise", s.feature_noise);
  take("subject_scale", s.subject_scale);
  take("missing_fraction", s.missing_fraction);
  take("num_rois", s.num_rois);
  return s;
}

struct SynthResult {
  Dataset dataset;
  HeadModel<double> planted;
};

// Builds a dataset whose targets are the eval-mode output of a randomly
// parameterized head (plus optional gaussian noise), and writes it to `dir`
// when one is given. The planted head is returned for recovery checks.
inline SynthResult synthesize_dataset(const SynthSpec& spec, const fs::path& dir = {}) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](Index rows, Index cols, double stddev) {
    Matrix<double> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng) * stddev;
    return m;
  };

  ModelConfig config;
  config.layer_shapes = spec.layer_shapes;
  config.latent_dim = spec.latent_dim;
  config.embedding_dim = spec.embedding_dim;
  config.activity_dim = spec.activity_dim;
  config.num_subjects = spec.subjects;

  HeadModel<double> planted;
  planted.config = config;
  std::uniform_real_distribution<double> gain_dist(0.5, 1.5);
  for (const auto& shape : spec.layer_shapes) {
    auto p = make_layer_projection<double>(shape, spec.latent_dim);
    p.channel_filter = gaussian(shape.channels, spec.latent_dim, 1.0 / std::sqrt(double(shape.channels)));
    p.spatial_map = gaussian(shape.positions(), spec.latent_dim, 1.0 / std::sqrt(double(shape.positions())));
    for (Index d = 0; d < spec.latent_dim; ++d) {
      p.bn.gain(d) = gain_dist(rng);
      p.bn.bias(d) = 0.1 * normal(rng);
    }
    planted.layers.push_back(std::move(p));
  }
  planted.encoder = EncoderParams<double>::zeros(spec.latent_dim, spec.embedding_dim, spec.subjects);
  planted.encoder.shared_weight = gaussian(spec.latent_dim, spec.embedding_dim, 1.0 / std::sqrt(double(spec.latent_dim)));
  planted.encoder.shared_bias = gaussian(spec.embedding_dim, 1, 0.1);
  for (auto& w : planted.encoder.subject_weight)
    w = gaussian(spec.latent_dim, spec.embedding_dim, spec.subject_scale / std::sqrt(double(spec.latent_dim)));
  {
    Eigen::HouseholderQR<Matrix<double>> qr(gaussian(spec.activity_dim, spec.embedding_dim, 1.0));
    planted.pca.basis = qr.householderQ() * Matrix<double>::Identity(spec.activity_dim, spec.embedding_dim);
    canonicalize_signs(planted.pca.basis);
    planted.pca.center = gaussian(spec.activity_dim, 1, 1.0);
    planted.pca.explained_variance = Vector<double>::Ones(spec.embedding_dim);
    planted.pca.rank = spec.embedding_dim;
  }

  Dataset d;
  auto& m = d.manifest;
  m.num_samples = spec.samples;
  m.num_subjects = spec.subjects;
  m.layer_shapes = spec.layer_shapes;
  m.activity_dim = spec.activity_dim;
  for (Index n = 0; n < spec.samples; ++n) {
    m.subject_of_sample.push_back(static_cast<int>(n % spec.subjects));
    m.sample_keys.push_back(static_cast<std::uint64_t>(n));
  }

  // Features: sample-specific factors mixed through fixed rank-one
  // position x channel patterns, plus isotropic noise.
  const double factor_scale = 1.0 / std::sqrt(double(std::max<Index>(spec.feature_rank, 1)));
  std::vector<std::pair<Matrix<double>, Matrix<double>>> patterns;
  for (const auto& shape : spec.layer_shapes)
    patterns.emplace_back(gaussian(spec.feature_rank, shape.positions(), 1.0),
                          gaussian(spec.feature_rank, shape.channels, factor_scale));
  for (std::size_t l = 0; l < spec.layer_shapes.size(); ++l)
    d.features.emplace_back(static_cast<std::size_t>(spec.samples * spec.layer_shapes[l].size()));
  for (Index n = 0; n < spec.samples; ++n) {
    const Matrix<double> factors = gaussian(1, spec.feature_rank, 1.0);
    for (std::size_t l = 0; l < spec.layer_shapes.size(); ++l) {
      const auto& shape = spec.layer_shapes[l];
      const auto& [pos, chan] = patterns[l];
      Matrix<double> x = pos.transpose() * factors.transpose().asDiagonal() * chan;
      x += gaussian(shape.positions(), shape.channels, spec.feature_noise);
      Eigen::Map<Matrix<float>>(d.features[l].data() + n * shape.size(), shape.positions(), shape.channels) =
          x.cast<float>();
    }
  }

  std::vector<Index> all(static_cast<std::size_t>(spec.samples));
  for (Index n = 0; n < spec.samples; ++n) all[static_cast<std::size_t>(n)] = n;

  // Running statistics are set to the exact feature statistics so the
  // planted batch norm standardizes each latent in eval mode.
  for (std::size_t l = 0; l < planted.layers.size(); ++l) {
    Matrix<double> z(spec.samples, spec.latent_dim);
    const Index chunk = 512;
    for (Index begin = 0; begin < spec.samples; begin += chunk) {
      const Index len = std::min(chunk, spec.samples - begin);
      const FeatureBatch<double> b = gather_features<double>(d, std::span<const Index>(all).subspan(begin, len));
      z.middleRows(begin, len) = project_layer_batch(b.layers[l], len, planted.layers[l]);
    }
    planted.layers[l].bn.running_mean = z.colwise().mean().transpose();
    planted.layers[l].bn.running_var = (z.rowwise() - z.colwise().mean()).array().square().colwise().mean().transpose();
  }

  // Stored checkpoints are float32; plant exactly what will be stored.
  planted = planted.cast<float>().cast<double>();

  const std::vector<SubjectId> subjects = gather_subjects(d, all);
  const Matrix<double> signal = predict_chunked<double>(
      planted, spec.samples,
      [&](Index begin, Index len) {
        return gather_features<double>(d, std::span<const Index>(all).subspan(static_cast<std::size_t>(begin),
                                                                             static_cast<std::size_t>(len)));
      },
      subjects);

  // Subject valid masks; at least one vertex stays valid per subject.
  if (spec.missing_fraction > 0.0) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(spec.subjects * spec.activity_dim), 1);
    std::bernoulli_distribution drop(spec.missing_fraction);
    for (Index s = 0; s < spec.subjects; ++s) {
      Index kept = spec.activity_dim;
      for (Index v = 0; v < spec.activity_dim; ++v)
        if (kept > 1 && drop(rng)) {
          mask[static_cast<std::size_t>(s * spec.activity_dim + v)] = 0;
          --kept;
        }
    }
    d.valid_mask = std::move(mask);
  }

  d.activity.resize(static_cast<std::size_t>(spec.samples * spec.activity_dim));
  for (Index n = 0; n < spec.samples; ++n) {
    const int s = m.subject_of_sample[static_cast<std::size_t>(n)];
    std::vector<float> raw;
    std::vector<std::uint8_t> valid(static_cast<std::size_t>(spec.activity_dim), 1);
    for (Index v = 0; v < spec.activity_dim; ++v) {
      const double noise = spec.noise > 0.0 ? spec.noise * normal(rng) : 0.0;
      if (d.vertex_valid(s, v)) raw.push_back(static_cast<float>(signal(n, v) + noise));
      else valid[static_cast<std::size_t>(v)] = 0;
    }
    const auto full = embed_activity<float>(raw, valid);
    std::copy(full.begin(), full.end(), d.activity.begin() + n * spec.activity_dim);
  }

  // Noise ceiling: fraction of each vertex's target variance that is signal.
  {
    std::vector<float> ceiling(static_cast<std::size_t>(spec.subjects * spec.activity_dim), 0.0f);
    for (Index s = 0; s < spec.subjects; ++s) {
      for (Index v = 0; v < spec.activity_dim; ++v) {
        if (!d.vertex_valid(static_cast<int>(s), v)) continue;
        double sum = 0.0, sum_sq = 0.0, count = 0.0;
        for (Index n = s; n < spec.samples; n += spec.subjects) {
          sum += signal(n, v);
          sum_sq += signal(n, v) * signal(n, v);
          count += 1.0;
        }
        const double var = count > 1.0 ? (sum_sq - sum * sum / count) / count : 0.0;
        const double total = var + spec.noise * spec.noise;
        ceiling[static_cast<std::size_t>(s * spec.activity_dim + v)] =
            total > 0.0 ? static_cast<float>(var / total) : 0.0f;
      }
    }
    d.noise_ceiling = std::move(ceiling);
  }

  for (Index r = 0; r < spec.num_rois; ++r) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(spec.activity_dim), 0);
    const Index begin = r * spec.activity_dim / spec.num_rois;
    const Index end = (r + 1) * spec.activity_dim / spec.num_rois;
    for (Index v = begin; v < end; ++v) mask[static_cast<std::size_t>(v)] = 1;
    d.roi_masks["roi" + std::to_string(r)] = std::move(mask);
  }

  if (!dir.empty()) {
    write_dataset(d, dir);
    save_checkpoint(planted, dir / "planted", json{{"synth", to_json(spec)}});
  }
  return {std::move(d), std::move(planted)};
}

}  // namespace msenc
