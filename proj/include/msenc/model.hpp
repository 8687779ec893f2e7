#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "msenc/encoder.hpp"
#include "msenc/io.hpp"
#include "msenc/pca.hpp"
#include "msenc/projection.hpp"

namespace msenc {

struct ModelConfig {
  std::vector<LayerShape> layer_shapes;
  Index latent_dim = 1024;     // D
  Index embedding_dim = 2048;  // K
  Index activity_dim = 0;      // V
  Index num_subjects = 8;      // S

  void validate() const {
    require(!layer_shapes.empty(), ErrorKind::InvalidArgument, "model needs at least one layer");
    require(latent_dim >= 1 && embedding_dim >= 1 && activity_dim >= 1 && num_subjects >= 1,
            ErrorKind::InvalidArgument, "model dimensions must be positive");
  }
  bool operator==(const ModelConfig&) const = default;
};

inline json to_json(const ModelConfig& c) {
  json shapes = json::array();
  for (const auto& s : c.layer_shapes) shapes.push_back({s.height, s.width, s.channels});
  return {{"layer_shapes", shapes},
          {"latent_dim", c.latent_dim},
          {"embedding_dim", c.embedding_dim},
          {"activity_dim", c.activity_dim},
          {"num_subjects", c.num_subjects}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  for (const auto& s : j.at("layer_shapes")) c.layer_shapes.push_back({s[0].get<Index>(), s[1].get<Index>(), s[2].get<Index>()});
  c.latent_dim = j.at("latent_dim").get<Index>();
  c.embedding_dim = j.at("embedding_dim").get<Index>();
  c.activity_dim = j.at("activity_dim").get<Index>();
  c.num_subjects = j.at("num_subjects").get<Index>();
  return c;
}

template <typename T>
struct HeadModel {
  ModelConfig config;
  std::vector<LayerProjection<T>> layers;
  EncoderParams<T> encoder;
  PcaEmbedding<T> pca;
  // Incremented whenever trainable parameters change; forward caches from an
  // older generation are rejected by backward().
  std::uint64_t generation = 0;

  Index num_layers() const { return static_cast<Index>(layers.size()); }

  template <typename U>
  HeadModel<U> cast() const {
    HeadModel<U> out;
    out.config = config;
    for (const auto& l : layers) {
      LayerProjection<U> p;
      p.shape = l.shape;
      p.channel_filter = l.channel_filter.template cast<U>();
      p.spatial_map = l.spatial_map.template cast<U>();
      p.bn.gain = l.bn.gain.template cast<U>();
      p.bn.bias = l.bn.bias.template cast<U>();
      p.bn.running_mean = l.bn.running_mean.template cast<U>();
      p.bn.running_var = l.bn.running_var.template cast<U>();
      p.bn.momentum = U(l.bn.momentum);
      p.bn.eps = U(l.bn.eps);
      out.layers.push_back(std::move(p));
    }
    out.encoder.shared_weight = encoder.shared_weight.template cast<U>();
    out.encoder.shared_bias = encoder.shared_bias.template cast<U>();
    for (const auto& w : encoder.subject_weight) out.encoder.subject_weight.push_back(w.template cast<U>());
    out.pca.basis = pca.basis.template cast<U>();
    out.pca.center = pca.center.template cast<U>();
    out.pca.explained_variance = pca.explained_variance.template cast<U>();
    out.pca.rank = pca.rank;
    out.pca.frozen = pca.frozen;
    return out;
  }
};

// A view of one trainable array. `decay` marks arrays subject to weight decay.
template <typename T>
struct ParamView {
  std::string name;
  std::span<T> values;
  bool decay = true;
};

template <typename T>
std::span<T> as_span(Matrix<T>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
template <typename T>
std::span<T> as_span(Vector<T>& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

// Trainable arrays in a fixed order. The PCA embedding is frozen and never
// listed.
template <typename T>
std::vector<ParamView<T>> trainable_arrays(HeadModel<T>& m, bool decay_norm_params = false) {
  std::vector<ParamView<T>> out;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    auto& p = m.layers[l];
    out.push_back({prefix + "channel_filter", as_span(p.channel_filter), true});
    out.push_back({prefix + "spatial_map", as_span(p.spatial_map), true});
    out.push_back({prefix + "bn_gain", as_span(p.bn.gain), decay_norm_params});
    out.push_back({prefix + "bn_bias", as_span(p.bn.bias), decay_norm_params});
  }
  out.push_back({"shared_weight", as_span(m.encoder.shared_weight), true});
  out.push_back({"shared_bias", as_span(m.encoder.shared_bias), false});
  for (std::size_t s = 0; s < m.encoder.subject_weight.size(); ++s)
    out.push_back({"subject_weight." + std::to_string(s), as_span(m.encoder.subject_weight[s]), true});
  return out;
}

template <typename T>
struct HeadGradients {
  std::vector<LayerProjectionGrad<T>> layers;
  Matrix<T> shared_weight;
  Vector<T> shared_bias;
  std::vector<Matrix<T>> subject_weight;

  // Same order as trainable_arrays().
  std::vector<std::span<T>> arrays() {
    std::vector<std::span<T>> out;
    for (auto& g : layers) {
      out.push_back(as_span(g.channel_filter));
      out.push_back(as_span(g.spatial_map));
      out.push_back(as_span(g.bn_gain));
      out.push_back(as_span(g.bn_bias));
    }
    out.push_back(as_span(shared_weight));
    out.push_back(as_span(shared_bias));
    for (auto& w : subject_weight) out.push_back(as_span(w));
    return out;
  }
};

// Random initialization: channel filters and the shared map draw from
// N(0, 1/fan_in), spatial maps start as mean pooling, subject maps start at
// zero, and batch norm starts as the identity.
template <typename T>
HeadModel<T> init_model(const ModelConfig& config, PcaEmbedding<T> pca, Rng& rng) {
  config.validate();
  require(pca.activity_dim() == config.activity_dim && pca.embedding_dim() == config.embedding_dim,
          ErrorKind::ShapeMismatch, "PCA embedding shape does not match model config");
  HeadModel<T> m;
  m.config = config;
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill_normal = [&](Matrix<T>& w, double stddev) {
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = T(normal(rng) * stddev);
  };
  for (const auto& shape : config.layer_shapes) {
    auto p = make_layer_projection<T>(shape, config.latent_dim);
    fill_normal(p.channel_filter, 1.0 / std::sqrt(double(shape.channels)));
    p.spatial_map.setConstant(T(1.0 / double(shape.positions())));
    m.layers.push_back(std::move(p));
  }
  m.encoder = EncoderParams<T>::zeros(config.latent_dim, config.embedding_dim, config.num_subjects);
  fill_normal(m.encoder.shared_weight, 1.0 / std::sqrt(double(config.latent_dim)));
  m.pca = std::move(pca);
  return m;
}

template <typename T>
struct ForwardCache {
  ProjectionCache<T> projection;
  Matrix<T> latent;  // N x D, averaged normalized latents
  std::vector<SubjectId> subjects;
  Mode mode = Mode::Eval;
  std::uint64_t generation = 0;
  bool valid = false;
};

struct ForwardOptions {
  Mode mode = Mode::Eval;
  double dropout_rate = 0.0;
  Rng* rng = nullptr;  // required when mode is Train and dropout_rate > 0
  int threads = 1;
};

// Full head: dropout -> factorized projection -> shared + subject encoder ->
// PCA reconstruction. Returns N x V predictions.
template <typename T>
Matrix<T> forward(HeadModel<T>& model, FeatureBatch<T> batch, std::span<const SubjectId> subjects,
                  const ForwardOptions& opt, ForwardCache<T>* cache = nullptr) {
  require(static_cast<Index>(subjects.size()) == batch.samples, ErrorKind::ShapeMismatch,
          "one subject id per sample is required");
  if (opt.mode == Mode::Train && opt.dropout_rate > 0.0) {
    require(opt.rng != nullptr, ErrorKind::InvalidArgument, "train-mode dropout needs a random generator");
    feature_dropout(batch, opt.dropout_rate, opt.mode, *opt.rng);
  }
  ProjectionCache<T>* pc = cache ? &cache->projection : nullptr;
  Matrix<T> latent = project_stack_batch(batch, model.layers, opt.mode, pc, opt.threads);
  const Matrix<T> embedding = encode_batch(latent, subjects, model.encoder);
  Matrix<T> pred = reconstruct_batch(embedding, model.pca);
  if (cache) {
    cache->latent = std::move(latent);
    cache->subjects.assign(subjects.begin(), subjects.end());
    cache->mode = opt.mode;
    cache->generation = model.generation;
    cache->valid = true;
  }
  return pred;
}

// Eval-mode predictions in fixed-size chunks so memory stays bounded.
template <typename T, typename GatherFn>
Matrix<T> predict_chunked(HeadModel<T>& model, Index total, GatherFn gather, std::span<const SubjectId> subjects,
                          int threads = 1, Index chunk = 512) {
  Matrix<T> out(total, model.config.activity_dim);
  for (Index begin = 0; begin < total; begin += chunk) {
    const Index len = std::min(chunk, total - begin);
    FeatureBatch<T> batch = gather(begin, len);
    ForwardOptions opt;
    opt.threads = threads;
    out.middleRows(begin, len) =
        forward(model, std::move(batch), subjects.subspan(static_cast<std::size_t>(begin), static_cast<std::size_t>(len)), opt);
  }
  return out;
}

template <typename T>
struct LossResult {
  double loss = 0.0;
  Matrix<T> grad;  // d loss / d pred
};

// Mean squared error over unmasked entries; mask entries are 0 or 1.
template <typename T>
LossResult<T> mse_loss(const Matrix<T>& pred, const Matrix<T>& target, const Matrix<T>* mask = nullptr) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), ErrorKind::ShapeMismatch,
          "prediction and target shapes differ");
  LossResult<T> r;
  Matrix<T> diff = pred - target;
  double count = static_cast<double>(diff.size());
  if (mask) {
    require(mask->rows() == pred.rows() && mask->cols() == pred.cols(), ErrorKind::ShapeMismatch,
            "mask shape differs from prediction");
    diff = diff.cwiseProduct(*mask);
    count = static_cast<double>(mask->sum());
    require(count > 0.0, ErrorKind::EmptyMask, "loss mask selects no entries");
  }
  r.loss = static_cast<double>(diff.squaredNorm()) / count;
  r.grad = diff * T(2.0 / count);
  return r;
}

// Analytic gradients of the loss for the cached forward pass.
template <typename T>
HeadGradients<T> backward(const HeadModel<T>& model, const ForwardCache<T>& cache, const Matrix<T>& dpred,
                          int threads = 1) {
  require(cache.valid, ErrorKind::StaleCache, "backward called without a forward cache");
  require(cache.generation == model.generation, ErrorKind::StaleCache,
          "parameters changed since forward (generation " + std::to_string(cache.generation) + " vs " +
              std::to_string(model.generation) + ")");
  require(dpred.rows() == cache.latent.rows() && dpred.cols() == model.config.activity_dim, ErrorKind::ShapeMismatch,
          "prediction gradient shape mismatch");
  const Matrix<T> dembedding = dpred * model.pca.basis;
  EncoderGrad<T> eg = encode_backward(dembedding, cache.latent, std::span<const SubjectId>(cache.subjects), model.encoder);
  ProjectionBackward<T> pg = project_stack_backward(eg.latent, model.layers, cache.projection, false, threads);
  HeadGradients<T> g;
  g.layers = std::move(pg.layers);
  g.shared_weight = std::move(eg.shared_weight);
  g.shared_bias = std::move(eg.shared_bias);
  g.subject_weight = std::move(eg.subject_weight);
  return g;
}

// Modelling choices that the checkpoint records alongside the arrays.
inline json decision_metadata(double bn_momentum, double bn_eps, bool decay_norm_params) {
  return {{"projection_bias", false},
          {"batchnorm_affine", true},
          {"batchnorm_momentum", bn_momentum},
          {"batchnorm_eps", bn_eps},
          {"batchnorm_running_var", "unbiased"},
          {"layer_aggregation", "mean"},
          {"subject_bias", false},
          {"shared_bias", true},
          {"pca_pooling", "raw activity pooled across subjects"},
          {"weight_decay_on_norm_params", decay_norm_params}};
}

template <typename T>
void put_pca(ParamsContainer& c, const PcaEmbedding<T>& e) {
  const Matrix<float> basis = e.basis.template cast<float>();
  const Vector<float> center = e.center.template cast<float>();
  const Vector<float> var = e.explained_variance.template cast<float>();
  c.put<float>("pca_basis", {e.activity_dim(), e.embedding_dim()}, {basis.data(), static_cast<std::size_t>(basis.size())});
  c.put<float>("pca_center", {e.activity_dim()}, {center.data(), static_cast<std::size_t>(center.size())});
  c.put<float>("pca_explained_variance", {e.embedding_dim()}, {var.data(), static_cast<std::size_t>(var.size())});
}

template <typename T>
PcaEmbedding<T> get_pca(const ParamsContainer& c) {
  require(c.contains("pca_basis"), ErrorKind::MissingEmbedding, "container has no pca_basis array");
  const auto& b = c.get("pca_basis");
  require(b.shape.size() == 2, ErrorKind::ShapeMismatch, "pca_basis must be 2-D");
  const Index v = b.shape[0];
  const Index k = b.shape[1];
  PcaEmbedding<T> e;
  e.basis = Eigen::Map<const Matrix<float>>(b.values.data(), v, k).template cast<T>();
  e.center = Eigen::Map<const Vector<float>>(c.get("pca_center", {v}).values.data(), v).template cast<T>();
  e.explained_variance =
      Eigen::Map<const Vector<float>>(c.get("pca_explained_variance", {k}).values.data(), k).template cast<T>();
  e.rank = c.metadata().value("pca_rank", k);
  e.frozen = true;
  return e;
}

template <typename T>
void save_pca(const PcaEmbedding<T>& e, const fs::path& dir, json extra = json::object()) {
  ParamsContainer c;
  put_pca(c, e);
  c.metadata() = std::move(extra);
  c.metadata()["kind"] = "pca_embedding";
  c.metadata()["pca_rank"] = e.rank;
  c.save(dir);
}

template <typename T>
PcaEmbedding<T> load_pca(const fs::path& dir) {
  require(fs::exists(dir / "params.json"), ErrorKind::MissingEmbedding, "no PCA embedding at " + dir.string());
  return get_pca<T>(ParamsContainer::load(dir));
}

namespace detail {
template <typename M>
std::span<const float> float_span(const M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
}  // namespace detail

template <typename T>
ParamsContainer to_container(const HeadModel<T>& m, bool decay_norm_params = false) {
  ParamsContainer c;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& p = m.layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    const Index d = p.latent_dim();
    const Matrix<float> filter = p.channel_filter.template cast<float>();
    const Matrix<float> spatial = p.spatial_map.template cast<float>();
    c.put<float>(prefix + "channel_filter", {p.shape.channels, d}, detail::float_span(filter));
    c.put<float>(prefix + "spatial_map", {p.shape.positions(), d}, detail::float_span(spatial));
    const std::pair<const char*, const Vector<T>*> vecs[] = {{"bn_gain", &p.bn.gain},
                                                            {"bn_bias", &p.bn.bias},
                                                            {"bn_running_mean", &p.bn.running_mean},
                                                            {"bn_running_var", &p.bn.running_var}};
    for (const auto& [name, vec] : vecs) {
      const Vector<float> f = vec->template cast<float>();
      c.put<float>(prefix + name, {d}, detail::float_span(f));
    }
  }
  const Index d = m.config.latent_dim;
  const Index k = m.config.embedding_dim;
  const Index s = m.config.num_subjects;
  const Matrix<float> shared = m.encoder.shared_weight.template cast<float>();
  const Vector<float> bias = m.encoder.shared_bias.template cast<float>();
  c.put<float>("shared_weight", {d, k}, detail::float_span(shared));
  c.put<float>("shared_bias", {k}, detail::float_span(bias));
  std::vector<float> subject;
  subject.reserve(static_cast<std::size_t>(s * d * k));
  for (const auto& w : m.encoder.subject_weight) {
    const Matrix<float> f = w.template cast<float>();
    subject.insert(subject.end(), f.data(), f.data() + f.size());
  }
  c.put<float>("subject_weight", {s, d, k}, std::span<const float>(subject));
  put_pca(c, m.pca);
  c.metadata()["kind"] = "head_checkpoint";
  c.metadata()["model"] = to_json(m.config);
  c.metadata()["pca_rank"] = m.pca.rank;
  const double momentum = m.layers.empty() ? 0.1 : double(m.layers.front().bn.momentum);
  const double eps = m.layers.empty() ? 1e-5 : double(m.layers.front().bn.eps);
  c.metadata()["decisions"] = decision_metadata(momentum, eps, decay_norm_params);
  return c;
}

template <typename T>
HeadModel<T> from_container(const ParamsContainer& c) {
  require(c.metadata().contains("model"), ErrorKind::VersionUnsupported, "container is not a head checkpoint");
  HeadModel<T> m;
  m.config = model_config_from_json(c.metadata().at("model"));
  const Index d = m.config.latent_dim;
  const Index k = m.config.embedding_dim;
  const Index s = m.config.num_subjects;
  const json decisions = c.metadata().value("decisions", json::object());
  for (std::size_t l = 0; l < m.config.layer_shapes.size(); ++l) {
    const auto& shape = m.config.layer_shapes[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    LayerProjection<T> p;
    p.shape = shape;
    p.channel_filter = Eigen::Map<const Matrix<float>>(
                           c.get(prefix + "channel_filter", {shape.channels, d}).values.data(), shape.channels, d)
                           .template cast<T>();
    p.spatial_map = Eigen::Map<const Matrix<float>>(
                        c.get(prefix + "spatial_map", {shape.positions(), d}).values.data(), shape.positions(), d)
                        .template cast<T>();
    auto vec = [&](const char* name) {
      return Vector<T>(Eigen::Map<const Vector<float>>(c.get(prefix + name, {d}).values.data(), d).template cast<T>());
    };
    p.bn.gain = vec("bn_gain");
    p.bn.bias = vec("bn_bias");
    p.bn.running_mean = vec("bn_running_mean");
    p.bn.running_var = vec("bn_running_var");
    p.bn.momentum = T(decisions.value("batchnorm_momentum", 0.1));
    p.bn.eps = T(decisions.value("batchnorm_eps", 1e-5));
    m.layers.push_back(std::move(p));
  }
  m.encoder.shared_weight =
      Eigen::Map<const Matrix<float>>(c.get("shared_weight", {d, k}).values.data(), d, k).template cast<T>();
  m.encoder.shared_bias = Eigen::Map<const Vector<float>>(c.get("shared_bias", {k}).values.data(), k).template cast<T>();
  const auto& subject = c.get("subject_weight", {s, d, k}).values;
  for (Index i = 0; i < s; ++i)
    m.encoder.subject_weight.push_back(
        Eigen::Map<const Matrix<float>>(subject.data() + i * d * k, d, k).template cast<T>());
  m.pca = get_pca<T>(c);
  require(m.pca.activity_dim() == m.config.activity_dim && m.pca.embedding_dim() == k, ErrorKind::ShapeMismatch,
          "PCA arrays disagree with model config");
  return m;
}

// Writes the model with `extra` (config echo, step, metrics) under metadata.
template <typename T>
void save_checkpoint(const HeadModel<T>& m, const fs::path& dir, const json& extra = json::object(),
                     bool decay_norm_params = false) {
  ParamsContainer c = to_container(m, decay_norm_params);
  c.metadata()["extra"] = extra;
  c.save(dir);
}

template <typename T>
HeadModel<T> load_checkpoint(const fs::path& dir, json* extra = nullptr) {
  const ParamsContainer c = ParamsContainer::load(dir);
  if (extra) *extra = c.metadata().value("extra", json::object());
  return from_container<T>(c);
}

}  // namespace msenc
