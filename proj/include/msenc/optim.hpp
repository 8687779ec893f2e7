#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "msenc/io.hpp"
#include "msenc/model.hpp"

namespace msenc {

enum class LossMask { None, SubjectValid };

struct TrainConfig {
  std::int64_t batch_size = 512;
  double peak_lr = 6e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.8;
  double feature_dropout = 0.9;
  std::int64_t total_steps = 5000;
  std::int64_t warmup_steps = 250;
  double min_lr = 3e-5;
  std::uint64_t seed = 0;
  std::int64_t eval_interval = 250;
  LossMask loss_mask = LossMask::None;
  bool decay_norm_params = false;

  void validate() const {
    require(batch_size >= 2, ErrorKind::InvalidArgument, "batch_size must be >= 2");
    require(peak_lr >= 0.0 && min_lr >= 0.0 && min_lr <= peak_lr, ErrorKind::InvalidArgument,
            "learning rates must satisfy 0 <= min_lr <= peak_lr");
    require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, ErrorKind::InvalidArgument,
            "betas must lie in (0, 1)");
    require(weight_decay >= 0.0, ErrorKind::InvalidArgument, "weight_decay must be >= 0");
    require(feature_dropout >= 0.0 && feature_dropout < 1.0, ErrorKind::InvalidArgument,
            "feature_dropout must lie in [0, 1)");
    require(total_steps >= 1 && warmup_steps >= 0 && warmup_steps <= total_steps, ErrorKind::InvalidArgument,
            "need 0 <= warmup_steps <= total_steps and total_steps >= 1");
    require(eval_interval >= 1, ErrorKind::InvalidArgument, "eval_interval must be >= 1");
  }
};

inline json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"peak_lr", c.peak_lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"feature_dropout", c.feature_dropout},
          {"total_steps", c.total_steps},
          {"warmup_steps", c.warmup_steps},
          {"min_lr", c.min_lr},
          {"seed", c.seed},
          {"eval_interval", c.eval_interval},
          {"loss_mask", c.loss_mask == LossMask::None ? "none" : "subject_valid"},
          {"decay_norm_params", c.decay_norm_params}};
}

// Overlays any keys present in `j` onto `c`.
inline void apply_json(TrainConfig& c, const json& j) {
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  take("batch_size", c.batch_size);
  take("peak_lr", c.peak_lr);
  take("beta1", c.beta1);
  take("beta2", c.beta2);
  take("eps", c.eps);
  take("weight_decay", c.weight_decay);
  take("feature_dropout", c.feature_dropout);
  take("total_steps", c.total_steps);
  take("warmup_steps", c.warmup_steps);
  take("min_lr", c.min_lr);
  take("seed", c.seed);
  take("eval_interval", c.eval_interval);
  take("decay_norm_params", c.decay_norm_params);
  if (j.contains("loss_mask")) {
    const auto v = j.at("loss_mask").get<std::string>();
    require(v == "none" || v == "subject_valid", ErrorKind::InvalidArgument, "loss_mask must be none|subject_valid");
    c.loss_mask = v == "none" ? LossMask::None : LossMask::SubjectValid;
  }
}

namespace presets {

// Head-only first phase.
inline TrainConfig phase1() {
  TrainConfig c;
  c.batch_size = 512;
  c.peak_lr = 6e-4;
  c.beta1 = 0.9;
  c.beta2 = 0.99;
  c.weight_decay = 0.8;
  c.feature_dropout = 0.9;
  c.total_steps = 5000;
  c.warmup_steps = 250;
  c.min_lr = 3e-5;
  return c;
}

// Second phase values, applied to the head only (no trunk here).
inline TrainConfig phase2() {
  TrainConfig c;
  c.batch_size = 192;
  c.peak_lr = 1e-5;
  c.beta1 = 0.9;
  c.beta2 = 0.99;
  c.weight_decay = 0.8;
  c.feature_dropout = 0.9;
  c.total_steps = 2000;
  c.warmup_steps = 100;
  c.min_lr = 0.0;
  c.eval_interval = 100;
  return c;
}

// Dropout rate that keeps rate / (1 - rate) / elements, the relative dropout
// noise on each projected latent, equal to `rate` at `reference_elements`.
inline double scale_dropout(double rate, double reference_elements, double elements) {
  require(rate >= 0.0 && rate < 1.0 && reference_elements > 0.0 && elements > 0.0, ErrorKind::InvalidArgument,
          "scale_dropout needs rate in [0, 1) and positive element counts");
  const double odds = rate / (1.0 - rate) * elements / reference_elements;
  return odds / (1.0 + odds);
}

// Elements per layer (P * C) of the base architecture.
inline constexpr double kBaseLayerElements = 16.0 * 16.0 * 768.0;

// Desk-scale phase 1: 2000 steps, warmup kept at 5% of the schedule, and
// feature dropout rescaled to the layer size of the data it will train on.
inline TrainConfig phase1_desk(double layer_elements = kBaseLayerElements) {
  TrainConfig c = phase1();
  c.batch_size = 256;
  c.total_steps = 2000;
  c.warmup_steps = 100;
  c.eval_interval = 100;
  c.feature_dropout = scale_dropout(c.feature_dropout, kBaseLayerElements, layer_elements);
  return c;
}

inline ModelConfig base_arch(Index activity_dim, Index subjects = 8) {
  ModelConfig m;
  m.layer_shapes.assign(6, LayerShape{16, 16, 768});
  m.latent_dim = 1024;
  m.embedding_dim = 2048;
  m.activity_dim = activity_dim;
  m.num_subjects = subjects;
  return m;
}

inline TrainConfig by_name(const std::string& name, double layer_elements = kBaseLayerElements) {
  if (name == "phase1") return phase1();
  if (name == "phase2") return phase2();
  if (name == "phase1-desk") return phase1_desk(layer_elements);
  fail(ErrorKind::Usage, "unknown training preset '" + name + "' (phase1, phase2, phase1-desk)");
}

}  // namespace presets

// Linear warmup from 0 to peak_lr, then cosine decay that reaches min_lr on
// the last step.
inline double lr_at(std::int64_t step, const TrainConfig& c) {
  require(step >= 0 && step < c.total_steps, ErrorKind::StepOutOfRange,
          "step " + std::to_string(step) + " outside [0, " + std::to_string(c.total_steps) + ")");
  if (step < c.warmup_steps) return c.peak_lr * double(step) / double(c.warmup_steps);
  const std::int64_t decay_span = c.total_steps - 1 - c.warmup_steps;
  if (decay_span <= 0) return c.peak_lr;
  const double progress = double(step - c.warmup_steps) / double(decay_span);
  return c.min_lr + 0.5 * (c.peak_lr - c.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

// AdamW moment buffers, one pair per trainable array.
struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step = 0;
};

struct AdamWSettings {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

inline AdamWSettings adamw_settings(const TrainConfig& c) { return {c.beta1, c.beta2, c.eps, c.weight_decay}; }

// One decoupled-weight-decay Adam update over aligned parameter/gradient
// arrays. Gradients are checked before anything is modified.
template <typename T>
void adamw_step(std::span<const ParamView<T>> params, std::span<const std::span<T>> grads, OptimizerState& state,
                double lr, const AdamWSettings& s) {
  require(params.size() == grads.size(), ErrorKind::ShapeMismatch, "parameter and gradient lists differ in length");
  require(lr >= 0.0, ErrorKind::InvalidArgument, "learning rate must be >= 0");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i].values.size() == grads[i].size(), ErrorKind::ShapeMismatch,
            "gradient shape mismatch for " + params[i].name);
    for (T g : grads[i])
      require(std::isfinite(double(g)), ErrorKind::NonFiniteGradient, "non-finite gradient in " + params[i].name);
  }
  if (state.first_moment.size() != params.size()) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.values.size(), 0.0);
      state.second_moment.emplace_back(p.values.size(), 0.0);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(s.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(s.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const double decay = params[i].decay ? s.weight_decay : 0.0;
    auto values = params[i].values;
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = double(grads[i][j]);
      m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g;
      v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g * g;
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      const double p = double(values[j]);
      values[j] = T(p - lr * (m_hat / (std::sqrt(v_hat) + s.eps) + decay * p));
    }
  }
}

}  // namespace msenc
