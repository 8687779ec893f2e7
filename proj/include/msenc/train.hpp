#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "msenc/dataset.hpp"
#include "msenc/metrics.hpp"
#include "msenc/model.hpp"
#include "msenc/optim.hpp"

namespace msenc {

struct MetricsRecord {
  std::int64_t step = 0;  // optimizer steps completed
  double lr = 0.0;
  double train_mse = 0.0;
  std::optional<double> val_mse;
  std::optional<double> val_median_r2;
};

inline json to_json(const MetricsRecord& r) {
  return {{"step", r.step},
          {"lr", r.lr},
          {"train_mse", r.train_mse},
          {"val_mse", r.val_mse ? json(*r.val_mse) : json(nullptr)},
          {"val_median_r2", r.val_median_r2 ? finite_or_null(*r.val_median_r2) : json(nullptr)}};
}

struct TrainOptions {
  int threads = 1;
  std::function<void(const MetricsRecord&)> on_metrics;
};

template <typename T>
struct TrainResult {
  HeadModel<T> best;  // highest validation median R^2 seen at an eval point
  HeadModel<T> last;
  std::int64_t best_step = 0;
  std::optional<double> best_val_r2;
  std::vector<MetricsRecord> log;
};

struct SplitEvaluation {
  double mse = 0.0;
  R2Report report;
};

// Eval-mode MSE and R^2 report over one set of samples.
template <typename T>
SplitEvaluation evaluate_samples(HeadModel<T>& model, const Dataset& d, std::span<const Index> samples,
                                 LossMask loss_mask, bool group_routing = false, int threads = 1,
                                 const EvaluateOptions& eval_opt = {}) {
  std::vector<SubjectId> routing = gather_subjects(d, samples);
  std::vector<int> subject_of_row;
  for (auto s : routing) subject_of_row.push_back(s.index());
  if (group_routing) std::fill(routing.begin(), routing.end(), SubjectId::group());
  const Matrix<T> pred = predict_chunked<T>(
      model, static_cast<Index>(samples.size()),
      [&](Index begin, Index len) {
        return gather_features<T>(d, samples.subspan(static_cast<std::size_t>(begin), static_cast<std::size_t>(len)));
      },
      routing, threads);
  const Matrix<T> target = gather_targets<T>(d, samples);
  SplitEvaluation out;
  if (loss_mask == LossMask::SubjectValid) {
    const Matrix<T> mask = gather_valid_mask<T>(d, samples);
    out.mse = mse_loss(pred, target, &mask).loss;
  } else {
    out.mse = mse_loss(pred, target).loss;
  }
  out.report = evaluate(pred, target, std::span<const int>(subject_of_row), d.num_subjects(), eval_opt);
  return out;
}

// Cycles through the training indices in shuffled epochs. A leftover partial
// batch is used unless it would hold a single sample, which batch norm cannot
// normalize; that sample is carried into the next epoch's shuffle instead.
class EpochSampler {
 public:
  EpochSampler(std::vector<Index> pool, Index batch_size, std::uint64_t seed)
      : pool_(std::move(pool)), batch_size_(batch_size), rng_(seed) {
    require(pool_.size() >= 2, ErrorKind::InvalidArgument, "training split needs at least 2 samples");
    reshuffle();
  }

  std::vector<Index> next() {
    const auto remaining = static_cast<Index>(pool_.size()) - cursor_;
    if (remaining < 2) reshuffle();
    const Index take = std::min<Index>(batch_size_, static_cast<Index>(pool_.size()) - cursor_);
    std::vector<Index> batch(pool_.begin() + cursor_, pool_.begin() + cursor_ + take);
    cursor_ += take;
    return batch;
  }

 private:
  void reshuffle() {
    std::shuffle(pool_.begin(), pool_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<Index> pool_;
  Index batch_size_;
  Index cursor_ = 0;
  Rng rng_;
};

// Minibatch AdamW training of the head with the PCA embedding frozen. Logs
// every eval_interval steps and at the final step.
template <typename T>
TrainResult<T> train(const TrainConfig& cfg, HeadModel<T> model, const Dataset& d, const SplitAssignment& split,
                     const TrainOptions& opt = {}) {
  cfg.validate();
  require(model.config.activity_dim == d.activity_dim(), ErrorKind::ShapeMismatch,
          "model activity dimension differs from the dataset");
  require(model.config.num_subjects == d.num_subjects(), ErrorKind::ShapeMismatch,
          "model subject count differs from the dataset");
  require(model.config.layer_shapes == d.manifest.layer_shapes, ErrorKind::ShapeMismatch,
          "model layer shapes differ from the dataset");
  require(cfg.loss_mask == LossMask::None || d.valid_mask.has_value(), ErrorKind::EmptyMask,
          "loss_mask=subject_valid but the dataset has no subject_valid_mask");

  const std::vector<Index> train_idx = split.indices(Split::Train);
  const std::vector<Index> val_idx = split.indices(Split::Val);
  EpochSampler sampler(train_idx, cfg.batch_size, cfg.seed);
  Rng dropout_rng(detail::splitmix64(cfg.seed ^ 0x5eedf00dULL));

  TrainResult<T> result;
  OptimizerState state;
  const AdamWSettings adamw = adamw_settings(cfg);
  double loss_sum = 0.0;
  std::int64_t loss_count = 0;

  for (std::int64_t step = 0; step < cfg.total_steps; ++step) {
    const std::vector<Index> batch_idx = sampler.next();
    FeatureBatch<T> batch = gather_features<T>(d, batch_idx);
    const Matrix<T> target = gather_targets<T>(d, batch_idx);
    const std::vector<SubjectId> subjects = gather_subjects(d, batch_idx);

    ForwardOptions fo;
    fo.mode = Mode::Train;
    fo.dropout_rate = cfg.feature_dropout;
    fo.rng = &dropout_rng;
    fo.threads = opt.threads;
    ForwardCache<T> cache;
    const Matrix<T> pred = forward(model, std::move(batch), subjects, fo, &cache);
    LossResult<T> loss;
    if (cfg.loss_mask == LossMask::SubjectValid) {
      const Matrix<T> mask = gather_valid_mask<T>(d, batch_idx);
      loss = mse_loss(pred, target, &mask);
    } else {
      loss = mse_loss(pred, target);
    }
    require(std::isfinite(loss.loss), ErrorKind::NonFiniteLoss, "loss is not finite at step " + std::to_string(step));

    HeadGradients<T> grads = backward(model, cache, loss.grad, opt.threads);
    const double lr = lr_at(step, cfg);
    const auto params = trainable_arrays(model, cfg.decay_norm_params);
    const auto grad_arrays = grads.arrays();
    adamw_step<T>(params, grad_arrays, state, lr, adamw);
    ++model.generation;

    loss_sum += loss.loss;
    ++loss_count;
    const bool last = step + 1 == cfg.total_steps;
    if ((step + 1) % cfg.eval_interval != 0 && !last) continue;

    MetricsRecord rec;
    rec.step = step + 1;
    rec.lr = lr;
    rec.train_mse = loss_sum / double(loss_count);
    loss_sum = 0.0;
    loss_count = 0;
    if (!val_idx.empty()) {
      const SplitEvaluation ev = evaluate_samples(model, d, val_idx, cfg.loss_mask, false, opt.threads);
      rec.val_mse = ev.mse;
      rec.val_median_r2 = ev.report.group_median;
      const bool better = std::isfinite(ev.report.group_median) &&
                          (!result.best_val_r2 || ev.report.group_median > *result.best_val_r2);
      if (better) {
        result.best_val_r2 = ev.report.group_median;
        result.best = model;
        result.best_step = rec.step;
      }
    }
    result.log.push_back(rec);
    if (opt.on_metrics) opt.on_metrics(rec);
  }
  if (!result.best_val_r2) {
    result.best = model;
    result.best_step = cfg.total_steps;
  }
  result.last = std::move(model);
  return result;
}

}  // namespace msenc
