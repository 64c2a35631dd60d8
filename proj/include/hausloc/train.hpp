#pragma once

#include <chrono>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "hausloc/core.hpp"
#include "hausloc/net.hpp"
#include "hausloc/parallel.hpp"
#include "hausloc/postprocess.hpp"
#include "hausloc/rng.hpp"
#include "hausloc/whd.hpp"

namespace hausloc {

template <typename Scalar>
struct TrainConfigT {
  Scalar learning_rate = Scalar(1e-4);
  int batch_size = 16;
  int epochs = 50;
  Scalar lambda_count = Scalar(1);
  std::uint64_t seed = 1;
  WhdParamsT<Scalar> whd_params;

  void validate() const {
    detail::require(learning_rate > Scalar(0), "TrainConfig: learning_rate must be positive");
    detail::require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    detail::require(epochs >= 1, "TrainConfig: epochs must be >= 1");
  }
};

using TrainConfig = TrainConfigT<double>;

/// Adam accumulators, one pair per model tensor.
template <typename Scalar>
struct AdamStateT {
  std::vector<Eigen::Array<Scalar, Eigen::Dynamic, 1>> first_moment;
  std::vector<Eigen::Array<Scalar, Eigen::Dynamic, 1>> second_moment;
  long step = 0;

  static AdamStateT zeros_for(const ModelParamsT<Scalar>& params) {
    AdamStateT st;
    for (const auto& t : params.tensors) {
      st.first_moment.emplace_back(Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(t.size()));
      st.second_moment.emplace_back(Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(t.size()));
    }
    return st;
  }
};

using AdamState = AdamStateT<double>;

/// One bias-corrected Adam update (beta1 = 0.9, beta2 = 0.999, eps = 1e-8)
/// applied to every tensor in place.
template <typename Scalar>
void adam_step(ModelParamsT<Scalar>& params, const ModelParamsT<Scalar>& grads,
               AdamStateT<Scalar>& state, Scalar lr) {
  constexpr Scalar beta1 = Scalar(0.9), beta2 = Scalar(0.999), eps = Scalar(1e-8);
  if (params.tensors.size() != grads.tensors.size() ||
      params.tensors.size() != state.first_moment.size())
    throw ShapeError("adam_step: tensor count mismatch");
  state.step += 1;
  const Scalar bc1 = Scalar(1) - std::pow(beta1, Scalar(state.step));
  const Scalar bc2 = Scalar(1) - std::pow(beta2, Scalar(state.step));
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    auto& theta = params.tensors[t].data;
    const auto& g = grads.tensors[t].data;
    if (theta.size() != g.size()) throw ShapeError("adam_step: tensor size mismatch");
    auto& m = state.first_moment[t];
    auto& v = state.second_moment[t];
    m = beta1 * m + (Scalar(1) - beta1) * g;
    v = beta2 * v + (Scalar(1) - beta2) * g.square();
    theta -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
  }
}

template <typename Scalar>
struct EpochRecordT {
  int epoch = 0;  // 1-based
  Scalar train_loss = 0;
  Scalar val_mahd = 0;
  double seconds = 0;
};

template <typename Scalar>
struct TrainHistoryT {
  std::vector<EpochRecordT<Scalar>> epochs;
};

using TrainHistory = TrainHistoryT<double>;

template <typename Scalar>
using ValidationFn =
    std::function<Scalar(const ModelParamsT<Scalar>&, const std::vector<LabeledSampleT<Scalar>>&)>;

/// Mean average Hausdorff distance between pipeline-extracted centers and
/// the ground truth over a dataset; images where either side is empty
/// contribute d_max (the domain diagonal unless pinned in whd_params).
template <typename Scalar>
Scalar validation_mahd(const ModelParamsT<Scalar>& params,
                       const std::vector<LabeledSampleT<Scalar>>& val_set,
                       const WhdParamsT<Scalar>& whd_params) {
  detail::require(!val_set.empty(), "validation_mahd: empty validation set");
  std::vector<Scalar> per_image(val_set.size());
  parallel_for(val_set.size(), [&](std::size_t i) {
    const auto& sample = val_set[i];
    const auto out = forward(params, sample.image);
    const auto centers =
        extract_centers(out.prob_map, std::optional<Scalar>(out.count_estimate));
    const auto ahd = average_hausdorff(centers, sample.centers);
    per_image[i] = ahd ? *ahd : whd_params.effective_d_max(sample.image.domain());
  });
  Scalar acc = 0;
  for (Scalar v : per_image) acc += v;
  return acc / Scalar(val_set.size());
}

/// Shuffled mini-batch Adam over the training set. After every epoch the
/// model is scored on the validation set (full inference pipeline by
/// default, injectable for tests); the snapshot with the lowest validation
/// score is returned, ties resolved to the earliest epoch. Shuffling uses
/// its own stream derived from config.seed, independent of init.
template <typename Scalar>
std::pair<ModelParamsT<Scalar>, TrainHistoryT<Scalar>> train(
    ModelParamsT<Scalar> params, const std::vector<LabeledSampleT<Scalar>>& train_set,
    const std::vector<LabeledSampleT<Scalar>>& val_set, const TrainConfigT<Scalar>& config,
    ValidationFn<Scalar> validate = {}) {
  config.validate();
  detail::require(!train_set.empty(), "train: empty training set");
  detail::require(!val_set.empty(), "train: empty validation set");
  if (!validate)
    validate = [&config](const ModelParamsT<Scalar>& p,
                         const std::vector<LabeledSampleT<Scalar>>& vs) {
      return validation_mahd(p, vs, config.whd_params);
    };

  Rng shuffle_rng(config.seed ^ 0x5bf03635d1d1c1a7ULL);  // shuffle stream salt
  AdamStateT<Scalar> opt = AdamStateT<Scalar>::zeros_for(params);
  TrainHistoryT<Scalar> history;
  ModelParamsT<Scalar> best_params = params;
  Scalar best_mahd = std::numeric_limits<Scalar>::infinity();

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<LabeledSampleT<Scalar>> batch;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = std::size_t(shuffle_rng.uniform_int(0, std::int64_t(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
    Scalar loss_acc = 0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + std::size_t(config.batch_size));
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) batch.push_back(train_set[order[i]]);
      auto [loss, grads] =
          loss_and_grad<Scalar>(params, batch, config.whd_params, config.lambda_count);
      adam_step(params, grads, opt, config.learning_rate);
      loss_acc += loss * Scalar(stop - start);
    }

    EpochRecordT<Scalar> rec;
    rec.epoch = epoch;
    rec.train_loss = loss_acc / Scalar(train_set.size());
    rec.val_mahd = validate(params, val_set);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);
    if (rec.val_mahd < best_mahd) {
      best_mahd = rec.val_mahd;
      best_params = params;
    }
  }
  return {std::move(best_params), std::move(history)};
}

/// Transfer-learning entry point: the source encoder is copied into the
/// fresh model, then the whole network trains (nothing frozen). Callers
/// normally pass a config with the reduced fine-tuning learning rate.
template <typename Scalar>
std::pair<ModelParamsT<Scalar>, TrainHistoryT<Scalar>> fine_tune(
    const ModelParamsT<Scalar>& pretrained, ModelParamsT<Scalar> fresh,
    const std::vector<LabeledSampleT<Scalar>>& train_set,
    const std::vector<LabeledSampleT<Scalar>>& val_set, const TrainConfigT<Scalar>& config,
    ValidationFn<Scalar> validate = {}) {
  return train(transfer_encoder(pretrained, std::move(fresh)), train_set, val_set, config,
               std::move(validate));
}

/// Default learning rates: 1e-4 from scratch, 1e-5 when fine-tuning.
template <typename Scalar = double>
TrainConfigT<Scalar> scratch_defaults() {
  TrainConfigT<Scalar> c;
  c.learning_rate = Scalar(1e-4);
  return c;
}

template <typename Scalar = double>
TrainConfigT<Scalar> finetune_defaults() {
  TrainConfigT<Scalar> c;
  c.learning_rate = Scalar(1e-5);
  return c;
}

}  // namespace hausloc
