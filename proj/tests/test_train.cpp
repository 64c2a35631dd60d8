#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hausloc/synthdata.hpp"
#include "hausloc/train.hpp"
#include "test_support.hpp"

using namespace hausloc;

namespace {

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.input_size = 16;
  cfg.encoder_blocks = 1;
  cfg.base_channels = 2;
  cfg.count_head_hidden = 4;
  return cfg;
}

std::vector<LabeledSampleT<double>> tiny_dataset(int n, std::uint64_t seed) {
  FieldConfig field;
  field.field_width = 256;
  field.field_height = 96;
  field.row_spacing = 26;
  field.in_row_spacing = 22;
  field.plant_radius_min = 3;
  field.plant_radius_max = 5;
  const auto [img, pts] = generate_field(field, seed);
  return random_crops(img, pts, {0, 0, 256, 96}, n, 24, 48, 16, seed + 1);
}

TrainConfig tiny_train_config(int epochs, std::uint64_t seed = 5) {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 8;
  cfg.epochs = epochs;
  cfg.seed = seed;
  return cfg;
}

bool params_equal(const ModelParamsT<double>& a, const ModelParamsT<double>& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i)
    if (!(a.tensors[i].data == b.tensors[i].data).all()) return false;
  return true;
}

}  // namespace

TEST_CASE("adam_step with zero gradients only advances the step counter") {
  auto params = init_params(tiny_config(), 3);
  const auto snapshot = params;
  auto grads = params.zeros_like();
  auto state = AdamState::zeros_for(params);
  adam_step(params, grads, state, 1e-3);
  CHECK(state.step == 1);
  CHECK(params_equal(params, snapshot));
  for (const auto& m : state.first_moment) CHECK((m == 0.0).all());
  for (const auto& v : state.second_moment) CHECK((v == 0.0).all());
}

TEST_CASE("adam_step matches a hand-rolled recurrence under constant gradient") {
  // Single scalar parameter, constant gradient g: recompute the
  // bias-corrected update sequence independently.
  auto params = init_params(tiny_config(), 3);
  for (auto& t : params.tensors) t.data.setZero();
  auto grads = params.zeros_like();
  const double g = 0.7;
  grads.tensors[0].data[0] = g;
  auto state = AdamState::zeros_for(params);

  double m = 0.0, v = 0.0, theta = 0.0;
  const double lr = 0.1;
  double prev = 0.0;
  for (int t = 1; t <= 3; ++t) {
    adam_step(params, grads, state, lr);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    theta -= lr * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(params.tensors[0].data[0] == doctest::Approx(theta).epsilon(1e-15));
    // Movement is monotone, opposite the gradient sign.
    CHECK(params.tensors[0].data[0] < prev);
    prev = params.tensors[0].data[0];
  }
  CHECK(state.step == 3);
}

TEST_CASE("adam_step with zero learning rate is the identity on parameters") {
  Rng rng(4);
  auto params = init_params(tiny_config(), 9);
  const auto snapshot = params;
  auto grads = params.zeros_like();
  for (auto& t : grads.tensors)
    for (Index i = 0; i < t.size(); ++i) t.data[i] = rng.uniform(-1, 1);
  auto state = AdamState::zeros_for(params);
  adam_step(params, grads, state, 0.0);
  CHECK(params_equal(params, snapshot));
}

TEST_CASE("adam_step rejects mismatched shapes") {
  auto params = init_params(tiny_config(), 3);
  auto grads = params.zeros_like();
  grads.tensors.pop_back();
  auto state = AdamState::zeros_for(params);
  CHECK_THROWS_AS(adam_step(params, grads, state, 1e-3), ShapeError);
}

TEST_CASE("train returns the epoch-1 weights when epochs is 1") {
  const auto data = tiny_dataset(12, 21);
  const std::vector<LabeledSampleT<double>> val(data.begin(), data.begin() + 4);
  const std::vector<LabeledSampleT<double>> tr(data.begin() + 4, data.end());
  auto params = init_params(tiny_config(), 17);
  const auto [best, history] = train(params, tr, val, tiny_train_config(1));
  REQUIRE(history.epochs.size() == 1);
  CHECK(history.epochs[0].epoch == 1);
  CHECK(history.epochs[0].seconds >= 0.0);
}

TEST_CASE("training twice with the same seed is bit-identical") {
  const auto data = tiny_dataset(16, 33);
  const std::vector<LabeledSampleT<double>> val(data.begin(), data.begin() + 4);
  const std::vector<LabeledSampleT<double>> tr(data.begin() + 4, data.end());
  const auto params = init_params(tiny_config(), 29);
  const auto run1 = train(params, tr, val, tiny_train_config(2, 77));
  const auto run2 = train(params, tr, val, tiny_train_config(2, 77));
  CHECK(params_equal(run1.first, run2.first));
  REQUIRE(run1.second.epochs.size() == run2.second.epochs.size());
  for (std::size_t i = 0; i < run1.second.epochs.size(); ++i) {
    CHECK(run1.second.epochs[i].train_loss == run2.second.epochs[i].train_loss);
    CHECK(run1.second.epochs[i].val_mahd == run2.second.epochs[i].val_mahd);
  }
}

TEST_CASE("model selection keeps the best-scoring epoch, earliest on ties") {
  const auto data = tiny_dataset(16, 41);
  const std::vector<LabeledSampleT<double>> val(data.begin(), data.begin() + 4);
  const std::vector<LabeledSampleT<double>> tr(data.begin() + 4, data.end());
  const auto params = init_params(tiny_config(), 55);

  // Stub: epoch 1 scores 1.0, epoch 2 scores 2.0 -> epoch-1 snapshot wins.
  int call = 0;
  ValidationFn<double> worsening = [&call](const ModelParamsT<double>&,
                                           const std::vector<LabeledSampleT<double>>&) {
    return ++call == 1 ? 1.0 : 2.0;
  };
  const auto two = train(params, tr, val, tiny_train_config(2, 91), worsening);
  const auto one = train(params, tr, val, tiny_train_config(1, 91));
  CHECK(params_equal(two.first, one.first));
  CHECK(two.second.epochs.size() == 2);

  // Equal scores tie to the earliest epoch.
  ValidationFn<double> flat = [](const ModelParamsT<double>&,
                                 const std::vector<LabeledSampleT<double>>&) { return 3.5; };
  const auto tied = train(params, tr, val, tiny_train_config(2, 91), flat);
  CHECK(params_equal(tied.first, one.first));

  // Improving scores keep the later snapshot instead.
  int call2 = 0;
  ValidationFn<double> improving = [&call2](const ModelParamsT<double>&,
                                            const std::vector<LabeledSampleT<double>>&) {
    return ++call2 == 1 ? 2.0 : 1.0;
  };
  const auto improved = train(params, tr, val, tiny_train_config(2, 91), improving);
  CHECK(!params_equal(improved.first, one.first));
}

TEST_CASE("a short run reduces the training loss") {
  const auto data = tiny_dataset(40, 63);
  const std::vector<LabeledSampleT<double>> val(data.begin(), data.begin() + 6);
  const std::vector<LabeledSampleT<double>> tr(data.begin() + 6, data.end());
  const auto params = init_params(tiny_config(), 71);
  auto cfg = tiny_train_config(6, 13);
  cfg.learning_rate = 3e-3;
  const auto [best, history] = train(params, tr, val, cfg);
  (void)best;
  CHECK(history.epochs.back().train_loss < history.epochs.front().train_loss);
}

TEST_CASE("fine_tune equals train on the encoder-transferred model") {
  const auto data = tiny_dataset(12, 81);
  const std::vector<LabeledSampleT<double>> val(data.begin(), data.begin() + 4);
  const std::vector<LabeledSampleT<double>> tr(data.begin() + 4, data.end());
  const auto pretrained = init_params(tiny_config(), 97);
  const auto fresh = init_params(tiny_config(), 98);
  const auto cfg = tiny_train_config(1, 7);
  const auto via_fine_tune = fine_tune(pretrained, fresh, tr, val, cfg);
  const auto via_train = train(transfer_encoder(pretrained, fresh), tr, val, cfg);
  CHECK(params_equal(via_fine_tune.first, via_train.first));

  // Transferring a model into itself reduces to plain training.
  const auto self_tuned = fine_tune(pretrained, pretrained, tr, val, cfg);
  const auto plain = train(pretrained, tr, val, cfg);
  CHECK(params_equal(self_tuned.first, plain.first));
}

TEST_CASE("train rejects empty datasets and bad configs") {
  const auto data = tiny_dataset(8, 91);
  const auto params = init_params(tiny_config(), 3);
  std::vector<LabeledSampleT<double>> empty;
  CHECK_THROWS_AS(train(params, empty, data, tiny_train_config(1)),
                  std::invalid_argument);
  CHECK_THROWS_AS(train(params, data, empty, tiny_train_config(1)),
                  std::invalid_argument);
  auto cfg = tiny_train_config(1);
  cfg.epochs = 0;
  CHECK_THROWS_AS(train(params, data, data, cfg), std::invalid_argument);
}

TEST_CASE("default learning rates for the two protocols") {
  CHECK(scratch_defaults().learning_rate == doctest::Approx(1e-4));
  CHECK(finetune_defaults().learning_rate == doctest::Approx(1e-5));
}
