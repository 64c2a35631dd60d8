// Calibration scratch: float vs double training throughput.
#include <chrono>
#include <cstdio>

#include "hausloc/net.hpp"
#include "hausloc/rng.hpp"
#include "hausloc/synthdata.hpp"

using namespace hausloc;

template <typename Scalar>
double bench() {
  FieldConfigT<Scalar> field;
  field.field_width = 512;
  field.field_height = 256;
  const auto [img, pts] = generate_field(field, 1);
  const auto batch = random_crops(img, pts, {0, 0, 512, 256}, 16, 48, 160, 64, 2);

  NetConfig cfg;
  cfg.input_size = 64;
  const auto params = init_params<Scalar>(cfg, 3);
  WhdParamsT<Scalar> whd_params;
  // Warmup + timed passes.
  auto run = [&] { return loss_and_grad<Scalar>(params, batch, whd_params, Scalar(1)).first; };
  run();
  const auto t0 = std::chrono::steady_clock::now();
  double acc = 0;
  for (int i = 0; i < 4; ++i) acc += double(run());
  const double dt =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 4.0;
  std::printf("  loss %.4f, %.3fs per 16-batch\n", acc / 4.0, dt);
  return dt;
}

int main() {
  std::printf("double:\n");
  const double d = bench<double>();
  std::printf("float:\n");
  const double f = bench<float>();
  std::printf("speedup %.2fx\n", d / f);
  return 0;
}
