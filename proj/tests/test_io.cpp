#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>

#include "hausloc/io.hpp"
#include "hausloc/synthdata.hpp"
#include "test_support.hpp"

using namespace hausloc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    const auto tick = std::chrono::steady_clock::now().time_since_epoch().count();
    path = fs::temp_directory_path() /
           ("hausloc_test_" + std::to_string(Rng(std::uint64_t(tick)).next_u64()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("pgm round trip within quantization error") {
  TempDir tmp;
  Rng rng(1);
  const auto map = oracle::random_map(rng, 20, 30, 0.0, 1.0);
  write_pgm(tmp.path / "m.pgm", map);
  const auto back = read_pgm(tmp.path / "m.pgm");
  REQUIRE(back.rows() == 20);
  REQUIRE(back.cols() == 30);
  CHECK((map - back).abs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
}

TEST_CASE("ppm round trip within quantization error") {
  TempDir tmp;
  FieldConfig cfg;
  cfg.field_width = 64;
  cfg.field_height = 48;
  const auto [img, pts] = generate_field(cfg, 3);
  (void)pts;
  write_ppm(tmp.path / "f.ppm", img);
  const auto back = read_ppm(tmp.path / "f.ppm");
  REQUIRE(back.width() == 64);
  REQUIRE(back.height() == 48);
  for (int c = 0; c < 3; ++c)
    CHECK((img.channel(c) - back.channel(c)).abs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
}

TEST_CASE("pnm readers reject foreign content") {
  TempDir tmp;
  std::ofstream(tmp.path / "bad.pgm") << "P2\n2 2\n255\n0 0 0 0\n";
  CHECK_THROWS_AS(read_pgm(tmp.path / "bad.pgm"), FormatError);
  std::ofstream(tmp.path / "bad.ppm") << "JUNKJUNK";
  CHECK_THROWS_AS(read_ppm(tmp.path / "bad.ppm"), FormatError);
  CHECK_THROWS_AS(read_pgm(tmp.path / "missing.pgm"), FormatError);
}

TEST_CASE("points csv round trip") {
  TempDir tmp;
  PointList<double> pts{{0.0, 0.0}, {12.25, 3.5}, {63.9999, 0.125}};
  write_points_csv(tmp.path / "p.csv", pts);
  const auto back = read_points_csv(tmp.path / "p.csv");
  REQUIRE(back.size() == pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) CHECK((pts[i] - back[i]).norm() < 1e-9);

  // Empty set still writes the header.
  write_points_csv(tmp.path / "e.csv", PointList<double>{});
  CHECK(read_points_csv(tmp.path / "e.csv").empty());

  std::ofstream(tmp.path / "bad.csv") << "a,b\n1,2\n";
  CHECK_THROWS_AS(read_points_csv(tmp.path / "bad.csv"), FormatError);
}

TEST_CASE("weight files round trip through float32") {
  TempDir tmp;
  NetConfig cfg;
  cfg.input_size = 16;
  cfg.encoder_blocks = 2;
  cfg.base_channels = 4;
  cfg.count_head_hidden = 8;
  const auto params = init_params(cfg, 23);
  save_weights(tmp.path / "w.hloc", params);
  const auto back = load_weights(tmp.path / "w.hloc");
  REQUIRE(back.tensors.size() == params.tensors.size());
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    CHECK(back.tensors[i].name == params.tensors[i].name);
    CHECK(back.tensors[i].partition == params.tensors[i].partition);
    CHECK(back.tensors[i].dims == params.tensors[i].dims);
    CHECK((back.tensors[i].data - params.tensors[i].data).abs().maxCoeff() < 1e-6);
  }
  // Architecture is reconstructed from the tensors.
  CHECK(back.config.encoder_blocks == 2);
  CHECK(back.config.base_channels == 4);
  CHECK(back.config.channel_cap == 8);
  CHECK(back.config.count_head_hidden == 8);
  CHECK(back.config.input_size == 0);

  // A loaded model still runs on any compatible input size.
  Rng rng(2);
  RgbImageT<double> img(16, 16);
  for (int c = 0; c < 3; ++c)
    for (Index i = 0; i < 16; ++i)
      for (Index j = 0; j < 16; ++j) img.channel(c)(i, j) = rng.uniform(0, 1);
  const auto out = forward(back, img);
  CHECK(out.prob_map.rows() == 16);
}

TEST_CASE("weight loader rejects corrupt files") {
  TempDir tmp;
  std::ofstream(tmp.path / "bad.hloc", std::ios::binary) << "NOPE"
                                                          << std::string(16, '\0');
  CHECK_THROWS_AS(load_weights(tmp.path / "bad.hloc"), FormatError);

  // Unknown version.
  {
    std::ofstream out(tmp.path / "v9.hloc", std::ios::binary);
    out.write("HLOC", 4);
    out.put(9);
    out.put(0);  // version 9 LE
    out.put(1);
    out.put(0);
    out.put(0);
    out.put(0);  // one tensor
  }
  CHECK_THROWS_AS(load_weights(tmp.path / "v9.hloc"), FormatError);

  // Truncated payload.
  {
    const auto params = init_params(NetConfig{}, 1);
    save_weights(tmp.path / "trunc.hloc", params);
    const auto size = fs::file_size(tmp.path / "trunc.hloc");
    fs::resize_file(tmp.path / "trunc.hloc", size / 2);
  }
  CHECK_THROWS_AS(load_weights(tmp.path / "trunc.hloc"), FormatError);
}

TEST_CASE("dataset directory round trip") {
  TempDir tmp;
  FieldConfig field;
  field.field_width = 128;
  field.field_height = 96;
  field.row_spacing = 24;
  field.in_row_spacing = 20;
  const auto [img, pts] = generate_field(field, 9);
  const auto samples = random_crops(img, pts, {0, 0, 128, 96}, 6, 32, 64, 32, 4);
  save_dataset(tmp.path / "ds", samples, to_json(field), 9, "train");

  const auto back = load_dataset(tmp.path / "ds");
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back[i].count == samples[i].count);
    REQUIRE(back[i].centers.size() == samples[i].centers.size());
    for (std::size_t k = 0; k < samples[i].centers.size(); ++k)
      CHECK((back[i].centers[k] - samples[i].centers[k]).norm() < 1e-9);
    CHECK((back[i].image.g - samples[i].image.g).abs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
  }

  // Manifest validation: corrupt the declared count.
  {
    std::ifstream in(tmp.path / "ds" / "manifest.json");
    json m;
    in >> m;
    m["samples"][0]["count"] = 99;
    std::ofstream out(tmp.path / "ds" / "manifest.json");
    out << m.dump(2);
  }
  CHECK_THROWS_AS(load_dataset(tmp.path / "ds"), FormatError);
  CHECK_THROWS_AS(load_dataset(tmp.path / "nowhere"), FormatError);
}

TEST_CASE("train config json round trip") {
  TrainConfig cfg;
  cfg.learning_rate = 5e-4;
  cfg.batch_size = 4;
  cfg.epochs = 17;
  cfg.lambda_count = 0.5;
  cfg.seed = 99;
  cfg.whd_params.alpha = -2.0;
  cfg.whd_params.d_max = 42.0;
  const auto j = to_json(cfg);
  const auto back = train_config_from_json<double>(j);
  CHECK(back.learning_rate == cfg.learning_rate);
  CHECK(back.batch_size == cfg.batch_size);
  CHECK(back.epochs == cfg.epochs);
  CHECK(back.lambda_count == cfg.lambda_count);
  CHECK(back.seed == cfg.seed);
  CHECK(back.whd_params.alpha == -2.0);
  CHECK(back.whd_params.d_max.value() == 42.0);

  // d_max omitted stays auto (domain diagonal).
  const auto sparse = train_config_from_json<double>(json{{"learning_rate", 1e-5}});
  CHECK(sparse.learning_rate == 1e-5);
  CHECK(!sparse.whd_params.d_max.has_value());
  CHECK(sparse.batch_size == 16);

  CHECK_THROWS_AS(train_config_from_json<double>(json{{"epochs", 0}}),
                  std::invalid_argument);
}

TEST_CASE("field config json round trip") {
  FieldConfig cfg;
  cfg.field_width = 777;
  cfg.soil_base_color = {0.1, 0.2, 0.3};
  cfg.plant_radius_min = 2.5;
  cfg.plant_radius_max = 6.5;
  cfg.flightline_banding = true;
  const auto back = field_config_from_json<double>(to_json(cfg));
  CHECK(back.field_width == 777);
  CHECK(back.soil_base_color[2] == 0.3);
  CHECK(back.plant_radius_min == 2.5);
  CHECK(back.plant_radius_max == 6.5);
  CHECK(back.flightline_banding);
}

TEST_CASE("metrics report json has the documented field names") {
  MetricsReport r;
  r.precision = 0.9;
  r.recall = 0.8;
  r.f1 = 0.85;
  r.mahd = 3.2;
  r.mae = 1.1;
  r.rmse = 2.2;
  r.n_images = 7;
  auto j = to_json(r);
  for (const char* key : {"precision", "recall", "f1", "mahd", "mae", "rmse", "n_images"})
    CHECK(j.contains(key));
  CHECK(!j.contains("mape"));  // absent when undefined
  r.mape = 12.5;
  CHECK(to_json(r).at("mape") == doctest::Approx(12.5));
}

TEST_CASE("history csv layout") {
  TempDir tmp;
  TrainHistory h;
  h.epochs.push_back({1, 10.5, 3.25, 0.5});
  h.epochs.push_back({2, 8.25, 2.5, 0.4});
  write_history_csv(tmp.path / "h.csv", h);
  std::ifstream in(tmp.path / "h.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,train_loss,val_mahd,seconds");
  std::getline(in, line);
  CHECK(line.substr(0, 10) == "1,10.5,3.2");
}
