#pragma once

// File formats and serialization: PGM/PPM images, point CSVs, the binary
// weight format, dataset directories with a JSON manifest, and the JSON
// views of the run configurations and metric reports.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hausloc/core.hpp"
#include "hausloc/metrics.hpp"
#include "hausloc/net.hpp"
#include "hausloc/synthdata.hpp"
#include "hausloc/train.hpp"

namespace hausloc {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// PGM / PPM (binary, 8-bit, values scaled by 255)

namespace detail {

inline std::uint8_t to_byte(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return std::uint8_t(std::lround(clamped * 255.0));
}

inline int read_pnm_token(std::istream& in) {
  // Skips whitespace and '#' comments, then reads one unsigned integer.
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      in.unget();
      break;
    }
  }
  int value = -1;
  in >> value;
  if (!in) throw FormatError("pnm: malformed header");
  return value;
}

}  // namespace detail

template <typename Scalar>
void write_pgm(const std::filesystem::path& path, const Grid<Scalar>& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("write_pgm: cannot open " + path.string());
  out << "P5\n" << map.cols() << " " << map.rows() << "\n255\n";
  for (Index i = 0; i < map.rows(); ++i)
    for (Index j = 0; j < map.cols(); ++j)
      out.put(char(detail::to_byte(double(map(i, j)))));
  if (!out) throw FormatError("write_pgm: write failed for " + path.string());
}

template <typename Scalar = double>
Grid<Scalar> read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("read_pgm: cannot open " + path.string());
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P5") throw FormatError("read_pgm: not a binary PGM: " + path.string());
  const int w = detail::read_pnm_token(in);
  const int h = detail::read_pnm_token(in);
  const int maxval = detail::read_pnm_token(in);
  if (w < 1 || h < 1 || maxval != 255)
    throw FormatError("read_pgm: unsupported header in " + path.string());
  in.get();  // single whitespace after maxval
  std::vector<std::uint8_t> raw(std::size_t(w) * std::size_t(h));
  in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (!in) throw FormatError("read_pgm: truncated pixel data in " + path.string());
  Grid<Scalar> map(h, w);
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j)
      map(i, j) = Scalar(raw[std::size_t(i) * std::size_t(w) + std::size_t(j)]) / Scalar(255);
  return map;
}

template <typename Scalar>
void write_ppm(const std::filesystem::path& path, const RgbImageT<Scalar>& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("write_ppm: cannot open " + path.string());
  out << "P6\n" << image.width() << " " << image.height() << "\n255\n";
  for (Index i = 0; i < image.height(); ++i)
    for (Index j = 0; j < image.width(); ++j) {
      out.put(char(detail::to_byte(double(image.r(i, j)))));
      out.put(char(detail::to_byte(double(image.g(i, j)))));
      out.put(char(detail::to_byte(double(image.b(i, j)))));
    }
  if (!out) throw FormatError("write_ppm: write failed for " + path.string());
}

template <typename Scalar = double>
RgbImageT<Scalar> read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("read_ppm: cannot open " + path.string());
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6") throw FormatError("read_ppm: not a binary PPM: " + path.string());
  const int w = detail::read_pnm_token(in);
  const int h = detail::read_pnm_token(in);
  const int maxval = detail::read_pnm_token(in);
  if (w < 1 || h < 1 || maxval != 255)
    throw FormatError("read_ppm: unsupported header in " + path.string());
  in.get();
  std::vector<std::uint8_t> raw(std::size_t(w) * std::size_t(h) * 3);
  in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (!in) throw FormatError("read_ppm: truncated pixel data in " + path.string());
  RgbImageT<Scalar> image(w, h);
  std::size_t k = 0;
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j) {
      image.r(i, j) = Scalar(raw[k++]) / Scalar(255);
      image.g(i, j) = Scalar(raw[k++]) / Scalar(255);
      image.b(i, j) = Scalar(raw[k++]) / Scalar(255);
    }
  return image;
}

// ---------------------------------------------------------------------------
// Point-set CSV: header "x,y", one decimal row per point.

template <typename Scalar>
void write_points_csv(const std::filesystem::path& path, const PointList<Scalar>& points) {
  std::ofstream out(path);
  if (!out) throw FormatError("write_points_csv: cannot open " + path.string());
  out << "x,y\n";
  char buf[96];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%.12g,%.12g\n", double(p.x()), double(p.y()));
    out << buf;
  }
}

template <typename Scalar = double>
PointList<Scalar> read_points_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("read_points_csv: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || (line != "x,y" && line != "x,y\r"))
    throw FormatError("read_points_csv: missing x,y header in " + path.string());
  PointList<Scalar> points;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    double x = 0, y = 0;
    if (std::sscanf(line.c_str(), "%lf,%lf", &x, &y) != 2)
      throw FormatError("read_points_csv: bad row '" + line + "' in " + path.string());
    points.emplace_back(Scalar(x), Scalar(y));
  }
  return points;
}

// ---------------------------------------------------------------------------
// Binary weight file. Layout: magic "HLOC", u16 version, u32 tensor count;
// per tensor: u16 name length + name, u8 partition, u8 rank, u32 dims, then
// the data as 32-bit little-endian floats.

inline constexpr std::uint16_t kWeightFormatVersion = 1;

namespace detail {

template <typename T>
void put_le(std::ostream& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.put(char((std::uint64_t(value) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::istream& in) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == EOF) throw FormatError("weights: truncated file");
    v |= std::uint64_t(std::uint8_t(c)) << (8 * i);
  }
  return T(v);
}

inline void put_f32_le(std::ostream& out, float value) {
  std::uint32_t bits;
  std::memcpy(&bits, &value, 4);
  put_le(out, bits);
}

inline float get_f32_le(std::istream& in) {
  const std::uint32_t bits = get_le<std::uint32_t>(in);
  float value;
  std::memcpy(&value, &bits, 4);
  return value;
}

}  // namespace detail

template <typename Scalar>
void save_weights(const std::filesystem::path& path, const ModelParamsT<Scalar>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("save_weights: cannot open " + path.string());
  out.write("HLOC", 4);
  detail::put_le(out, kWeightFormatVersion);
  detail::put_le(out, std::uint32_t(params.tensors.size()));
  for (const auto& t : params.tensors) {
    detail::put_le(out, std::uint16_t(t.name.size()));
    out.write(t.name.data(), std::streamsize(t.name.size()));
    out.put(char(std::uint8_t(t.partition)));
    out.put(char(std::uint8_t(t.dims.size())));
    for (Index d : t.dims) detail::put_le(out, std::uint32_t(d));
    for (Index i = 0; i < t.size(); ++i) detail::put_f32_le(out, float(t.data[i]));
  }
  if (!out) throw FormatError("save_weights: write failed for " + path.string());
}

/// Rebuilds the architecture description from tensor names and shapes; the
/// trained input size is not stored, so any compatible square size is
/// accepted at inference time.
template <typename Scalar>
NetConfig reconstruct_config(const ModelParamsT<Scalar>& params) {
  NetConfig cfg;
  cfg.input_size = 0;
  int blocks = 0;
  int cap = 0;
  while (true) {
    const std::string name = "enc" + std::to_string(blocks) + ".conv1.weight";
    bool found = false;
    for (const auto& t : params.tensors)
      if (t.name == name) {
        cap = std::max(cap, int(t.dims.at(0)));
        found = true;
      }
    if (!found) break;
    ++blocks;
  }
  if (blocks == 0) throw FormatError("weights: no encoder tensors present");
  cfg.encoder_blocks = blocks;
  cfg.base_channels = int(params.at("enc0.conv1.weight").dims.at(0));
  cfg.channel_cap = cap;
  cfg.count_head_hidden = int(params.at("count.fc1.bias").dims.at(0));
  return cfg;
}

template <typename Scalar = double>
ModelParamsT<Scalar> load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_weights: cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "HLOC", 4) != 0)
    throw FormatError("load_weights: bad magic in " + path.string());
  const auto version = detail::get_le<std::uint16_t>(in);
  if (version != kWeightFormatVersion)
    throw FormatError("load_weights: unsupported format version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(in);
  if (count == 0 || count > 4096) throw FormatError("load_weights: implausible tensor count");

  ModelParamsT<Scalar> params;
  for (std::uint32_t k = 0; k < count; ++k) {
    TensorT<Scalar> t;
    const auto name_len = detail::get_le<std::uint16_t>(in);
    t.name.resize(name_len);
    in.read(t.name.data(), name_len);
    const int part = in.get();
    const int rank = in.get();
    if (!in || part < 0 || part > 2 || rank < 1 || rank > 8)
      throw FormatError("load_weights: corrupt tensor header in " + path.string());
    t.partition = Partition(std::uint8_t(part));
    Index n = 1;
    for (int d = 0; d < rank; ++d) {
      const auto dim = detail::get_le<std::uint32_t>(in);
      if (dim == 0 || dim > (1u << 24)) throw FormatError("load_weights: implausible dim");
      t.dims.push_back(Index(dim));
      n *= Index(dim);
    }
    t.data.resize(n);
    for (Index i = 0; i < n; ++i) t.data[i] = Scalar(detail::get_f32_le(in));
    params.tensors.push_back(std::move(t));
  }
  params.config = reconstruct_config(params);
  return params;
}

// ---------------------------------------------------------------------------
// JSON views of the configuration types.

template <typename Scalar>
json to_json(const WhdParamsT<Scalar>& p) {
  json j{{"epsilon", p.epsilon}, {"alpha", p.alpha}, {"value_floor", p.value_floor}};
  if (p.d_max) j["d_max"] = *p.d_max;
  return j;
}

template <typename Scalar>
WhdParamsT<Scalar> whd_params_from_json(const json& j) {
  WhdParamsT<Scalar> p;
  p.epsilon = j.value("epsilon", p.epsilon);
  p.alpha = j.value("alpha", p.alpha);
  p.value_floor = j.value("value_floor", p.value_floor);
  if (j.contains("d_max") && !j.at("d_max").is_null())
    p.d_max = j.at("d_max").template get<Scalar>();
  return p;
}

inline json to_json(const NetConfig& c) {
  return json{{"input_size", c.input_size},
              {"encoder_blocks", c.encoder_blocks},
              {"base_channels", c.base_channels},
              {"channel_cap", c.channel_cap},
              {"count_head_hidden", c.count_head_hidden}};
}

inline NetConfig net_config_from_json(const json& j) {
  NetConfig c;
  c.input_size = j.value("input_size", c.input_size);
  c.encoder_blocks = j.value("encoder_blocks", c.encoder_blocks);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_cap = j.value("channel_cap", c.channel_cap);
  c.count_head_hidden = j.value("count_head_hidden", c.count_head_hidden);
  c.validate();
  return c;
}

template <typename Scalar>
json to_json(const TrainConfigT<Scalar>& c) {
  return json{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
              {"epochs", c.epochs},               {"lambda_count", c.lambda_count},
              {"seed", c.seed},                   {"whd_params", to_json(c.whd_params)}};
}

template <typename Scalar>
TrainConfigT<Scalar> train_config_from_json(const json& j,
                                            TrainConfigT<Scalar> defaults = {}) {
  TrainConfigT<Scalar> c = defaults;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.lambda_count = j.value("lambda_count", c.lambda_count);
  c.seed = j.value("seed", c.seed);
  if (j.contains("whd_params")) c.whd_params = whd_params_from_json<Scalar>(j.at("whd_params"));
  c.validate();
  return c;
}

template <typename Scalar>
json to_json(const FieldConfigT<Scalar>& c) {
  return json{{"field_width", c.field_width},
              {"field_height", c.field_height},
              {"soil_base_color", c.soil_base_color},
              {"soil_noise_amplitude", c.soil_noise_amplitude},
              {"row_spacing", c.row_spacing},
              {"in_row_spacing", c.in_row_spacing},
              {"spacing_jitter", c.spacing_jitter},
              {"plant_radius_range", {c.plant_radius_min, c.plant_radius_max}},
              {"plant_color", c.plant_color},
              {"lobe_count_range", {c.lobe_count_min, c.lobe_count_max}},
              {"emergence_rate", c.emergence_rate},
              {"flightline_banding", c.flightline_banding},
              {"band_intensity_delta", c.band_intensity_delta}};
}

template <typename Scalar>
FieldConfigT<Scalar> field_config_from_json(const json& j) {
  FieldConfigT<Scalar> c;
  c.field_width = j.value("field_width", c.field_width);
  c.field_height = j.value("field_height", c.field_height);
  if (j.contains("soil_base_color")) c.soil_base_color = j.at("soil_base_color");
  c.soil_noise_amplitude = j.value("soil_noise_amplitude", c.soil_noise_amplitude);
  c.row_spacing = j.value("row_spacing", c.row_spacing);
  c.in_row_spacing = j.value("in_row_spacing", c.in_row_spacing);
  c.spacing_jitter = j.value("spacing_jitter", c.spacing_jitter);
  if (j.contains("plant_radius_range")) {
    c.plant_radius_min = j.at("plant_radius_range").at(0);
    c.plant_radius_max = j.at("plant_radius_range").at(1);
  }
  if (j.contains("plant_color")) c.plant_color = j.at("plant_color");
  if (j.contains("lobe_count_range")) {
    c.lobe_count_min = j.at("lobe_count_range").at(0);
    c.lobe_count_max = j.at("lobe_count_range").at(1);
  }
  c.emergence_rate = j.value("emergence_rate", c.emergence_rate);
  c.flightline_banding = j.value("flightline_banding", c.flightline_banding);
  c.band_intensity_delta = j.value("band_intensity_delta", c.band_intensity_delta);
  return c;
}

template <typename Scalar>
json to_json(const MetricsReportT<Scalar>& r) {
  json j{{"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1},
         {"mahd", r.mahd},           {"mae", r.mae},       {"rmse", r.rmse},
         {"n_images", r.n_images}};
  if (r.mape) j["mape"] = *r.mape;
  return j;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json plus NNNN.ppm / NNNN.csv per sample.

template <typename Scalar>
void save_dataset(const std::filesystem::path& dir,
                  const std::vector<LabeledSampleT<Scalar>>& samples, const json& config,
                  std::uint64_t seed, const std::string& split) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "hausloc-dataset";
  manifest["version"] = 1;
  manifest["split"] = split;
  manifest["seed"] = seed;
  manifest["config"] = config;
  json list = json::array();
  char name[32];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(name, sizeof(name), "%04zu", i);
    const std::string image_name = std::string(name) + ".ppm";
    const std::string points_name = std::string(name) + ".csv";
    write_ppm(dir / image_name, samples[i].image);
    write_points_csv(dir / points_name, samples[i].centers);
    list.push_back({{"image", image_name}, {"points", points_name},
                    {"count", samples[i].count}});
  }
  manifest["samples"] = std::move(list);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw FormatError("save_dataset: cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

template <typename Scalar = double>
std::vector<LabeledSampleT<Scalar>> load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("load_dataset: missing manifest in " + dir.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw FormatError("load_dataset: bad manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "hausloc-dataset" || manifest.value("version", 0) != 1)
    throw FormatError("load_dataset: unrecognized manifest in " + dir.string());
  std::vector<LabeledSampleT<Scalar>> samples;
  for (const auto& entry : manifest.at("samples")) {
    LabeledSampleT<Scalar> s;
    s.image = read_ppm<Scalar>(dir / entry.at("image").template get<std::string>());
    s.centers = read_points_csv<Scalar>(dir / entry.at("points").template get<std::string>());
    s.count = entry.at("count").template get<int>();
    if (s.count != int(s.centers.size()))
      throw FormatError("load_dataset: count/points mismatch at " +
                        entry.at("points").template get<std::string>());
    for (const auto& p : s.centers)
      if (!s.image.domain().contains(p))
        throw FormatError("load_dataset: point outside image at " +
                          entry.at("points").template get<std::string>());
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Training history CSV.

template <typename Scalar>
void write_history_csv(const std::filesystem::path& path, const TrainHistoryT<Scalar>& h) {
  std::ofstream out(path);
  if (!out) throw FormatError("write_history_csv: cannot open " + path.string());
  out << "epoch,train_loss,val_mahd,seconds\n";
  char buf[160];
  for (const auto& e : h.epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.3f\n", e.epoch, double(e.train_loss),
                  double(e.val_mahd), e.seconds);
    out << buf;
  }
}

}  // namespace hausloc
