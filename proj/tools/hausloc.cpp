// hausloc: plant-center localization toolbox.
//
// Subcommands wire the library into reproducible runs: synthetic dataset
// generation, training, encoder-transfer fine-tuning, evaluation, training-
// set-size sweeps, and single-image inference. All configuration comes from
// JSON files plus a few override flags; every run writes a manifest naming
// its outputs. Exit codes: 0 success, 2 input/config error, 3 data/shape
// incompatibility, 4 internal numerical failure.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hausloc/io.hpp"
#include "hausloc/metrics.hpp"
#include "hausloc/net.hpp"
#include "hausloc/parallel.hpp"
#include "hausloc/postprocess.hpp"
#include "hausloc/synthdata.hpp"
#include "hausloc/train.hpp"

namespace fs = std::filesystem;
using namespace hausloc;

namespace {

constexpr const char* kToolVersion = "hausloc 0.1.0";

std::string timestamp_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&tt, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

struct ManifestWriter {
  json doc;
  fs::path target;

  ManifestWriter(const std::string& command, const fs::path& path) : target(path) {
    doc["command"] = command;
    doc["tool_version"] = kToolVersion;
    doc["started"] = timestamp_now();
    doc["artifacts"] = json::array();
  }

  void add_artifact(const fs::path& p) { doc["artifacts"].push_back(p.string()); }

  /// Written atomically: temp file in the same directory, then rename.
  void commit() {
    doc["finished"] = timestamp_now();
    for (const auto& a : doc["artifacts"])
      if (!fs::exists(a.get<std::string>()))
        throw NumericError("manifest names a missing artifact: " + a.get<std::string>());
    const fs::path tmp = target.string() + ".tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw FormatError("cannot write manifest " + target.string());
      out << doc.dump(2) << "\n";
    }
    fs::rename(tmp, target);
  }
};

json load_json_file(const fs::path& path) {
  if (!fs::exists(path)) throw std::invalid_argument("missing file: " + path.string());
  std::ifstream in(path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("bad JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

void require_exists(const fs::path& path, const char* what) {
  if (!fs::exists(path))
    throw std::invalid_argument(std::string("missing ") + what + ": " + path.string());
}

// ---------------------------------------------------------------------------

struct SynthOptions {
  std::string config_path, out_dir;
  std::uint64_t seed = 7;
};

int cmd_synth(const SynthOptions& opt) {
  const json cfg = load_json_file(opt.config_path);
  const auto field_cfg = field_config_from_json<double>(cfg.value("field", json::object()));
  std::array<double, 3> fractions{0.8, 0.1, 0.1};
  if (cfg.contains("split_fractions")) fractions = cfg.at("split_fractions");
  Index side_min = 48, side_max = 160;
  if (cfg.contains("side_range")) {
    side_min = cfg.at("side_range").at(0);
    side_max = cfg.at("side_range").at(1);
  }
  const Index out_size = cfg.value("out_size", 64);
  const json crops = cfg.value("crops", json::object());
  const int n_train = crops.value("train", 2000);
  const int n_val = crops.value("val", 200);
  const int n_test = crops.value("test", 200);

  const fs::path out_dir(opt.out_dir);
  fs::create_directories(out_dir);
  ManifestWriter manifest("synth", out_dir / "run_manifest.json");
  manifest.doc["config"] = cfg;
  manifest.doc["seeds"] = {{"field", opt.seed},
                           {"train", opt.seed + 1},
                           {"val", opt.seed + 2},
                           {"test", opt.seed + 3}};

  const auto [field, centers] = generate_field(field_cfg, opt.seed);
  const auto split =
      split_regions(field_cfg.field_width, field_cfg.field_height, fractions, side_max);

  struct Band {
    const char* name;
    Rect region;
    int count;
    std::uint64_t seed;
  };
  const Band bands[] = {{"train", split.train_region, n_train, opt.seed + 1},
                        {"val", split.val_region, n_val, opt.seed + 2},
                        {"test", split.test_region, n_test, opt.seed + 3}};
  for (const auto& band : bands) {
    const auto samples = random_crops(field, centers, band.region, band.count, side_min,
                                      side_max, out_size, band.seed);
    save_dataset(out_dir / band.name, samples, cfg, band.seed, band.name);
    manifest.add_artifact(out_dir / band.name / "manifest.json");
    std::printf("wrote %s: %d crops\n", (out_dir / band.name).c_str(), band.count);
  }
  manifest.commit();
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string train_dir, val_dir, config_path, weights_in, weights_out, history_out;
  std::optional<std::uint64_t> seed;
  bool finetune = false;
};

int cmd_train(const TrainOptions& opt) {
  require_exists(opt.train_dir, "training dataset");
  require_exists(opt.val_dir, "validation dataset");
  json cfg = json::object();
  if (!opt.config_path.empty()) cfg = load_json_file(opt.config_path);
  auto train_cfg = train_config_from_json<double>(
      cfg, opt.finetune ? finetune_defaults<double>() : scratch_defaults<double>());
  if (opt.seed) train_cfg.seed = *opt.seed;
  const auto net_cfg = net_config_from_json(cfg.value("net", json::object()));

  const auto train_set = load_dataset(opt.train_dir);
  const auto val_set = load_dataset(opt.val_dir);

  ModelParamsT<double> params;
  if (opt.finetune) {
    require_exists(opt.weights_in, "pretrained weights");
    const auto pretrained = load_weights(opt.weights_in);
    auto fresh = init_params(net_cfg, train_cfg.seed);
    params = transfer_encoder(pretrained, std::move(fresh));
  } else {
    params = init_params(net_cfg, train_cfg.seed);
  }

  const auto t0 = std::chrono::steady_clock::now();
  auto [best, history] = train(std::move(params), train_set, val_set, train_cfg);
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path weights_path(opt.weights_out);
  if (weights_path.has_parent_path()) fs::create_directories(weights_path.parent_path());
  save_weights(weights_path, best);
  const fs::path history_path = opt.history_out.empty()
                                    ? weights_path.parent_path() /
                                          (weights_path.stem().string() + "_history.csv")
                                    : fs::path(opt.history_out);
  write_history_csv(history_path, history);

  ManifestWriter manifest(opt.finetune ? "finetune" : "train",
                          weights_path.string() + ".run.json");
  manifest.doc["config"] = to_json(train_cfg);
  manifest.doc["config"]["net"] = to_json(net_cfg);
  manifest.doc["seeds"] = {{"train", train_cfg.seed}};
  if (opt.finetune) manifest.doc["weights_in"] = opt.weights_in;
  manifest.add_artifact(weights_path);
  manifest.add_artifact(history_path);
  manifest.commit();

  double best_mahd = std::numeric_limits<double>::infinity();
  for (const auto& e : history.epochs) best_mahd = std::min(best_mahd, double(e.val_mahd));
  std::printf("trained %d epochs in %.1fs, best validation MAHD %.3f\n",
              int(history.epochs.size()), elapsed, best_mahd);
  std::printf("weights: %s\nhistory: %s\n", weights_path.c_str(), history_path.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalOptions {
  std::string dataset_dir, weights, out_path;
  double r = 5.0;
  std::string mode = "many-to-one";
  bool gt_as_pred = false;
};

MatchMode parse_mode(const std::string& mode) {
  if (mode == "many-to-one") return MatchMode::ManyToOne;
  if (mode == "one-to-one") return MatchMode::OneToOne;
  throw std::invalid_argument("unknown matching mode: " + mode);
}

std::vector<PredictionT<double>> predict_dataset(const ModelParamsT<double>& params,
                                                 const std::vector<LabeledSample>& dataset) {
  std::vector<PredictionT<double>> preds(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t i) {
    const auto out = forward(params, dataset[i].image);
    preds[i].centers = extract_centers(out.prob_map, std::optional<double>(out.count_estimate));
    preds[i].count_estimate = out.count_estimate;
  });
  return preds;
}

int cmd_eval(const EvalOptions& opt) {
  require_exists(opt.dataset_dir, "dataset");
  const auto dataset = load_dataset(opt.dataset_dir);

  std::vector<PredictionT<double>> preds;
  if (opt.gt_as_pred) {
    for (const auto& s : dataset) preds.push_back({s.centers, double(s.count)});
  } else {
    require_exists(opt.weights, "weights");
    const auto params = load_weights(opt.weights);
    preds = predict_dataset(params, dataset);
  }

  MatchParams match;
  match.r = opt.r;
  match.mode = parse_mode(opt.mode);
  const auto report = evaluate(dataset, preds, match);
  std::fputs(render_metrics_table(report).c_str(), stdout);

  if (!opt.out_path.empty()) {
    json j = to_json(report);
    j["r"] = opt.r;
    j["mode"] = opt.mode;
    std::ofstream out(opt.out_path);
    out << j.dump(2) << "\n";
    ManifestWriter manifest("eval", opt.out_path + ".run.json");
    manifest.doc["config"] = {{"dataset", opt.dataset_dir},
                              {"weights", opt.weights},
                              {"r", opt.r},
                              {"mode", opt.mode},
                              {"gt_as_pred", opt.gt_as_pred}};
    manifest.add_artifact(opt.out_path);
    manifest.commit();
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct SweepOptions {
  std::string train_dir, val_dir, test_dir, config_path, out_path;
  std::vector<int> sizes;
  std::optional<std::uint64_t> seed;
};

int cmd_sweep(const SweepOptions& opt) {
  if (opt.sizes.empty()) throw std::invalid_argument("sweep: no sizes given");
  for (std::size_t i = 0; i < opt.sizes.size(); ++i) {
    if (opt.sizes[i] <= 0) throw std::invalid_argument("sweep: sizes must be positive");
    for (std::size_t k = i + 1; k < opt.sizes.size(); ++k)
      if (opt.sizes[i] == opt.sizes[k])
        throw std::invalid_argument("sweep: duplicate size " + std::to_string(opt.sizes[i]));
  }
  require_exists(opt.train_dir, "training dataset");
  require_exists(opt.val_dir, "validation dataset");
  require_exists(opt.test_dir, "test dataset");
  json cfg = json::object();
  if (!opt.config_path.empty()) cfg = load_json_file(opt.config_path);
  auto base_cfg = train_config_from_json<double>(cfg, scratch_defaults<double>());
  if (opt.seed) base_cfg.seed = *opt.seed;
  const auto net_cfg = net_config_from_json(cfg.value("net", json::object()));

  const auto full_train = load_dataset(opt.train_dir);
  const auto val_set = load_dataset(opt.val_dir);
  const auto test_set = load_dataset(opt.test_dir);

  std::ofstream out(opt.out_path);
  if (!out) throw std::invalid_argument("sweep: cannot open " + opt.out_path);
  out << "size,f1,mahd,mae\n";
  for (const int size : opt.sizes) {
    if (std::size_t(size) > full_train.size())
      throw std::invalid_argument("sweep: size exceeds the training dataset");
    // Fresh subsample per size from a size-derived stream, shared base seed.
    Rng rng(base_cfg.seed ^ (0x9e3779b97f4a7c15ULL * std::uint64_t(size)));
    std::vector<std::size_t> order(full_train.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
    std::vector<LabeledSample> subset;
    for (int i = 0; i < size; ++i) subset.push_back(full_train[order[std::size_t(i)]]);

    auto [best, history] = train(init_params(net_cfg, base_cfg.seed), subset, val_set,
                                 base_cfg);
    (void)history;
    const auto preds = predict_dataset(best, test_set);
    MatchParams match;
    const auto report = evaluate(test_set, preds, match);
    char row[128];
    std::snprintf(row, sizeof(row), "%d,%.6f,%.6f,%.6f\n", size, report.f1, report.mahd,
                  report.mae);
    out << row;
    out.flush();
    std::printf("size %d: F1 %.3f MAHD %.2f MAE %.2f\n", size, report.f1, report.mahd,
                report.mae);
  }
  out.close();

  ManifestWriter manifest("sweep", opt.out_path + ".run.json");
  manifest.doc["config"] = cfg;
  manifest.doc["seeds"] = {{"base", base_cfg.seed}};
  manifest.doc["sizes"] = opt.sizes;
  manifest.add_artifact(opt.out_path);
  manifest.commit();
  return 0;
}

// ---------------------------------------------------------------------------

struct InferOptions {
  std::string image_path, weights, out_prefix;
};

void draw_cross(RgbImage& img, const Point2<double>& center) {
  const Index cx = Index(std::lround(center.x()));
  const Index cy = Index(std::lround(center.y()));
  for (Index d = -2; d <= 2; ++d) {
    const Index x = cx + d, y = cy + d;
    if (x >= 0 && x < img.width() && cy >= 0 && cy < img.height()) {
      img.r(cy, x) = 1.0;
      img.g(cy, x) = 0.0;
      img.b(cy, x) = 0.0;
    }
    if (cx >= 0 && cx < img.width() && y >= 0 && y < img.height()) {
      img.r(y, cx) = 1.0;
      img.g(y, cx) = 0.0;
      img.b(y, cx) = 0.0;
    }
  }
}

int cmd_infer(const InferOptions& opt) {
  require_exists(opt.image_path, "input image");
  require_exists(opt.weights, "weights");
  const auto image = read_ppm(opt.image_path);
  const auto params = load_weights(opt.weights);
  const auto out = forward(params, image);
  const auto centers = extract_centers(out.prob_map, std::optional<double>(out.count_estimate));

  const fs::path map_path = opt.out_prefix + "_map.pgm";
  const fs::path centers_path = opt.out_prefix + "_centers.csv";
  const fs::path annotated_path = opt.out_prefix + "_annotated.ppm";
  write_pgm(map_path, out.prob_map);
  write_points_csv(centers_path, centers);
  RgbImage annotated = image;
  for (const auto& c : centers) draw_cross(annotated, c);
  write_ppm(annotated_path, annotated);

  ManifestWriter manifest("infer", opt.out_prefix + "_run.json");
  manifest.doc["config"] = {{"image", opt.image_path}, {"weights", opt.weights}};
  manifest.doc["count_estimate"] = out.count_estimate;
  manifest.doc["centers_found"] = centers.size();
  manifest.add_artifact(map_path);
  manifest.add_artifact(centers_path);
  manifest.add_artifact(annotated_path);
  manifest.commit();
  std::printf("found %zu centers (count head: %.2f)\n", centers.size(), out.count_estimate);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Plant-center localization toolbox"};
  app.require_subcommand(1);

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic labeled dataset");
  synth_cmd->add_option("--config", synth.config_path, "Field/dataset config JSON")->required();
  synth_cmd->add_option("--out", synth.out_dir, "Output directory")->required();
  synth_cmd->add_option("--seed", synth.seed, "Generation seed");

  TrainOptions train_opt;
  auto* train_cmd = app.add_subcommand("train", "Train a localizer from scratch");
  train_cmd->add_option("--train-dir", train_opt.train_dir, "Training dataset dir")->required();
  train_cmd->add_option("--val-dir", train_opt.val_dir, "Validation dataset dir")->required();
  train_cmd->add_option("--config", train_opt.config_path, "Train config JSON");
  train_cmd->add_option("--weights-out", train_opt.weights_out, "Output weight file")
      ->required();
  train_cmd->add_option("--history-out", train_opt.history_out, "History CSV path");
  std::uint64_t seed_flag = 0;
  auto* train_seed = train_cmd->add_option("--seed", seed_flag, "Override config seed");

  TrainOptions finetune_opt;
  finetune_opt.finetune = true;
  auto* ft_cmd = app.add_subcommand("finetune", "Fine-tune with a transferred encoder");
  ft_cmd->add_option("--train-dir", finetune_opt.train_dir, "Training dataset dir")->required();
  ft_cmd->add_option("--val-dir", finetune_opt.val_dir, "Validation dataset dir")->required();
  ft_cmd->add_option("--config", finetune_opt.config_path, "Train config JSON");
  ft_cmd->add_option("--weights-in", finetune_opt.weights_in, "Pretrained weight file")
      ->required();
  ft_cmd->add_option("--weights-out", finetune_opt.weights_out, "Output weight file")
      ->required();
  ft_cmd->add_option("--history-out", finetune_opt.history_out, "History CSV path");
  std::uint64_t ft_seed_flag = 0;
  auto* ft_seed = ft_cmd->add_option("--seed", ft_seed_flag, "Override config seed");

  EvalOptions eval_opt;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a model on a dataset");
  eval_cmd->add_option("--dataset", eval_opt.dataset_dir, "Dataset dir")->required();
  eval_cmd->add_option("--weights", eval_opt.weights, "Weight file");
  eval_cmd->add_option("--r", eval_opt.r, "Match radius in pixels");
  eval_cmd->add_option("--mode", eval_opt.mode, "many-to-one or one-to-one");
  eval_cmd->add_option("--out", eval_opt.out_path, "Metrics JSON path");
  eval_cmd->add_flag("--gt-as-pred", eval_opt.gt_as_pred,
                     "Score the ground truth against itself (pipeline check)");

  SweepOptions sweep_opt;
  auto* sweep_cmd = app.add_subcommand("sweep", "Training-set-size sweep");
  sweep_cmd->add_option("--sizes", sweep_opt.sizes, "Training set sizes")
      ->required()
      ->delimiter(',');
  sweep_cmd->add_option("--train-dir", sweep_opt.train_dir, "Training dataset dir")->required();
  sweep_cmd->add_option("--val-dir", sweep_opt.val_dir, "Validation dataset dir")->required();
  sweep_cmd->add_option("--test-dir", sweep_opt.test_dir, "Test dataset dir")->required();
  sweep_cmd->add_option("--config", sweep_opt.config_path, "Train config JSON");
  sweep_cmd->add_option("--out", sweep_opt.out_path, "Output CSV")->required();
  std::uint64_t sweep_seed_flag = 0;
  auto* sweep_seed = sweep_cmd->add_option("--seed", sweep_seed_flag, "Override config seed");

  InferOptions infer_opt;
  auto* infer_cmd = app.add_subcommand("infer", "Run the pipeline on one image");
  infer_cmd->add_option("--image", infer_opt.image_path, "Input PPM")->required();
  infer_cmd->add_option("--weights", infer_opt.weights, "Weight file")->required();
  infer_cmd->add_option("--out-prefix", infer_opt.out_prefix, "Output path prefix")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth_cmd->parsed()) return cmd_synth(synth);
    if (train_cmd->parsed()) {
      if (*train_seed) train_opt.seed = seed_flag;
      return cmd_train(train_opt);
    }
    if (ft_cmd->parsed()) {
      if (*ft_seed) finetune_opt.seed = ft_seed_flag;
      return cmd_train(finetune_opt);
    }
    if (eval_cmd->parsed()) return cmd_eval(eval_opt);
    if (sweep_cmd->parsed()) {
      if (*sweep_seed) sweep_opt.seed = sweep_seed_flag;
      return cmd_sweep(sweep_opt);
    }
    if (infer_cmd->parsed()) return cmd_infer(infer_opt);
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::domain_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  return 2;
}
