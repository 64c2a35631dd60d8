#pragma once

#include <algorithm>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <vector>

#include "hausloc/core.hpp"
#include "hausloc/whd.hpp"

namespace hausloc {

enum class MatchMode { ManyToOne, OneToOne };

template <typename Scalar>
struct MatchParamsT {
  /// Detection radius in pixels; a prediction at distance exactly r counts
  /// as matched (closed ball).
  Scalar r = Scalar(5);
  MatchMode mode = MatchMode::ManyToOne;
};

using MatchParams = MatchParamsT<double>;

struct MatchResult {
  long tp = 0;
  long fp = 0;
  long fn = 0;
};

/// Point-set matching at radius r.
///
/// Many-to-one: a prediction is a true positive iff some ground-truth point
/// lies within r (several predictions may claim the same plant); a
/// ground-truth point is a false negative iff no prediction lies within r.
/// One-to-one: greedy matching over prediction/ground-truth pairs in
/// ascending distance; pairs beyond r never match.
template <typename Scalar>
MatchResult match_points(const PointList<Scalar>& pred, const PointList<Scalar>& gt,
                         const MatchParamsT<Scalar>& params = {}) {
  detail::require(params.r > Scalar(0), "match_points: radius must be positive");
  MatchResult res;
  if (params.mode == MatchMode::ManyToOne) {
    for (const auto& p : pred) {
      bool hit = false;
      for (const auto& g : gt)
        if (euclidean_distance(p, g) <= params.r) {
          hit = true;
          break;
        }
      (hit ? res.tp : res.fp) += 1;
    }
    for (const auto& g : gt) {
      bool covered = false;
      for (const auto& p : pred)
        if (euclidean_distance(p, g) <= params.r) {
          covered = true;
          break;
        }
      if (!covered) res.fn += 1;
    }
    return res;
  }

  struct Pair {
    Scalar d;
    std::size_t pi, gi;
  };
  std::vector<Pair> pairs;
  for (std::size_t pi = 0; pi < pred.size(); ++pi)
    for (std::size_t gi = 0; gi < gt.size(); ++gi) {
      const Scalar d = euclidean_distance(pred[pi], gt[gi]);
      if (d <= params.r) pairs.push_back({d, pi, gi});
    }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    return a.d < b.d || (a.d == b.d && (a.pi < b.pi || (a.pi == b.pi && a.gi < b.gi)));
  });
  std::vector<bool> pred_used(pred.size(), false), gt_used(gt.size(), false);
  for (const auto& pr : pairs) {
    if (pred_used[pr.pi] || gt_used[pr.gi]) continue;
    pred_used[pr.pi] = gt_used[pr.gi] = true;
    res.tp += 1;
  }
  res.fp = long(pred.size()) - res.tp;
  res.fn = long(gt.size()) - res.tp;
  return res;
}

struct Prf {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

/// precision = tp/(tp+fp), recall = tp/(tp+fn),
/// f1 = 2*precision*recall/(precision+recall); 0/0 cases are defined as 0.
inline Prf precision_recall_f1(const MatchResult& m) {
  Prf out;
  out.precision = (m.tp + m.fp) > 0 ? double(m.tp) / double(m.tp + m.fp) : 0.0;
  out.recall = (m.tp + m.fn) > 0 ? double(m.tp) / double(m.tp + m.fn) : 0.0;
  const double denom = out.precision + out.recall;
  out.f1 = denom > 0.0 ? 2.0 * out.precision * out.recall / denom : 0.0;
  return out;
}

/// Mean over images of the average Hausdorff distance, substituting d_max
/// whenever either point set of an image is empty.
template <typename Scalar>
Scalar mean_average_hausdorff(
    std::span<const std::pair<PointList<Scalar>, PointList<Scalar>>> pairs, Scalar d_max) {
  detail::require(!pairs.empty(), "mean_average_hausdorff: empty pair list");
  Scalar acc = 0;
  for (const auto& [pred, gt] : pairs) {
    const auto ahd = average_hausdorff(pred, gt);
    acc += ahd ? *ahd : d_max;
  }
  return acc / Scalar(pairs.size());
}

template <typename Scalar>
struct CountErrorsT {
  /// Absent when every image has a zero ground-truth count.
  std::optional<Scalar> mape;
  Scalar mae = 0;
  Scalar rmse = 0;
};

/// Count-regression errors over a dataset: e_i = estimate_i - truth_i.
/// MAPE averages |e_i|/C_i over the images with C_i != 0 only.
template <typename Scalar>
CountErrorsT<Scalar> count_errors(std::span<const Scalar> truths,
                                  std::span<const Scalar> estimates) {
  detail::require(!truths.empty(), "count_errors: empty input");
  detail::require(truths.size() == estimates.size(), "count_errors: length mismatch");
  Scalar abs_acc = 0, sq_acc = 0, pct_acc = 0;
  std::size_t pct_n = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const Scalar e = estimates[i] - truths[i];
    abs_acc += std::abs(e);
    sq_acc += e * e;
    if (truths[i] != Scalar(0)) {
      pct_acc += std::abs(e) / truths[i];
      ++pct_n;
    }
  }
  CountErrorsT<Scalar> out;
  out.mae = abs_acc / Scalar(truths.size());
  out.rmse = std::sqrt(sq_acc / Scalar(truths.size()));
  if (pct_n > 0) out.mape = Scalar(100) * pct_acc / Scalar(pct_n);
  return out;
}

template <typename Scalar>
struct PredictionT {
  PointList<Scalar> centers;
  Scalar count_estimate = 0;
};

template <typename Scalar>
struct MetricsReportT {
  Scalar precision = 0, recall = 0, f1 = 0;
  Scalar mahd = 0;
  std::optional<Scalar> mape;
  Scalar mae = 0, rmse = 0;
  long n_images = 0;
};

using MetricsReport = MetricsReportT<double>;

/// Dataset-level evaluation. TP/FP/FN are pooled over the whole dataset
/// before computing precision/recall/F1 (micro-averaging). d_max, used when
/// an image has an empty prediction or ground truth, defaults to each
/// image's domain diagonal.
template <typename Scalar>
MetricsReportT<Scalar> evaluate(const std::vector<LabeledSampleT<Scalar>>& dataset,
                                const std::vector<PredictionT<Scalar>>& predictions,
                                const MatchParamsT<Scalar>& params = {},
                                std::optional<Scalar> d_max = std::nullopt) {
  if (dataset.size() != predictions.size())
    throw std::domain_error("evaluate: dataset/prediction length mismatch");
  detail::require(!dataset.empty(), "evaluate: empty dataset");

  MatchResult pooled;
  Scalar mahd_acc = 0;
  std::vector<Scalar> truths(dataset.size()), estimates(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto m = match_points(predictions[i].centers, dataset[i].centers, params);
    pooled.tp += m.tp;
    pooled.fp += m.fp;
    pooled.fn += m.fn;
    const auto ahd = average_hausdorff(predictions[i].centers, dataset[i].centers);
    mahd_acc += ahd ? *ahd
                    : (d_max ? *d_max : domain_diagonal<Scalar>(dataset[i].image.domain()));
    truths[i] = Scalar(dataset[i].count);
    estimates[i] = predictions[i].count_estimate;
  }

  const Prf prf = precision_recall_f1(pooled);
  const auto counts = count_errors<Scalar>(truths, estimates);
  MetricsReportT<Scalar> report;
  report.precision = Scalar(prf.precision);
  report.recall = Scalar(prf.recall);
  report.f1 = Scalar(prf.f1);
  report.mahd = mahd_acc / Scalar(dataset.size());
  report.mape = counts.mape;
  report.mae = counts.mae;
  report.rmse = counts.rmse;
  report.n_images = long(dataset.size());
  return report;
}

/// Plain-text table, one metric per row (ratios rendered as percentages).
template <typename Scalar>
std::string render_metrics_table(const MetricsReportT<Scalar>& r) {
  std::ostringstream os;
  os << std::fixed;
  auto pct = [&](const char* name, Scalar v) {
    os << std::left << std::setw(10) << name << std::right << std::setw(8)
       << std::setprecision(1) << double(v) * 100.0 << "%\n";
  };
  auto raw = [&](const char* name, Scalar v) {
    os << std::left << std::setw(10) << name << std::right << std::setw(9)
       << std::setprecision(2) << double(v) << "\n";
  };
  pct("Precision", r.precision);
  pct("Recall", r.recall);
  pct("F1 Score", r.f1);
  raw("MAHD", r.mahd);
  if (r.mape)
    pct("MAPE", *r.mape / Scalar(100));
  else
    os << std::left << std::setw(10) << "MAPE" << std::right << std::setw(9) << "n/a\n";
  raw("MAE", r.mae);
  raw("RMSE", r.rmse);
  return os.str();
}

}  // namespace hausloc
