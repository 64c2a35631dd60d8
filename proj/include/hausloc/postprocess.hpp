#pragma once

#include <algorithm>
#include <array>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "hausloc/core.hpp"
#include "hausloc/rng.hpp"

namespace hausloc {

using BinaryMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct OtsuResultT {
  Scalar threshold = 0;
  /// Set when all values fall into a single histogram bin, in which case the
  /// threshold is simply the mean value and the foreground is empty.
  bool degenerate = false;
};

/// Otsu threshold over a fixed 256-bin histogram (8-bit convention).
/// Returns the boundary between the two classes; ties in between-class
/// variance resolve to the lowest cut.
template <typename Scalar>
OtsuResultT<Scalar> otsu_threshold(const ProbMap<Scalar>& map) {
  detail::require(map.size() > 0, "otsu_threshold: empty map");
  constexpr int kBins = 256;
  std::array<double, kBins> hist{};
  for (Index i = 0; i < map.rows(); ++i)
    for (Index j = 0; j < map.cols(); ++j) {
      const int bin = std::min(kBins - 1, std::max(0, int(double(map(i, j)) * kBins)));
      hist[bin] += 1.0;
    }

  const int occupied = int(std::count_if(hist.begin(), hist.end(), [](double c) { return c > 0; }));
  if (occupied <= 1) return {Scalar(map.mean()), true};

  const double total = double(map.size());
  double global_sum = 0.0;
  for (int b = 0; b < kBins; ++b) global_sum += double(b) * hist[b];

  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_cut = 0;
  for (int t = 0; t < kBins - 1; ++t) {
    w0 += hist[t];
    sum0 += double(t) * hist[t];
    const double w1 = total - w0;
    if (w0 <= 0.0 || w1 <= 0.0) continue;
    const double mu0 = sum0 / w0;
    const double mu1 = (global_sum - sum0) / w1;
    const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (between > best) {
      best = between;
      best_cut = t;
    }
  }
  return {Scalar(best_cut + 1) / Scalar(kBins), false};
}

/// Foreground = strictly above the threshold.
template <typename Scalar>
BinaryMask binarize(const ProbMap<Scalar>& map, Scalar t) {
  detail::require(t >= Scalar(0) && t <= Scalar(1), "binarize: threshold outside [0, 1]");
  return map > t;
}

/// 8-connected components of the foreground, in row-major discovery order.
/// Component pixels are (x, y) integer coordinates.
inline std::vector<std::vector<Eigen::Vector2i>> connected_components(const BinaryMask& mask) {
  const Index h = mask.rows(), w = mask.cols();
  std::vector<std::vector<Eigen::Vector2i>> components;
  BinaryMask visited = BinaryMask::Constant(h, w, false);
  std::vector<Eigen::Vector2i> stack;
  for (Index i = 0; i < h; ++i) {
    for (Index j = 0; j < w; ++j) {
      if (!mask(i, j) || visited(i, j)) continue;
      std::vector<Eigen::Vector2i> comp;
      visited(i, j) = true;
      stack.assign(1, {int(j), int(i)});
      while (!stack.empty()) {
        const Eigen::Vector2i px = stack.back();
        stack.pop_back();
        comp.push_back(px);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const Index ny = px.y() + dy, nx = px.x() + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            if (!mask(ny, nx) || visited(ny, nx)) continue;
            visited(ny, nx) = true;
            stack.push_back({int(nx), int(ny)});
          }
      }
      components.push_back(std::move(comp));
    }
  }
  return components;
}

template <typename Scalar>
struct WeightedPointT {
  Point2<Scalar> pos;
  Scalar weight;
};

template <typename Scalar>
struct GmmStateT {
  std::vector<Point2<Scalar>> means;
  std::vector<Eigen::Matrix<Scalar, 2, 2>> covariances;
  std::vector<Scalar> weights;
  Scalar log_likelihood = 0;
  int iterations = 0;
  /// Log-likelihood after every E step, for convergence diagnostics.
  std::vector<Scalar> log_likelihood_trace;
};

namespace detail {

template <typename Scalar>
Eigen::Matrix<Scalar, 2, 2> floor_covariance(const Eigen::Matrix<Scalar, 2, 2>& cov,
                                             Scalar variance_floor) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<Scalar, 2, 2>> es(cov);
  Eigen::Matrix<Scalar, 2, 1> evals = es.eigenvalues().cwiseMax(variance_floor);
  return es.eigenvectors() * evals.asDiagonal() * es.eigenvectors().transpose();
}

/// k-means++ style seeding on the weighted points.
template <typename Scalar>
std::vector<Point2<Scalar>> seed_means(std::span<const WeightedPointT<Scalar>> points, int k,
                                       std::uint64_t seed) {
  Rng rng(seed ^ 0x5eedULL);
  std::vector<Point2<Scalar>> means;
  std::vector<double> score(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) score[i] = double(points[i].weight);
  for (int c = 0; c < k; ++c) {
    const double total = std::accumulate(score.begin(), score.end(), 0.0);
    std::size_t pick = 0;
    if (total > 0.0) {
      double target = rng.uniform() * total, acc = 0.0;
      for (std::size_t i = 0; i < points.size(); ++i) {
        acc += score[i];
        if (acc >= target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::size_t(rng.uniform_int(0, std::int64_t(points.size()) - 1));
    }
    means.push_back(points[pick].pos);
    for (std::size_t i = 0; i < points.size(); ++i) {
      const double d2 = double((points[i].pos - means.back()).squaredNorm());
      const double weighted = double(points[i].weight) * d2;
      score[i] = (c == 0) ? weighted : std::min(score[i], weighted);
    }
  }
  return means;
}

}  // namespace detail

/// Expectation-maximization fit of a K-component 2-D Gaussian mixture to
/// activation-weighted pixels. Covariance eigenvalues are floored, which
/// keeps each M step the constrained maximizer, so the weighted
/// log-likelihood never decreases. Stops when the gain drops below tol.
template <typename Scalar>
GmmStateT<Scalar> em_gmm(std::span<const WeightedPointT<Scalar>> points, int k,
                         std::uint64_t seed, int max_iters = 100, Scalar tol = Scalar(1e-7),
                         std::vector<Point2<Scalar>> init_means = {},
                         Scalar variance_floor = Scalar(0.25)) {
  detail::require(k >= 1, "em_gmm: need at least one component");
  if (int(points.size()) < k) throw std::domain_error("em_gmm: more components than points");
  detail::require(init_means.empty() || int(init_means.size()) == k,
                  "em_gmm: init mean count must match K");
  detail::require(max_iters >= 1, "em_gmm: max_iters must be positive");

  const std::size_t n = points.size();
  Scalar total_weight = 0;
  for (const auto& p : points) {
    detail::require(p.weight >= Scalar(0), "em_gmm: negative point weight");
    total_weight += p.weight;
  }
  detail::require(total_weight > Scalar(0), "em_gmm: all point weights are zero");

  GmmStateT<Scalar> st;
  st.means = init_means.empty() ? detail::seed_means(points, k, seed) : std::move(init_means);
  st.covariances.assign(k, Scalar(4) * Eigen::Matrix<Scalar, 2, 2>::Identity());
  st.weights.assign(k, Scalar(1) / Scalar(k));

  std::vector<Scalar> resp(n * std::size_t(k));
  constexpr Scalar kLog2Pi = Scalar(1.8378770664093453);

  for (int iter = 0; iter < max_iters; ++iter) {
    // E step: responsibilities and the weighted log-likelihood.
    std::vector<Eigen::Matrix<Scalar, 2, 2>> inv(k);
    std::vector<Scalar> log_norm(k);
    for (int c = 0; c < k; ++c) {
      const Scalar det = st.covariances[c].determinant();
      inv[c] = st.covariances[c].inverse();
      log_norm[c] = -kLog2Pi - Scalar(0.5) * std::log(det);
    }
    Scalar loglik = 0;
    for (std::size_t i = 0; i < n; ++i) {
      Scalar best = -std::numeric_limits<Scalar>::infinity();
      Scalar* row = resp.data() + i * std::size_t(k);
      for (int c = 0; c < k; ++c) {
        if (st.weights[c] <= Scalar(0)) {
          row[c] = -std::numeric_limits<Scalar>::infinity();
          continue;
        }
        const Point2<Scalar> diff = points[i].pos - st.means[c];
        const Scalar quad = diff.dot(inv[c] * diff);
        row[c] = std::log(st.weights[c]) + log_norm[c] - Scalar(0.5) * quad;
        best = std::max(best, row[c]);
      }
      Scalar sum_exp = 0;
      for (int c = 0; c < k; ++c) sum_exp += std::exp(row[c] - best);
      const Scalar log_density = best + std::log(sum_exp);
      loglik += points[i].weight * log_density;
      for (int c = 0; c < k; ++c) row[c] = std::exp(row[c] - best) / sum_exp;
    }
    st.log_likelihood_trace.push_back(loglik);
    st.log_likelihood = loglik;
    st.iterations = iter + 1;
    if (iter > 0 && loglik - st.log_likelihood_trace[iter - 1] < tol) break;

    // M step with weighted counts.
    for (int c = 0; c < k; ++c) {
      Scalar nk = 0;
      Point2<Scalar> mu = Point2<Scalar>::Zero();
      for (std::size_t i = 0; i < n; ++i) {
        const Scalar r = points[i].weight * resp[i * std::size_t(k) + c];
        nk += r;
        mu += r * points[i].pos;
      }
      if (nk <= total_weight * Scalar(1e-12)) {
        // Starved component: keep its location, let its weight vanish.
        st.weights[c] = nk / total_weight;
        continue;
      }
      mu /= nk;
      Eigen::Matrix<Scalar, 2, 2> cov = Eigen::Matrix<Scalar, 2, 2>::Zero();
      for (std::size_t i = 0; i < n; ++i) {
        const Scalar r = points[i].weight * resp[i * std::size_t(k) + c];
        const Point2<Scalar> diff = points[i].pos - mu;
        cov += r * (diff * diff.transpose());
      }
      cov /= nk;
      st.means[c] = mu;
      st.covariances[c] = detail::floor_covariance(cov, variance_floor);
      st.weights[c] = nk / total_weight;
    }
    // Renormalize mixture weights (guards starved-component drift).
    const Scalar wsum = std::accumulate(st.weights.begin(), st.weights.end(), Scalar(0));
    for (auto& wc : st.weights) wc /= wsum;
  }
  return st;
}

/// Saliency map -> plant centers: Otsu threshold, foreground pixels weighted
/// by activation, K from the rounded count estimate (clamped to the
/// foreground size) or from the connected-component count when absent, then
/// a GMM-EM fit whose means are the centers.
template <typename Scalar>
PointList<Scalar> extract_centers(const ProbMap<Scalar>& map,
                                  std::optional<Scalar> count_estimate = std::nullopt) {
  if (map.size() == 0) return {};
  const auto otsu = otsu_threshold(map);
  const BinaryMask mask = binarize(map, otsu.threshold);

  std::vector<WeightedPointT<Scalar>> foreground;
  for (Index i = 0; i < map.rows(); ++i)
    for (Index j = 0; j < map.cols(); ++j)
      if (mask(i, j)) foreground.push_back({{Scalar(j), Scalar(i)}, map(i, j)});
  if (foreground.empty()) return {};

  auto components = connected_components(mask);
  long k = count_estimate ? std::lround(double(*count_estimate)) : long(components.size());
  k = std::clamp(k, 0L, long(foreground.size()));
  if (k == 0) return {};

  std::vector<Point2<Scalar>> init;
  if (std::size_t(k) <= components.size()) {
    std::stable_sort(components.begin(), components.end(),
                     [](const auto& a, const auto& b) { return a.size() > b.size(); });
    for (long c = 0; c < k; ++c) {
      Point2<Scalar> centroid = Point2<Scalar>::Zero();
      Scalar mass = 0;
      for (const auto& px : components[c]) {
        const Scalar a = map(px.y(), px.x());
        centroid += a * Point2<Scalar>{Scalar(px.x()), Scalar(px.y())};
        mass += a;
      }
      init.push_back(centroid / mass);
    }
  }

  const auto fit = em_gmm<Scalar>(foreground, int(k), /*seed=*/0, /*max_iters=*/100,
                                  /*tol=*/Scalar(1e-7), std::move(init));
  return {fit.means.begin(), fit.means.end()};
}

}  // namespace hausloc
