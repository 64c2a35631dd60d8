#pragma once

#include <limits>
#include <optional>
#include <span>
#include <utility>

#include "hausloc/core.hpp"

namespace hausloc {

template <typename Scalar>
struct WhdParamsT {
  Scalar epsilon = Scalar(1e-6);
  Scalar alpha = Scalar(-1);
  /// Saturation distance for the second term. Empty means the diagonal of
  /// the map's domain, the largest realizable distance in it.
  std::optional<Scalar> d_max;
  /// Values are clamped at this floor before the alpha power so that
  /// f^alpha stays finite as f -> 0 with alpha < 0.
  Scalar value_floor = Scalar(1e-6);

  Scalar effective_d_max(const GridDomain& d) const {
    return d_max ? *d_max : domain_diagonal<Scalar>(d);
  }
};

using WhdParams = WhdParamsT<double>;

/// Gradient of the loss with respect to every map activation.
template <typename Scalar>
using GradMap = Grid<Scalar>;

/// Power mean ((1/|A|) sum max(f, floor)^alpha)^(1/alpha). Approaches the
/// minimum of the values as alpha -> -inf.
template <typename Scalar>
Scalar generalized_mean(std::span<const Scalar> values, Scalar alpha,
                        Scalar value_floor = Scalar(1e-6)) {
  if (values.empty()) throw std::domain_error("generalized_mean: empty value list");
  if (alpha == Scalar(0)) throw std::domain_error("generalized_mean: alpha = 0 unsupported");
  Scalar acc = 0;
  for (Scalar v : values) acc += std::pow(std::max(v, value_floor), alpha);
  return std::pow(acc / Scalar(values.size()), Scalar(1) / alpha);
}

namespace detail {

template <typename Scalar>
void validate_whd_inputs(const ProbMap<Scalar>& p, const PointList<Scalar>& gt,
                         const WhdParamsT<Scalar>& params) {
  require(p.size() > 0, "whd: empty map");
  require(params.epsilon > Scalar(0), "whd: epsilon must be positive");
  require(params.alpha != Scalar(0), "whd: alpha must be nonzero");
  require(params.value_floor > Scalar(0), "whd: value_floor must be positive");
  const GridDomain dom = domain_of(p);
  for (const auto& y : gt) {
    if (!y.allFinite() || !dom.contains(y))
      throw std::domain_error("whd: ground-truth point outside map domain");
  }
  if ((p < Scalar(0)).any() || (p > Scalar(1)).any())
    throw std::invalid_argument("whd: map values must lie in [0, 1]");
}

/// Distance from every pixel center (integer coordinates) to the point y.
template <typename Scalar>
Grid<Scalar> pixel_distances(Index height, Index width, const Point2<Scalar>& y) {
  Grid<Scalar> d(height, width);
  for (Index row = 0; row < height; ++row) {
    const Scalar dy = Scalar(row) - y.y();
    for (Index col = 0; col < width; ++col) {
      const Scalar dx = Scalar(col) - y.x();
      d(row, col) = std::sqrt(dx * dx + dy * dy);
    }
  }
  return d;
}

/// min over the ground truth of the pixel-to-point distance; d_max when the
/// ground truth is empty.
template <typename Scalar>
Grid<Scalar> min_distance_map(Index height, Index width, const PointList<Scalar>& gt,
                              Scalar d_max) {
  Grid<Scalar> m = Grid<Scalar>::Constant(height, width, d_max);
  for (const auto& y : gt) m = m.min(pixel_distances<Scalar>(height, width, y));
  return m;
}

}  // namespace detail

/// Weighted Hausdorff distance between an activation map and a point set.
///
/// First term: (1 / (S + eps)) * sum_x p_x * min_y d(x, y) with S = sum_x p_x.
/// Second term: (1/|Y|) * sum_y M_alpha over x of [p_x d(x,y) + (1-p_x) d_max].
/// An empty ground truth drops the second term and saturates min_y d at d_max,
/// so any activation on an empty crop is penalized at full distance.
template <typename Scalar>
Scalar whd(const ProbMap<Scalar>& p, const PointList<Scalar>& gt,
           const WhdParamsT<Scalar>& params = {}) {
  detail::validate_whd_inputs(p, gt, params);
  const Index h = p.rows(), w = p.cols();
  const Scalar d_max = params.effective_d_max(domain_of(p));
  const Scalar n_pixels = Scalar(p.size());

  const Grid<Scalar> m = detail::min_distance_map<Scalar>(h, w, gt, d_max);
  const Scalar S = p.sum();
  const Scalar term1 = (p * m).sum() / (S + params.epsilon);

  Scalar term2 = 0;
  const Scalar inv_alpha = Scalar(1) / params.alpha;
  for (const auto& y : gt) {
    const Grid<Scalar> d = detail::pixel_distances<Scalar>(h, w, y);
    const Grid<Scalar> f = (d_max + p * (d - d_max)).max(params.value_floor);
    const Scalar mean_pow = f.pow(params.alpha).sum() / n_pixels;
    term2 += std::pow(mean_pow, inv_alpha);
  }
  if (!gt.empty()) term2 /= Scalar(gt.size());

  const Scalar loss = term1 + term2;
  if (!std::isfinite(loss)) throw NumericError("whd: non-finite loss");
  return loss;
}

/// Loss together with its analytic gradient d(loss)/d(p_x). The clamp at
/// value_floor acts as a stop-gradient where it is active.
template <typename Scalar>
std::pair<Scalar, GradMap<Scalar>> whd_gradient(const ProbMap<Scalar>& p,
                                                const PointList<Scalar>& gt,
                                                const WhdParamsT<Scalar>& params = {}) {
  detail::validate_whd_inputs(p, gt, params);
  const Index h = p.rows(), w = p.cols();
  const Scalar d_max = params.effective_d_max(domain_of(p));
  const Scalar n_pixels = Scalar(p.size());

  const Grid<Scalar> m = detail::min_distance_map<Scalar>(h, w, gt, d_max);
  const Scalar S = p.sum();
  const Scalar denom = S + params.epsilon;
  const Scalar num1 = (p * m).sum();
  const Scalar term1 = num1 / denom;

  // d(term1)/dp_x = m_x / (S+eps) - num1 / (S+eps)^2
  Grid<Scalar> grad = m / denom - num1 / (denom * denom);

  Scalar term2 = 0;
  if (!gt.empty()) {
    const Scalar inv_count = Scalar(1) / Scalar(gt.size());
    const Scalar inv_alpha = Scalar(1) / params.alpha;
    for (const auto& y : gt) {
      const Grid<Scalar> d = detail::pixel_distances<Scalar>(h, w, y);
      const Grid<Scalar> f_raw = d_max + p * (d - d_max);
      const Grid<Scalar> f = f_raw.max(params.value_floor);
      const Grid<Scalar> f_pow = f.pow(params.alpha);
      const Scalar mean_pow = f_pow.sum() / n_pixels;
      const Scalar gmean = std::pow(mean_pow, inv_alpha);
      term2 += gmean * inv_count;
      // dM/df_x = M^(1-alpha) * f_x^(alpha-1) / |Omega|, zero where clamped.
      const Scalar outer = std::pow(gmean, Scalar(1) - params.alpha) / n_pixels;
      grad += (f_raw > params.value_floor)
                  .select(Grid<Scalar>(inv_count * outer * (f_pow / f) * (d - d_max)),
                          Grid<Scalar>::Zero(h, w));
    }
  }

  const Scalar loss = term1 + term2;
  if (!std::isfinite(loss) || !grad.allFinite())
    throw NumericError("whd_gradient: non-finite result");
  return {loss, std::move(grad)};
}

/// Symmetric average Hausdorff distance between two point sets. Undefined
/// (nullopt) when either set is empty; callers substitute d_max.
template <typename Scalar>
std::optional<Scalar> average_hausdorff(const PointList<Scalar>& a, const PointList<Scalar>& b) {
  if (a.empty() || b.empty()) return std::nullopt;
  auto directed = [](const PointList<Scalar>& from, const PointList<Scalar>& to) {
    Scalar acc = 0;
    for (const auto& p : from) {
      Scalar best = std::numeric_limits<Scalar>::infinity();
      for (const auto& q : to) best = std::min(best, euclidean_distance(p, q));
      acc += best;
    }
    return acc / Scalar(from.size());
  };
  return directed(a, b) + directed(b, a);
}

}  // namespace hausloc
