#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "hausloc/core.hpp"
#include "hausloc/rng.hpp"

namespace hausloc {

/// Procedural crop-field model: plants on a jittered row grid over a noisy
/// soil background, with an optional flightline banding pattern.
template <typename Scalar>
struct FieldConfigT {
  Index field_width = 1024;
  Index field_height = 512;
  std::array<Scalar, 3> soil_base_color{Scalar(0.42), Scalar(0.33), Scalar(0.24)};
  Scalar soil_noise_amplitude = Scalar(0.05);
  Scalar row_spacing = Scalar(44);
  Scalar in_row_spacing = Scalar(30);
  Scalar spacing_jitter = Scalar(2.5);  // std dev, pixels
  Scalar plant_radius_min = Scalar(4);
  Scalar plant_radius_max = Scalar(8);
  std::array<Scalar, 3> plant_color{Scalar(0.20), Scalar(0.55), Scalar(0.16)};
  int lobe_count_min = 4;
  int lobe_count_max = 7;
  Scalar emergence_rate = Scalar(0.9);
  bool flightline_banding = false;
  Scalar band_intensity_delta = Scalar(0.03);
};

using FieldConfig = FieldConfigT<double>;

struct Rect {
  Index x0 = 0, y0 = 0, w = 0, h = 0;
  bool operator==(const Rect&) const = default;
};

struct RegionSplit {
  Rect train_region, val_region, test_region;
};

namespace detail {

/// Smooth value noise in [-1, 1]: a coarse random lattice, bilinearly
/// interpolated.
template <typename Scalar>
Grid<Scalar> value_noise(Index height, Index width, Index cell, Rng& rng) {
  const Index gh = height / cell + 2, gw = width / cell + 2;
  Grid<Scalar> lattice(gh, gw);
  for (Index i = 0; i < gh; ++i)
    for (Index j = 0; j < gw; ++j) lattice(i, j) = Scalar(rng.uniform(-1.0, 1.0));
  Grid<Scalar> out(height, width);
  for (Index i = 0; i < height; ++i) {
    const Scalar fy = Scalar(i) / Scalar(cell);
    const Index y0 = Index(fy);
    const Scalar ty = fy - Scalar(y0);
    for (Index j = 0; j < width; ++j) {
      const Scalar fx = Scalar(j) / Scalar(cell);
      const Index x0 = Index(fx);
      const Scalar tx = fx - Scalar(x0);
      const Scalar top = lattice(y0, x0) * (1 - tx) + lattice(y0, x0 + 1) * tx;
      const Scalar bot = lattice(y0 + 1, x0) * (1 - tx) + lattice(y0 + 1, x0 + 1) * tx;
      out(i, j) = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

template <typename Scalar>
void draw_plant(RgbImageT<Scalar>& img, const Point2<Scalar>& center, Scalar radius, int lobes,
                Scalar phase, const std::array<Scalar, 3>& color) {
  const Index x_lo = std::max<Index>(0, Index(std::floor(center.x() - radius - 1)));
  const Index x_hi = std::min<Index>(img.width() - 1, Index(std::ceil(center.x() + radius + 1)));
  const Index y_lo = std::max<Index>(0, Index(std::floor(center.y() - radius - 1)));
  const Index y_hi = std::min<Index>(img.height() - 1, Index(std::ceil(center.y() + radius + 1)));
  for (Index i = y_lo; i <= y_hi; ++i) {
    for (Index j = x_lo; j <= x_hi; ++j) {
      const Scalar dx = Scalar(j) - center.x(), dy = Scalar(i) - center.y();
      const Scalar dist = std::sqrt(dx * dx + dy * dy);
      const Scalar theta = std::atan2(dy, dx);
      // Lobed radial profile: L petals around the center.
      const Scalar lobe = std::abs(std::cos(Scalar(lobes) * (theta - phase) / 2));
      const Scalar r_theta = radius * (Scalar(0.5) + Scalar(0.5) * lobe);
      const Scalar alpha =
          std::clamp(r_theta - dist + Scalar(0.5), Scalar(0), Scalar(1)) * Scalar(0.92);
      if (alpha <= 0) continue;
      for (int c = 0; c < 3; ++c) {
        Scalar& px = img.channel(c)(i, j);
        px = std::clamp(px * (1 - alpha) + color[std::size_t(c)] * alpha, Scalar(0), Scalar(1));
      }
    }
  }
}

}  // namespace detail

/// Renders one field and the centers of every emerged plant. Deterministic
/// for a given (config, seed).
template <typename Scalar>
std::pair<RgbImageT<Scalar>, PointList<Scalar>> generate_field(const FieldConfigT<Scalar>& cfg,
                                                               std::uint64_t seed) {
  detail::require(cfg.field_width >= 1 && cfg.field_height >= 1, "generate_field: empty field");
  detail::require(cfg.row_spacing > 0 && cfg.in_row_spacing > 0,
                  "generate_field: spacings must be positive");
  detail::require(cfg.plant_radius_min > 0 && cfg.plant_radius_max >= cfg.plant_radius_min,
                  "generate_field: bad radius range");
  detail::require(cfg.emergence_rate >= 0 && cfg.emergence_rate <= 1,
                  "generate_field: emergence_rate outside [0, 1]");
  detail::require(cfg.lobe_count_min >= 1 && cfg.lobe_count_max >= cfg.lobe_count_min,
                  "generate_field: bad lobe range");
  const Index rows = Index(std::floor(Scalar(cfg.field_height) / cfg.row_spacing));
  const Index cols = Index(std::floor(Scalar(cfg.field_width) / cfg.in_row_spacing));
  if (rows < 1 || cols < 1)
    throw std::domain_error("generate_field: spacing leaves no grid positions");

  Rng rng(seed);
  RgbImageT<Scalar> img(cfg.field_width, cfg.field_height);
  const auto noise = detail::value_noise<Scalar>(cfg.field_height, cfg.field_width, 32, rng);
  constexpr Index kBandWidth = 96;
  for (Index i = 0; i < cfg.field_height; ++i)
    for (Index j = 0; j < cfg.field_width; ++j) {
      Scalar lum = cfg.soil_noise_amplitude * noise(i, j);
      if (cfg.flightline_banding && ((j / kBandWidth) % 2 == 1))
        lum += cfg.band_intensity_delta;
      for (int c = 0; c < 3; ++c)
        img.channel(c)(i, j) =
            std::clamp(cfg.soil_base_color[std::size_t(c)] + lum, Scalar(0), Scalar(1));
    }

  PointList<Scalar> centers;
  const GridDomain dom = img.domain();
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      if (!rng.bernoulli(double(cfg.emergence_rate))) continue;
      const Scalar cx =
          (Scalar(c) + Scalar(0.5)) * cfg.in_row_spacing + Scalar(rng.normal(0, double(cfg.spacing_jitter)));
      const Scalar cy =
          (Scalar(r) + Scalar(0.5)) * cfg.row_spacing + Scalar(rng.normal(0, double(cfg.spacing_jitter)));
      const Scalar radius = Scalar(rng.uniform(double(cfg.plant_radius_min), double(cfg.plant_radius_max)));
      const int lobes = int(rng.uniform_int(cfg.lobe_count_min, cfg.lobe_count_max));
      const Scalar phase = Scalar(rng.uniform(0.0, 2.0 * std::numbers::pi));
      const Scalar tint = Scalar(1) + Scalar(0.08) * Scalar(rng.normal());
      const Point2<Scalar> center{cx, cy};
      if (!dom.contains(center)) continue;  // jittered off the field
      std::array<Scalar, 3> color;
      for (int ch = 0; ch < 3; ++ch)
        color[std::size_t(ch)] =
            std::clamp(cfg.plant_color[std::size_t(ch)] * tint, Scalar(0), Scalar(1));
      detail::draw_plant(img, center, radius, lobes, phase, color);
      centers.push_back(center);
    }
  }
  return {std::move(img), std::move(centers)};
}

/// Vertical partition into contiguous train/val/test bands matching the
/// area fractions. Bands are disjoint by construction, so crops drawn from
/// different bands can never overlap.
inline RegionSplit split_regions(Index field_width, Index field_height,
                                 std::array<double, 3> fractions, Index min_band_width = 1) {
  double sum = fractions[0] + fractions[1] + fractions[2];
  detail::require(std::abs(sum - 1.0) < 1e-9, "split_regions: fractions must sum to 1");
  const Index w_train = Index(std::llround(fractions[0] * double(field_width)));
  const Index w_val = Index(std::llround(fractions[1] * double(field_width)));
  const Index w_test = field_width - w_train - w_val;
  if (w_train < min_band_width || w_val < min_band_width || w_test < min_band_width)
    throw std::domain_error("split_regions: a band is narrower than the minimum width");
  RegionSplit s;
  s.train_region = {0, 0, w_train, field_height};
  s.val_region = {w_train, 0, w_val, field_height};
  s.test_region = {w_train + w_val, 0, w_test, field_height};
  return s;
}

namespace detail {

/// Bilinear resample to out_w x out_h under the pure-scaling map
/// out = in * (out_size / in_size), so point labels transform exactly with
/// the image content.
template <typename Scalar>
Grid<Scalar> resample_channel(const Grid<Scalar>& in, Index out_h, Index out_w) {
  const Scalar sy = Scalar(in.rows()) / Scalar(out_h);
  const Scalar sx = Scalar(in.cols()) / Scalar(out_w);
  Grid<Scalar> out(out_h, out_w);
  for (Index i = 0; i < out_h; ++i) {
    const Scalar fy = std::min(Scalar(i) * sy, Scalar(in.rows() - 1));
    const Index y0 = std::min(Index(fy), in.rows() - 1);
    const Index y1 = std::min(y0 + 1, in.rows() - 1);
    const Scalar ty = fy - Scalar(y0);
    for (Index j = 0; j < out_w; ++j) {
      const Scalar fx = std::min(Scalar(j) * sx, Scalar(in.cols() - 1));
      const Index x0 = std::min(Index(fx), in.cols() - 1);
      const Index x1 = std::min(x0 + 1, in.cols() - 1);
      const Scalar tx = fx - Scalar(x0);
      const Scalar top = in(y0, x0) * (1 - tx) + in(y0, x1) * tx;
      const Scalar bot = in(y1, x0) * (1 - tx) + in(y1, x1) * tx;
      out(i, j) = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
LabeledSampleT<Scalar> resample_sample(const LabeledSampleT<Scalar>& in, Index out_size) {
  LabeledSampleT<Scalar> out;
  out.image.r = detail::resample_channel(in.image.r, out_size, out_size);
  out.image.g = detail::resample_channel(in.image.g, out_size, out_size);
  out.image.b = detail::resample_channel(in.image.b, out_size, out_size);
  const Scalar sx = Scalar(out_size) / Scalar(in.image.width());
  const Scalar sy = Scalar(out_size) / Scalar(in.image.height());
  for (const auto& p : in.centers) out.centers.emplace_back(p.x() * sx, p.y() * sy);
  out.count = in.count;
  return out;
}

/// Crop rectangles for random_crops: width and height drawn independently
/// and uniformly (integers, inclusive) from [side_min, side_max], position
/// uniform inside the region. Each rectangle uses its own derived stream,
/// so generation can be parallelized per crop.
inline std::vector<Rect> sample_crop_rects(const Rect& region, int n, Index side_min,
                                           Index side_max, std::uint64_t seed) {
  detail::require(n >= 1, "sample_crop_rects: need at least one crop");
  detail::require(side_min >= 1 && side_max >= side_min, "sample_crop_rects: bad side range");
  if (side_max > region.w || side_max > region.h)
    throw std::domain_error("sample_crop_rects: side range exceeds the region");
  const Rng base(seed);
  std::vector<Rect> rects;
  rects.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    Rng rng = base.spawn(std::uint64_t(i));
    const Index w = Index(rng.uniform_int(side_min, side_max));
    const Index h = Index(rng.uniform_int(side_min, side_max));
    const Index x0 = region.x0 + Index(rng.uniform_int(0, region.w - w));
    const Index y0 = region.y0 + Index(rng.uniform_int(0, region.h - h));
    rects.push_back({x0, y0, w, h});
  }
  return rects;
}

/// Random crops from one region, resampled to out_size x out_size with
/// labels scaled by the same transform. Crops may overlap each other.
template <typename Scalar>
std::vector<LabeledSampleT<Scalar>> random_crops(const RgbImageT<Scalar>& field,
                                                 const PointList<Scalar>& centers,
                                                 const Rect& region, int n, Index side_min,
                                                 Index side_max, Index out_size,
                                                 std::uint64_t seed) {
  detail::require(out_size >= 1, "random_crops: bad output size");
  detail::require(region.x0 >= 0 && region.y0 >= 0 &&
                      region.x0 + region.w <= field.width() &&
                      region.y0 + region.h <= field.height(),
                  "random_crops: region outside field");
  const auto rects = sample_crop_rects(region, n, side_min, side_max, seed);
  std::vector<LabeledSampleT<Scalar>> crops;
  crops.reserve(rects.size());
  for (const Rect& rc : rects)
    crops.push_back(resample_sample(extract_crop(field, centers, rc.x0, rc.y0, rc.w, rc.h),
                                    out_size));
  return crops;
}

}  // namespace hausloc
