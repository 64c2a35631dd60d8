#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace hausloc {

using Index = Eigen::Index;

/// 2-D point in pixel coordinates: x = column, y = row, origin at the
/// top-left pixel center. Sub-pixel positions are allowed.
template <typename Scalar>
using Point2 = Eigen::Matrix<Scalar, 2, 1>;

template <typename Scalar>
using PointList = std::vector<Point2<Scalar>>;

/// Dense row-major grid, height rows by width columns.
template <typename Scalar>
using Grid = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-pixel activation map with values in [0, 1].
template <typename Scalar>
using ProbMap = Grid<Scalar>;

// Thrown when tensor/image shapes are incompatible. Derives from
// std::domain_error so generic handlers still catch it.
struct ShapeError : std::domain_error {
  using std::domain_error::domain_error;
};

// Thrown on malformed files (bad magic, version, truncated payload).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a computation produces non-finite values.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}
}  // namespace detail

struct GridDomain {
  Index width = 0;
  Index height = 0;

  Index size() const { return width * height; }

  /// Half-open containment: 0 <= x < width and 0 <= y < height.
  template <typename Scalar>
  bool contains(const Point2<Scalar>& p) const {
    return p.x() >= Scalar(0) && p.x() < Scalar(width) && p.y() >= Scalar(0) &&
           p.y() < Scalar(height);
  }

  bool operator==(const GridDomain&) const = default;
};

template <typename Scalar>
GridDomain domain_of(const Grid<Scalar>& g) {
  return GridDomain{g.cols(), g.rows()};
}

/// Largest realizable distance inside the domain.
template <typename Scalar = double>
Scalar domain_diagonal(const GridDomain& d) {
  return std::sqrt(Scalar(d.width) * Scalar(d.width) + Scalar(d.height) * Scalar(d.height));
}

template <typename Scalar>
struct RgbImageT {
  Grid<Scalar> r, g, b;

  RgbImageT() = default;
  RgbImageT(Index width, Index height, Scalar fill = Scalar(0))
      : r(Grid<Scalar>::Constant(height, width, fill)),
        g(Grid<Scalar>::Constant(height, width, fill)),
        b(Grid<Scalar>::Constant(height, width, fill)) {}

  Index width() const { return r.cols(); }
  Index height() const { return r.rows(); }
  GridDomain domain() const { return GridDomain{r.cols(), r.rows()}; }

  Grid<Scalar>& channel(int c) { return c == 0 ? r : (c == 1 ? g : b); }
  const Grid<Scalar>& channel(int c) const { return c == 0 ? r : (c == 1 ? g : b); }

  bool consistent() const {
    return g.rows() == r.rows() && g.cols() == r.cols() && b.rows() == r.rows() &&
           b.cols() == r.cols();
  }
};

using RgbImage = RgbImageT<double>;

/// Image crop paired with the ground-truth centers it contains.
/// Invariant: count == centers.size() and every center lies inside the
/// image domain (half-open).
template <typename Scalar>
struct LabeledSampleT {
  RgbImageT<Scalar> image;
  PointList<Scalar> centers;
  int count = 0;
};

using LabeledSample = LabeledSampleT<double>;

template <typename Scalar>
Scalar euclidean_distance(const Point2<Scalar>& a, const Point2<Scalar>& b) {
  return (a - b).norm();
}

/// Pixel-exact crop of the rectangle [x0, x0+w) x [y0, y0+h).
template <typename Scalar>
RgbImageT<Scalar> extract_crop(const RgbImageT<Scalar>& image, Index x0, Index y0, Index w,
                               Index h) {
  detail::require(w >= 1 && h >= 1, "extract_crop: empty rectangle");
  if (x0 < 0 || y0 < 0 || x0 + w > image.width() || y0 + h > image.height())
    throw std::domain_error("extract_crop: rectangle outside image domain");
  RgbImageT<Scalar> out;
  out.r = image.r.block(y0, x0, h, w);
  out.g = image.g.block(y0, x0, h, w);
  out.b = image.b.block(y0, x0, h, w);
  return out;
}

/// Crop of a labeled sample. Points inside the rectangle are kept and
/// translated to crop coordinates; points on the right/bottom edge are
/// excluded (half-open rectangle).
template <typename Scalar>
LabeledSampleT<Scalar> extract_crop(const RgbImageT<Scalar>& image,
                                    const PointList<Scalar>& centers, Index x0, Index y0,
                                    Index w, Index h) {
  LabeledSampleT<Scalar> out;
  out.image = extract_crop(image, x0, y0, w, h);
  for (const auto& p : centers) {
    if (p.x() >= Scalar(x0) && p.x() < Scalar(x0 + w) && p.y() >= Scalar(y0) &&
        p.y() < Scalar(y0 + h)) {
      out.centers.emplace_back(p.x() - Scalar(x0), p.y() - Scalar(y0));
    }
  }
  out.count = static_cast<int>(out.centers.size());
  return out;
}

template <typename Scalar>
LabeledSampleT<Scalar> extract_crop(const LabeledSampleT<Scalar>& sample, Index x0, Index y0,
                                    Index w, Index h) {
  return extract_crop(sample.image, sample.centers, x0, y0, w, h);
}

}  // namespace hausloc
