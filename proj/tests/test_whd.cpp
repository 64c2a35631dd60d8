#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hausloc/whd.hpp"
#include "test_support.hpp"

using namespace hausloc;

TEST_CASE("generalized_mean hand cases") {
  const std::vector<double> two{2.0, 4.0};
  CHECK(generalized_mean<double>(two, -1.0) == doctest::Approx(8.0 / 3.0).epsilon(1e-12));

  const std::vector<double> one{5.0};
  for (double a : {-20.0, -1.0, 0.5, 1.0, 3.0})
    CHECK(generalized_mean<double>(one, a) == doctest::Approx(5.0).epsilon(1e-12));

  const std::vector<double> three{1.0, 2.0, 9.0};
  CHECK(generalized_mean<double>(three, 1.0) == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("generalized_mean approaches the minimum as alpha decreases") {
  // Exact value for {2,4,8} at alpha=-20, recomputed here in long double:
  // ((2^-20 + 4^-20 + 8^-20)/3)^(-1/20) = 2.112987...; the overshoot over
  // the true minimum is bounded by |A|^(-1/alpha) = 3^(1/20).
  const std::vector<double> vals{2.0, 4.0, 8.0};
  long double acc = 0.0L;
  for (double v : vals) acc += std::pow((long double)v, -20.0L);
  const double exact = double(std::pow(acc / 3.0L, -1.0L / 20.0L));
  const double got = generalized_mean<double>(vals, -20.0);
  CHECK(got == doctest::Approx(exact).epsilon(1e-12));
  CHECK(got >= 2.0);
  CHECK(got <= 2.0 * std::pow(3.0, 1.0 / 20.0) * (1.0 + 1e-9));

  // |M_alpha - min| shrinks monotonically through -1, -5, -20.
  Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v;
    const int n = int(rng.uniform_int(2, 12));
    for (int i = 0; i < n; ++i) v.push_back(rng.uniform(0.3, 9.0));
    const double mn = *std::min_element(v.begin(), v.end());
    double prev = std::numeric_limits<double>::infinity();
    for (double a : {-1.0, -5.0, -20.0}) {
      const double gap = std::abs(generalized_mean<double>(v, a) - mn);
      CHECK(gap <= prev + 1e-12);
      prev = gap;
    }
  }
}

TEST_CASE("generalized_mean rejects bad inputs") {
  std::vector<double> empty;
  CHECK_THROWS_AS(generalized_mean<double>(empty, -1.0), std::domain_error);
  std::vector<double> v{1.0, 2.0};
  CHECK_THROWS_AS(generalized_mean<double>(v, 0.0), std::domain_error);
}

TEST_CASE("whd perfect single-pixel detection is (numerically) zero") {
  ProbMap<double> p = Grid<double>::Constant(1, 1, 1.0);
  PointList<double> gt{{0.0, 0.0}};
  // The value-floor clamp leaves a residual of at most value_floor.
  CHECK(whd(p, gt) <= 2e-6);
  CHECK(whd(p, gt) >= 0.0);
}

TEST_CASE("whd matches the direct-summation oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const Index h = Index(rng.uniform_int(1, 6)), w = Index(rng.uniform_int(1, 6));
    const auto p = oracle::random_map(rng, h, w);
    const auto gt = oracle::random_points(rng, int(rng.uniform_int(1, 3)), double(w) - 1e-9,
                                          double(h) - 1e-9);
    WhdParams params;
    const double d_max = params.effective_d_max(domain_of(p));
    const double expect =
        oracle::whd_direct(p, gt, params.epsilon, params.alpha, d_max, params.value_floor);
    CHECK(whd(p, gt, params) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("whd on an all-zero map reduces to d_max") {
  ProbMap<double> p = Grid<double>::Zero(4, 4);
  PointList<double> gt{{1.0, 2.0}};
  WhdParams params;
  const double d_max = params.effective_d_max(domain_of(p));
  // term1 = 0 and M_alpha of the constant d_max is d_max itself.
  CHECK(whd(p, gt, params) == doctest::Approx(d_max).epsilon(1e-12));
}

TEST_CASE("whd rejects out-of-domain ground truth and bad maps") {
  ProbMap<double> p = Grid<double>::Constant(4, 4, 0.5);
  CHECK_THROWS_AS(whd(p, PointList<double>{{4.0, 1.0}}), std::domain_error);
  CHECK_THROWS_AS(whd(p, PointList<double>{{-0.1, 1.0}}), std::domain_error);
  ProbMap<double> bad = Grid<double>::Constant(2, 2, 1.5);
  CHECK_THROWS_AS(whd(bad, PointList<double>{{0.0, 0.0}}), std::invalid_argument);
}

TEST_CASE("whd is nonnegative on random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Index h = Index(rng.uniform_int(1, 10)), w = Index(rng.uniform_int(1, 10));
    const auto p = oracle::random_map(rng, h, w, 0.0, 1.0);
    const auto gt = oracle::random_points(rng, int(rng.uniform_int(0, 3)), double(w) - 1e-9,
                                          double(h) - 1e-9);
    CHECK(whd(p, gt) >= 0.0);
  }
}

TEST_CASE("raising activation far from ground truth never lowers the term1 numerator") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = oracle::random_map(rng, 8, 8, 0.05, 0.9);
    const PointList<double> gt{{1.0, 1.0}, {2.5, 6.0}};
    auto numerator = [&](const Grid<double>& map) {
      double acc = 0.0;
      for (Index i = 0; i < map.rows(); ++i)
        for (Index j = 0; j < map.cols(); ++j) {
          double best = std::numeric_limits<double>::infinity();
          for (const auto& y : gt) {
            const double dx = double(j) - y.x(), dy = double(i) - y.y();
            best = std::min(best, std::sqrt(dx * dx + dy * dy));
          }
          acc += map(i, j) * best;
        }
      return acc;
    };
    // Pixel (7,7) is the farthest from both ground-truth points here.
    const double before = numerator(p);
    p(7, 7) += 0.05;
    CHECK(numerator(p) >= before - 1e-15);
  }
}

TEST_CASE("whd_gradient matches central finite differences") {
  Rng rng(99);
  WhdParams params;
  for (int trial = 0; trial < 10; ++trial) {
    const Index h = Index(rng.uniform_int(2, 8)), w = Index(rng.uniform_int(2, 8));
    const auto p = oracle::random_map(rng, h, w);
    const auto gt = oracle::random_points(rng, int(rng.uniform_int(1, 3)), double(w) - 1e-9,
                                          double(h) - 1e-9);
    const auto [loss, grad] = whd_gradient(p, gt, params);
    CHECK(loss == doctest::Approx(whd(p, gt, params)).epsilon(1e-14));
    const auto fd = oracle::fd_map_gradient(
        p, [&](const Grid<double>& q) { return whd(q, gt, params); }, 1e-5);
    CHECK(oracle::max_rel_error(grad, fd) < 1e-4);
  }
}

TEST_CASE("whd_gradient keeps the mirror symmetry of a symmetric configuration") {
  // Constant map, single point at the exact center of an odd-sized grid.
  ProbMap<double> p = Grid<double>::Constant(5, 5, 0.4);
  PointList<double> gt{{2.0, 2.0}};
  const auto [loss, grad] = whd_gradient(p, gt);
  (void)loss;
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 5; ++j) {
      CHECK(grad(i, j) == doctest::Approx(grad(4 - i, j)).epsilon(1e-12));
      CHECK(grad(i, j) == doctest::Approx(grad(i, 4 - j)).epsilon(1e-12));
      CHECK(grad(i, j) == doctest::Approx(grad(j, i)).epsilon(1e-12));
    }
}

TEST_CASE("whd_gradient closed form on an all-zero map") {
  // With p = 0: S = 0, so the term1 gradient is m_x / epsilon; the second
  // term sits at the constant d_max, giving (d_xy - d_max) / |Omega| per
  // ground-truth point.
  ProbMap<double> p = Grid<double>::Zero(3, 4);
  PointList<double> gt{{1.0, 1.0}};
  WhdParams params;
  const double d_max = params.effective_d_max(domain_of(p));
  const auto [loss, grad] = whd_gradient(p, gt, params);
  CHECK(loss == doctest::Approx(d_max).epsilon(1e-12));
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 4; ++j) {
      const double dx = double(j) - 1.0, dy = double(i) - 1.0;
      const double d = std::sqrt(dx * dx + dy * dy);
      const double expect = d / params.epsilon + (d - d_max) / 12.0;
      CHECK(grad(i, j) == doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("value_floor clamp stops the term2 gradient at a perfect detection") {
  // p = 1 exactly at the ground-truth pixel clamps f = p*0 + (1-p)*d_max to
  // the floor, so only term1 contributes to the gradient there.
  ProbMap<double> p = Grid<double>::Constant(3, 3, 0.3);
  p(1, 1) = 1.0;
  PointList<double> gt{{1.0, 1.0}};
  WhdParams params;
  const auto [loss, grad] = whd_gradient(p, gt, params);
  (void)loss;
  double s = 0.0, num = 0.0;
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j) {
      const double dx = double(j) - 1.0, dy = double(i) - 1.0;
      s += p(i, j);
      num += p(i, j) * std::sqrt(dx * dx + dy * dy);
    }
  const double denom = s + params.epsilon;
  CHECK(grad(1, 1) == doctest::Approx(0.0 / denom - num / (denom * denom)).epsilon(1e-12));
}

TEST_CASE("average_hausdorff basics and oracle") {
  PointList<double> a{{0.0, 0.0}, {2.0, 5.0}};
  CHECK(average_hausdorff(a, a).value() == 0.0);

  PointList<double> one{{0.0, 0.0}}, other{{3.0, 4.0}};
  CHECK(average_hausdorff(one, other).value() == doctest::Approx(10.0).epsilon(1e-12));

  CHECK(!average_hausdorff(PointList<double>{}, one).has_value());
  CHECK(!average_hausdorff(one, PointList<double>{}).has_value());

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = oracle::random_points(rng, 5, 30.0, 20.0);
    const auto y = oracle::random_points(rng, 7, 30.0, 20.0);
    const double expect = oracle::ahd_direct(x, y);
    CHECK(average_hausdorff(x, y).value() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(average_hausdorff(x, y).value() ==
          doctest::Approx(average_hausdorff(y, x).value()).epsilon(1e-13));
  }
}

TEST_CASE("whd works with float scalars") {
  ProbMap<float> p = Grid<float>::Constant(4, 4, 0.5f);
  PointList<float> gt{{1.0f, 2.0f}};
  WhdParamsT<float> params;
  CHECK(whd(p, gt, params) > 0.0f);
  const std::vector<float> v{2.0f, 4.0f};
  CHECK(generalized_mean<float>(v, -1.0f) == doctest::Approx(8.0f / 3.0f).epsilon(1e-6));
}
