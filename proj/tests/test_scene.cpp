#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ssdlab/eval.hpp"
#include "ssdlab/scene.hpp"

using namespace ssdlab;

TEST_CASE("canvas render stays in (0,1) and its gradient matches finite differences") {
  Rng rng(1);
  Canvas2D c = Canvas2D::init(6, 6);
  c.logits.data = 3.0 * rng.normal_mat(3, 36);
  Image r = c.render();
  CHECK(r.data.minCoeff() > 0.0);
  CHECK(r.data.maxCoeff() < 1.0);

  Mat upstream = rng.normal_mat(3, 36);
  Image dlogits = c.backward(Image(6, 6, upstream));
  const Scalar h = 1e-6;
  for (auto [ch, px] : {std::pair{0, 3}, {1, 17}, {2, 35}}) {
    const Scalar orig = c.logits.data(ch, px);
    c.logits.data(ch, px) = orig + h;
    const Scalar lp = (upstream.cwiseProduct(c.render().data)).sum();
    c.logits.data(ch, px) = orig - h;
    const Scalar lm = (upstream.cwiseProduct(c.render().data)).sum();
    c.logits.data(ch, px) = orig;
    CHECK(dlogits.data(ch, px) == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-5));
  }
}

TEST_CASE("empty grid renders the background exactly; weights in [0,1]") {
  RadianceGrid g = RadianceGrid::init(8, -60.0);  // softplus(-60) == 0 in doubles
  Camera cam;
  cam.res = 12;
  RenderOptions opts;
  opts.background = {0.3, 0.5, 0.7};
  auto out = render_grid(g, cam, opts);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) {
      CHECK(out.rgb.at(0, y, x) == doctest::Approx(0.3).epsilon(1e-12));
      CHECK(out.rgb.at(1, y, x) == doctest::Approx(0.5).epsilon(1e-12));
      CHECK(out.rgb.at(2, y, x) == doctest::Approx(0.7).epsilon(1e-12));
      CHECK(out.weight_sum.at(0, y, x) >= 0.0);
      CHECK(out.weight_sum.at(0, y, x) <= 1.0 + 1e-12);
    }
}

TEST_CASE("single voxel on the central ray matches the analytic compositing oracle") {
  // one emitting voxel at the world origin; constant red color field so the
  // pixel value is fully determined by the transmittance through the voxel
  RadianceGrid g = RadianceGrid::init(5, -60.0);
  g.color_logits.row(0).setConstant(6.0);
  g.color_logits.row(1).setConstant(-6.0);
  g.color_logits.row(2).setConstant(-6.0);
  const Scalar red = 1.0 / (1.0 + std::exp(-6.0));
  const Scalar green = 1.0 / (1.0 + std::exp(6.0));

  Camera cam;
  cam.res = 9;  // odd: center pixel ray passes exactly through the origin
  cam.elevation_deg = 0.0;
  cam.azimuth_deg = 0.0;
  RenderOptions opts;
  opts.samples_per_ray = 256;
  const int mid = 4;

  // analytic oracle: trilinear density along the center ray is a triangle of
  // height softplus(L) and base two cells, so T = exp(-softplus(L) * cell)
  const Scalar cell = 2.0 / (5 - 1);
  for (Scalar L : {2.0, 400.0}) {
    g.density_logits(0, g.cell(2, 2, 2)) = L;
    const Scalar sigma_peak = L > 30.0 ? L : std::log1p(std::exp(L));
    const Scalar T = std::exp(-sigma_peak * cell);
    auto out = render_grid(g, cam, opts);
    const Scalar expect_r = (1.0 - T) * red + T * 0.5;
    const Scalar expect_g = (1.0 - T) * green + T * 0.5;
    CHECK(out.rgb.at(0, mid, mid) == doctest::Approx(expect_r).epsilon(0.02));
    CHECK(out.rgb.at(1, mid, mid) == doctest::Approx(expect_g).epsilon(0.02));
    CHECK(out.weight_sum.at(0, mid, mid) == doctest::Approx(1.0 - T).epsilon(0.02));
  }
  // fully opaque endpoint: the pixel is exactly the voxel color
  CHECK(render_grid(g, cam, opts).rgb.at(0, mid, mid) == doctest::Approx(red).epsilon(1e-3));
}

TEST_CASE("grid renderer analytic gradients match finite differences") {
  Rng rng(7);
  RadianceGrid g = RadianceGrid::init(4, 0.0);
  g.density_logits += 0.5 * rng.normal_mat(1, 64);
  g.color_logits += 0.5 * rng.normal_mat(3, 64);

  Camera cam;
  cam.res = 6;
  cam.azimuth_deg = 33.0;
  cam.elevation_deg = 21.0;
  RenderOptions opts;
  opts.samples_per_ray = 32;

  Mat upstream = rng.normal_mat(3, 36);
  auto loss = [&]() {
    auto out = render_grid(g, cam, opts);
    return upstream.cwiseProduct(out.rgb.data).sum();
  };

  Mat d_density = Mat::Zero(1, 64), d_color = Mat::Zero(3, 64);
  render_grid_backward(g, cam, opts, Image(6, 6, upstream), d_density, d_color);

  const Scalar h = 1e-5;
  int checked = 0;
  Scalar worst_rel = 0.0;
  for (Eigen::Index i = 0; i < 64; ++i) {
    {
      const Scalar orig = g.density_logits(0, i);
      g.density_logits(0, i) = orig + h;
      const Scalar lp = loss();
      g.density_logits(0, i) = orig - h;
      const Scalar lm = loss();
      g.density_logits(0, i) = orig;
      const Scalar fd = (lp - lm) / (2 * h);
      if (std::abs(fd) > 1e-6) {
        worst_rel = std::max(worst_rel, std::abs(d_density(0, i) - fd) /
                                            std::max(std::abs(fd), std::abs(d_density(0, i))));
        ++checked;
      }
    }
    for (int ch = 0; ch < 3; ++ch) {
      const Scalar orig = g.color_logits(ch, i);
      g.color_logits(ch, i) = orig + h;
      const Scalar lp = loss();
      g.color_logits(ch, i) = orig - h;
      const Scalar lm = loss();
      g.color_logits(ch, i) = orig;
      const Scalar fd = (lp - lm) / (2 * h);
      if (std::abs(fd) > 1e-6) {
        worst_rel = std::max(worst_rel, std::abs(d_color(ch, i) - fd) /
                                            std::max(std::abs(fd), std::abs(d_color(ch, i))));
        ++checked;
      }
    }
  }
  CHECK(checked > 100);
  CHECK(worst_rel < 1e-3);
}

TEST_CASE("gradient reaches every scene parameter class on a generic scene") {
  Rng rng(4);
  RadianceGrid g = RadianceGrid::init(4, 0.5);
  Camera cam;
  cam.res = 8;
  Mat d_density = Mat::Zero(1, 64), d_color = Mat::Zero(3, 64);
  Mat upstream = Mat::Ones(3, 64);
  render_grid_backward(g, cam, RenderOptions{}, Image(8, 8, upstream), d_density, d_color);
  CHECK(d_density.cwiseAbs().maxCoeff() > 0.0);
  CHECK(d_color.cwiseAbs().maxCoeff() > 0.0);

  Canvas2D c = Canvas2D::init(4, 4);
  Image dl = c.backward(Image(4, 4, Mat::Ones(3, 16)));
  CHECK(dl.data.cwiseAbs().minCoeff() > 0.0);
}

TEST_CASE("render_normals: uniform density gives neutral, a +x step points to -x") {
  // uniform density: gradient 0 -> neutral 0.5 everywhere
  RadianceGrid uniform = RadianceGrid::init(8, 2.0);
  Camera cam;
  cam.res = 10;
  Image n = render_normals(uniform, cam, RenderOptions{});
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x)
      for (int c = 0; c < 3; ++c) CHECK(n.at(c, y, x) == doctest::Approx(0.5).epsilon(1e-9));

  // density step along +x: high density for ix >= 4
  RadianceGrid step = RadianceGrid::init(8, -8.0);
  for (int iz = 0; iz < 8; ++iz)
    for (int iy = 0; iy < 8; ++iy)
      for (int ix = 4; ix < 8; ++ix) step.density_logits(0, step.cell(ix, iy, iz)) = 30.0;
  Camera face_on;
  face_on.azimuth_deg = 180.0;  // looking along +x from -x side
  face_on.elevation_deg = 0.0;
  face_on.res = 9;
  Image ns = render_normals(step, face_on, RenderOptions{});
  // center pixel: decoded normal close to -x within 5 degrees
  const int mid = 4;
  const Scalar nx = 2.0 * ns.at(0, mid, mid) - 1.0;
  const Scalar ny = 2.0 * ns.at(1, mid, mid) - 1.0;
  const Scalar nz = 2.0 * ns.at(2, mid, mid) - 1.0;
  const Scalar len = std::sqrt(nx * nx + ny * ny + nz * nz);
  CHECK(len == doctest::Approx(1.0).epsilon(1e-4));
  const Scalar angle = std::acos(std::clamp(-nx / len, -1.0, 1.0)) * 180.0 / M_PI;
  CHECK(angle < 5.0);

  // foreground norms are unit within 1e-4
  int fg = 0;
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 9; ++x) {
      const Scalar vx = 2.0 * ns.at(0, y, x) - 1.0;
      const Scalar vy = 2.0 * ns.at(1, y, x) - 1.0;
      const Scalar vz = 2.0 * ns.at(2, y, x) - 1.0;
      const Scalar l = std::sqrt(vx * vx + vy * vy + vz * vz);
      if (l > 0.5) {  // foreground (neutral encodes to ~0)
        CHECK(l == doctest::Approx(1.0).epsilon(1e-4));
        ++fg;
      }
    }
  CHECK(fg > 10);

  Canvas2D canvas = Canvas2D::init(4, 4);
  CHECK_THROWS_AS(render_normals(canvas), ContractError);
}

TEST_CASE("sample_camera: determinism, bounds, uniform azimuth by chi-square") {
  CameraPolicy policy;
  policy.elevation_lo = -10.0;
  policy.elevation_hi = 45.0;

  Rng a(3), b(3);
  for (int i = 0; i < 10; ++i) {
    Camera ca = sample_camera(a, policy);
    Camera cb = sample_camera(b, policy);
    CHECK(ca.azimuth_deg == cb.azimuth_deg);
    CHECK(ca.elevation_deg == cb.elevation_deg);
    CHECK(ca.radius == cb.radius);
  }

  Rng rng(99);
  const int n = 10000, bins = 20;
  std::vector<int> hist(bins, 0);
  for (int i = 0; i < n; ++i) {
    Camera c = sample_camera(rng, policy);
    CHECK(c.elevation_deg >= -10.0);
    CHECK(c.elevation_deg <= 45.0);
    CHECK(c.radius >= policy.radius_lo);
    CHECK(c.radius <= policy.radius_hi);
    hist[static_cast<std::size_t>(std::min(bins - 1, (int)(c.azimuth_deg / 360.0 * bins)))] += 1;
  }
  Scalar chi2 = 0.0;
  const Scalar expected = static_cast<Scalar>(n) / bins;
  for (int h : hist) chi2 += (h - expected) * (h - expected) / expected;
  // 19 dof, 1% critical value
  CHECK(chi2 < 36.19);

  CameraPolicy empty;
  empty.azimuth_lo = 10.0;
  empty.azimuth_hi = 5.0;
  Rng r2(1);
  CHECK_THROWS_AS(sample_camera(r2, empty), ContractError);

  Camera degenerate;
  degenerate.radius = 0.0;
  CHECK_THROWS_AS(degenerate.ray_direction(0, 0), ContractError);
}

TEST_CASE("render determinism and silhouette consistency behavior") {
  Rng rng(12);
  RadianceGrid g = RadianceGrid::init(8, -4.0);
  // a centered blob
  for (int iz = 3; iz <= 5; ++iz)
    for (int iy = 3; iy <= 5; ++iy)
      for (int ix = 3; ix <= 5; ++ix) g.density_logits(0, g.cell(ix, iy, iz)) = 25.0;
  Camera cam;
  cam.res = 16;
  auto r1 = render_grid(g, cam, RenderOptions{});
  auto r2 = render_grid(g, cam, RenderOptions{});
  CHECK(max_abs_diff(r1.rgb, r2.rgb) == 0.0);

  const Scalar compact = silhouette_consistency(g, 6, 16);
  CHECK(compact > 0.5);

  // scattered random density: inconsistent silhouettes
  RadianceGrid scattered = RadianceGrid::init(8, -8.0);
  Rng srng(5);
  for (int i = 0; i < 40; ++i) {
    const int ix = (int)srng.uniform_int(0, 7), iy = (int)srng.uniform_int(0, 7),
              iz = (int)srng.uniform_int(0, 7);
    scattered.density_logits(0, scattered.cell(ix, iy, iz)) = 25.0;
  }
  const Scalar scattered_score = silhouette_consistency(scattered, 6, 16);
  CHECK(scattered_score < compact);

  // empty grid scores zero (empty-vs-empty counts as inconsistent)
  RadianceGrid empty = RadianceGrid::init(8, -60.0);
  CHECK(silhouette_consistency(empty, 6, 16) == 0.0);
}
