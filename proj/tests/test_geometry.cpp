#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cvt/geometry.hpp"
#include "cvt/tensor.hpp"

using namespace cvt;

namespace {

CameraCalib canonical_camera() {
  CameraCalib c;
  c.K = Mat3::identity();
  c.R = Mat3::identity();
  c.t = {0, 0, 0};
  return c;
}

// Random valid calibration: positive focals, orthonormal R from composed
// rotations, arbitrary origin.
CameraCalib random_calib(Rng& rng) {
  CameraCalib c;
  c.K = Mat3::identity();
  c.K(0, 0) = rng.uniform(50, 500);
  c.K(1, 1) = rng.uniform(50, 500);
  c.K(0, 2) = rng.uniform(-100, 100);
  c.K(1, 2) = rng.uniform(-100, 100);
  const double yaw = rng.uniform(0, 2 * M_PI);
  const double pitch = rng.uniform(-0.8, 0.8);
  const Vec3 view{std::cos(pitch) * std::cos(yaw), std::cos(pitch) * std::sin(yaw),
                  -std::sin(pitch)};
  const Vec3 right = Vec3{std::sin(yaw), -std::cos(yaw), 0.0};
  const Vec3 down = view.cross(right);
  c.R = Mat3::from_rows(right, down, view);
  c.t = {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.5, 3)};
  return c;
}

double angle_between(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

// Independent point-in-oriented-rectangle oracle built on corner
// half-planes (winding normalized by the signed area).
bool in_box_oracle(const OrientedBox& box, double px, double py) {
  const auto corners = box.corners();
  double area2 = 0;
  for (int k = 0; k < 4; ++k) {
    const auto& a = corners[k];
    const auto& b = corners[(k + 1) % 4];
    area2 += a[0] * b[1] - b[0] * a[1];
  }
  const double sign = area2 >= 0 ? 1.0 : -1.0;
  for (int k = 0; k < 4; ++k) {
    const auto& a = corners[k];
    const auto& b = corners[(k + 1) % 4];
    const double cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
    if (sign * cross < 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("project_point canonical and translated cameras") {
  auto cam = canonical_camera();
  const auto p = project_point(cam, {0, 0, 1});
  REQUIRE(!p.behind);
  CHECK(p.pixel.u == doctest::Approx(0));
  CHECK(p.pixel.v == doctest::Approx(0));

  cam.t = {0, 0, -1};
  const auto q = project_point(cam, {0, 0, 1});
  REQUIRE(!q.behind);
  CHECK(q.pixel.u == doctest::Approx(0));
  CHECK(q.pixel.v == doctest::Approx(0));
  CHECK(q.depth == doctest::Approx(2.0));

  const auto behind = project_point(canonical_camera(), {0, 0, -1});
  CHECK(behind.behind);
}

TEST_CASE("unproject_ray canonical, rotated, and round-trip") {
  auto cam = canonical_camera();
  const Vec3 d = unproject_ray(cam, {0, 0});
  CHECK(d.x == doctest::Approx(0));
  CHECK(d.y == doctest::Approx(0));
  CHECK(d.z == doctest::Approx(1));

  // yaw-pi rotation about the camera axis maps the ray to the opposite
  // heading of the explicit rotation-matrix oracle
  CameraCalib rot = canonical_camera();
  rot.R = Mat3::rotation_z(M_PI);
  const Vec3 dr = unproject_ray(rot, {0, 0});
  const Vec3 want = Mat3::rotation_z(M_PI).transposed() * Vec3{0, 0, 1};
  CHECK(std::abs(dr.x - want.x) < 1e-12);
  CHECK(std::abs(dr.y - want.y) < 1e-12);
  CHECK(std::abs(dr.z - want.z) < 1e-12);

  Rng rng(101);
  for (int rep = 0; rep < 100; ++rep) {
    const auto calib = random_calib(rng);
    REQUIRE(calib.valid());
    const PixelCoord pix{rng.uniform(-50, 50), rng.uniform(-50, 50)};
    const Vec3 ray = unproject_ray(calib, pix);
    const Vec3 h = calib.K * (calib.R * ray);  // K R d should be (u,v,1) up to scale
    CHECK(std::abs(h.x / h.z - pix.u) < 1e-9);
    CHECK(std::abs(h.y / h.z - pix.v) < 1e-9);
  }
}

TEST_CASE("project then unproject is parallel to x - t") {
  Rng rng(102);
  for (int rep = 0; rep < 1000; ++rep) {
    const auto calib = random_calib(rng);
    // point in front of the camera: along the view axis plus jitter
    const Vec3 view{calib.R(2, 0), calib.R(2, 1), calib.R(2, 2)};
    const Vec3 x = calib.t + view * rng.uniform(1.0, 30.0) +
                   Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const auto proj = project_point(calib, x);
    if (proj.behind) continue;
    const Vec3 ray = unproject_ray(calib, proj.pixel);
    CHECK(angle_between(ray, x - calib.t) < 1e-9);
  }
}

TEST_CASE("geometric_similarity collinear, anti-parallel, degenerate") {
  Rng rng(103);
  for (int rep = 0; rep < 50; ++rep) {
    const auto calib = random_calib(rng);
    const PixelCoord pix{rng.uniform(-20, 20), rng.uniform(-20, 20)};
    const Vec3 d = unproject_ray(calib, pix);
    const double lambda = rng.uniform(0.1, 10.0);
    CHECK(geometric_similarity(calib, pix, calib.t + d * lambda) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(geometric_similarity(calib, pix, calib.t - d * lambda) == doctest::Approx(-1.0).epsilon(1e-9));
  }
  const auto cam = canonical_camera();
  CHECK_THROWS_AS(geometric_similarity(cam, {1, 2}, cam.t), std::invalid_argument);
}

TEST_CASE("geometric_similarity invariant to homogeneous pixel scale") {
  Rng rng(104);
  for (int rep = 0; rep < 100; ++rep) {
    const auto calib = random_calib(rng);
    const PixelCoord pix{rng.uniform(-30, 30), rng.uniform(-30, 30)};
    const Vec3 x{rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-3, 8)};
    const double got = geometric_similarity(calib, pix, x);

    // oracle: same cosine computed from the scaled homogeneous vector
    const double lambda = rng.uniform(0.1, 50.0);
    const Mat3 kinv = [&] {
      const double fx = calib.K(0, 0), s = calib.K(0, 1), cx = calib.K(0, 2);
      const double fy = calib.K(1, 1), cy = calib.K(1, 2);
      Mat3 inv;
      inv.m = {1 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy),
               0, 1 / fy, -cy / fy,
               0, 0, 1};
      return inv;
    }();
    const Vec3 scaled = calib.R.transposed() * (kinv * Vec3{lambda * pix.u, lambda * pix.v, lambda});
    const Vec3 w = x - calib.t;
    const double oracle = scaled.dot(w) / (scaled.norm() * w.norm());
    CHECK(std::abs(got - oracle) < 1e-12);
  }
}

TEST_CASE("geometric_similarity invariant to world isometries") {
  Rng rng(105);
  for (int rep = 0; rep < 100; ++rep) {
    const auto calib = random_calib(rng);
    const PixelCoord pix{rng.uniform(-30, 30), rng.uniform(-30, 30)};
    const Vec3 x{rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-3, 8)};
    const double base = geometric_similarity(calib, pix, x);

    // rigid transform: rotate about z by a random angle, then translate
    const Mat3 Q = Mat3::rotation_z(rng.uniform(0, 2 * M_PI));
    const Vec3 b{rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-2, 2)};
    CameraCalib moved = calib;
    moved.R = calib.R * Q.transposed();
    moved.t = Q * calib.t + b;
    const double transformed = geometric_similarity(moved, pix, Q * x + b);
    CHECK(std::abs(base - transformed) < 1e-9);
  }
}

TEST_CASE("map_grid_centers paper resolutions and 1x1 grid") {
  const auto setting2 = map_grid_centers(100, 100, 200, 200);
  CHECK(setting2.cell_size_x() == doctest::Approx(0.5));
  CHECK(setting2.cell_size_y() == doctest::Approx(0.5));

  const auto setting1 = map_grid_centers(100, 50, 400, 200);
  CHECK(setting1.cell_size_x() == doctest::Approx(0.25));
  CHECK(setting1.cell_size_y() == doctest::Approx(0.25));

  const auto tiny = map_grid_centers(10, 10, 1, 1);
  CHECK(tiny.center_x(0, 0) == doctest::Approx(0.0));
  CHECK(tiny.center_y(0, 0) == doctest::Approx(0.0));

  // center cell within one cell size of the origin
  const auto g = map_grid_centers(32, 32, 64, 64);
  CHECK(std::abs(g.center_x(32, 32)) <= g.cell_size_x());
  CHECK(std::abs(g.center_y(32, 32)) <= g.cell_size_y());

  CHECK_THROWS_AS(map_grid_centers(-1, 10, 4, 4), std::invalid_argument);
  CHECK_THROWS_AS(map_grid_centers(10, 10, 0, 4), std::invalid_argument);
}

TEST_CASE("rasterize_boxes: empty, axis-aligned count, rotated oracle") {
  const auto grid = map_grid_centers(32, 32, 64, 64);
  CHECK_THROWS_AS(rasterize_boxes(grid, {}, 5), std::invalid_argument);

  const auto empty = rasterize_boxes(grid, {}, 0);
  for (auto v : empty) CHECK(v == 0);

  // 4m x 2m box at the origin on a 0.5 m grid: exactly 8 x 4 cells
  OrientedBox box{0, 0, 2.0, 1.0, 0.0, 1.5};
  const auto mask = rasterize_boxes(grid, {box}, 0);
  int count = 0;
  for (auto v : mask) count += v;
  CHECK(count == 32);

  OrientedBox rot{1.3, -2.1, 2.0, 1.0, M_PI / 4, 1.5};
  const auto rmask = rasterize_boxes(grid, {rot}, 0);
  for (int i = 0; i < grid.h; ++i)
    for (int j = 0; j < grid.w; ++j) {
      const bool want = in_box_oracle(rot, grid.center_x(i, j), grid.center_y(i, j));
      CHECK(static_cast<bool>(rmask[i * grid.w + j]) == want);
    }
}

TEST_CASE("rasterize_boxes matches the oracle bit-exactly on random boxes") {
  const auto grid = map_grid_centers(32, 32, 48, 48);
  Rng rng(106);
  for (int rep = 0; rep < 100; ++rep) {
    OrientedBox box;
    box.cx = rng.uniform(-14, 14);
    box.cy = rng.uniform(-14, 14);
    box.half_x = rng.uniform(0.5, 3.0);
    box.half_y = rng.uniform(0.5, 2.0);
    box.yaw = rng.uniform(0, 2 * M_PI);
    const auto mask = rasterize_boxes(grid, {box}, 0);
    for (int i = 0; i < grid.h; ++i)
      for (int j = 0; j < grid.w; ++j) {
        const bool want = in_box_oracle(box, grid.center_x(i, j), grid.center_y(i, j));
        REQUIRE(static_cast<bool>(mask[i * grid.w + j]) == want);
      }
  }
}

TEST_CASE("distance_mask endpoints and per-cell oracle") {
  const auto grid = map_grid_centers(32, 32, 64, 64);
  const auto all = distance_mask(grid, 0);
  for (auto v : all) CHECK(v == 1);

  const auto none = distance_mask(grid, 32);  // beyond the half-diagonal
  for (auto v : none) CHECK(v == 0);

  const auto ten = distance_mask(grid, 10.0);
  int count = 0, oracle_count = 0;
  for (int i = 0; i < grid.h; ++i)
    for (int j = 0; j < grid.w; ++j) {
      count += ten[i * grid.w + j];
      const double x = grid.center_x(i, j), y = grid.center_y(i, j);
      oracle_count += std::sqrt(x * x + y * y) >= 10.0;
    }
  CHECK(count == oracle_count);
  CHECK_THROWS_AS(distance_mask(grid, -1), std::invalid_argument);
}
