#include "cvt/geometry.hpp"

#include <cmath>
#include <stdexcept>

namespace cvt {

double Vec3::norm() const { return std::sqrt(x * x + y * y + z * z); }

Vec3 Vec3::normalized() const {
  const double n = norm();
  if (n < 1e-12) throw std::invalid_argument("normalized: zero-length vector");
  return {x / n, y / n, z / n};
}

Mat3 Mat3::from_rows(const Vec3& r0, const Vec3& r1, const Vec3& r2) {
  Mat3 out;
  out.m = {r0.x, r0.y, r0.z, r1.x, r1.y, r1.z, r2.x, r2.y, r2.z};
  return out;
}

Mat3 Mat3::rotation_z(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Mat3 out;
  out.m = {c, -s, 0, s, c, 0, 0, 0, 1};
  return out;
}

Vec3 Mat3::operator*(const Vec3& v) const {
  return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
          m[6] * v.x + m[7] * v.y + m[8] * v.z};
}

Mat3 Mat3::operator*(const Mat3& o) const {
  Mat3 out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += m[r * 3 + k] * o.m[k * 3 + c];
      out.m[r * 3 + c] = acc;
    }
  return out;
}

Mat3 Mat3::transposed() const {
  Mat3 out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out.m[c * 3 + r] = m[r * 3 + c];
  return out;
}

double Mat3::det() const {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

bool CameraCalib::valid(double tol) const {
  if (K(0, 0) <= 0 || K(1, 1) <= 0) return false;
  if (std::abs(K(1, 0)) > tol || std::abs(K(2, 0)) > tol || std::abs(K(2, 1)) > tol) return false;
  const Mat3 rtr = R.transposed() * R;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const double want = r == c ? 1.0 : 0.0;
      if (std::abs(rtr(r, c) - want) > tol) return false;
    }
  return R.det() > 0;
}

namespace {

// K is upper triangular; invert by back substitution.
Mat3 invert_intrinsics(const Mat3& K) {
  const double fx = K(0, 0), s = K(0, 1), cx = K(0, 2);
  const double fy = K(1, 1), cy = K(1, 2);
  const double w = K(2, 2);
  if (fx == 0 || fy == 0 || w == 0) throw std::invalid_argument("calibration: singular intrinsics");
  Mat3 inv;
  inv.m = {1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy * w),
           0.0,      1.0 / fy,       -cy / (fy * w),
           0.0,      0.0,            1.0 / w};
  return inv;
}

constexpr double kDepthEps = 1e-6;

}  // namespace

Projection project_point(const CameraCalib& calib, const Vec3& x_world) {
  const Vec3 cam = calib.R * (x_world - calib.t);
  Projection out;
  out.depth = cam.z;
  if (cam.z <= kDepthEps) {
    out.behind = true;
    return out;
  }
  const Vec3 h = calib.K * cam;
  out.pixel = {h.x / h.z, h.y / h.z};
  return out;
}

Vec3 unproject_ray(const CameraCalib& calib, const PixelCoord& pix) {
  const Mat3 kinv = invert_intrinsics(calib.K);
  const Vec3 cam = kinv * Vec3{pix.u, pix.v, 1.0};
  return calib.R.transposed() * cam;
}

double geometric_similarity(const CameraCalib& calib, const PixelCoord& pix, const Vec3& x_world) {
  const Vec3 d = unproject_ray(calib, pix);
  const Vec3 w = x_world - calib.t;
  const double nw = w.norm();
  if (nw < kDepthEps)
    throw std::invalid_argument("geometric_similarity: world point coincides with camera origin");
  const double nd = d.norm();
  if (nd < kDepthEps)
    throw std::invalid_argument("geometric_similarity: degenerate ray direction");
  return d.dot(w) / (nd * nw);
}

MapGrid map_grid_centers(double extent_x, double extent_y, int h, int w, int channels) {
  if (extent_x <= 0 || extent_y <= 0 || h <= 0 || w <= 0)
    throw std::invalid_argument("map_grid_centers: extents and cell counts must be positive");
  MapGrid g;
  g.extent_x = extent_x;
  g.extent_y = extent_y;
  g.h = h;
  g.w = w;
  g.channels = channels;
  g.centers.resize(static_cast<std::size_t>(h) * w * 2);
  for (int i = 0; i < h; ++i) {
    const double x = ((i + 0.5) / h - 0.5) * extent_x;
    for (int j = 0; j < w; ++j) {
      const double y = ((j + 0.5) / w - 0.5) * extent_y;
      g.centers[(static_cast<std::size_t>(i) * w + j) * 2] = x;
      g.centers[(static_cast<std::size_t>(i) * w + j) * 2 + 1] = y;
    }
  }
  return g;
}

bool OrientedBox::contains(double px, double py) const {
  const double dx = px - cx, dy = py - cy;
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::abs(lx) <= half_x && std::abs(ly) <= half_y;
}

std::array<std::array<double, 2>, 4> OrientedBox::corners() const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  std::array<std::array<double, 2>, 4> out;
  const double sx[4] = {+1, +1, -1, -1};
  const double sy[4] = {+1, -1, -1, +1};
  for (int k = 0; k < 4; ++k) {
    const double lx = sx[k] * half_x, ly = sy[k] * half_y;
    out[k] = {cx + c * lx - s * ly, cy + s * lx + c * ly};
  }
  return out;
}

std::vector<std::uint8_t> rasterize_boxes(const MapGrid& grid, const std::vector<OrientedBox>& boxes,
                                          int channel) {
  if (channel < 0 || channel >= grid.channels)
    throw std::invalid_argument("rasterize_boxes: channel " + std::to_string(channel) +
                                " out of range for " + std::to_string(grid.channels) + " channels");
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(grid.h) * grid.w, 0);
  for (const auto& box : boxes) {
    if (box.half_x <= 0 || box.half_y <= 0)
      throw std::invalid_argument("rasterize_boxes: box half extents must be positive");
    for (int i = 0; i < grid.h; ++i)
      for (int j = 0; j < grid.w; ++j)
        if (box.contains(grid.center_x(i, j), grid.center_y(i, j)))
          mask[static_cast<std::size_t>(i) * grid.w + j] = 1;
  }
  return mask;
}

std::vector<std::uint8_t> rasterize_convex_polygon(const MapGrid& grid,
                                                   const std::vector<std::array<double, 2>>& poly) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(grid.h) * grid.w, 0);
  const std::size_t n = poly.size();
  if (n < 3) return mask;
  // Counter-clockwise winding assumed; a point is inside when it is on the
  // left of (or on) every edge.
  for (int i = 0; i < grid.h; ++i)
    for (int j = 0; j < grid.w; ++j) {
      const double px = grid.center_x(i, j), py = grid.center_y(i, j);
      bool inside = true;
      for (std::size_t k = 0; k < n && inside; ++k) {
        const auto& a = poly[k];
        const auto& b = poly[(k + 1) % n];
        const double cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
        inside = cross >= 0;
      }
      if (inside) mask[static_cast<std::size_t>(i) * grid.w + j] = 1;
    }
  return mask;
}

std::vector<std::uint8_t> distance_mask(const MapGrid& grid, double d_min) {
  if (d_min < 0) throw std::invalid_argument("distance_mask: d_min must be >= 0");
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(grid.h) * grid.w, 0);
  for (int i = 0; i < grid.h; ++i)
    for (int j = 0; j < grid.w; ++j) {
      const double x = grid.center_x(i, j), y = grid.center_y(i, j);
      if (std::sqrt(x * x + y * y) >= d_min) mask[static_cast<std::size_t>(i) * grid.w + j] = 1;
    }
  return mask;
}

}  // namespace cvt
