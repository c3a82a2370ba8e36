#pragma once

// Pinhole cameras, the map-view grid, and ground-truth rasterization.
// World frame: +x forward, +y left, +z up, ego at the origin.

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace cvt {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const;
  Vec3 normalized() const;
};

struct Mat3 {
  // row-major
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }
  static Mat3 from_rows(const Vec3& r0, const Vec3& r1, const Vec3& r2);
  static Mat3 rotation_z(double yaw);

  double operator()(int r, int c) const { return m[r * 3 + c]; }
  double& operator()(int r, int c) { return m[r * 3 + c]; }
  Vec3 operator*(const Vec3& v) const;
  Mat3 operator*(const Mat3& o) const;
  Mat3 transposed() const;
  double det() const;
};

struct PixelCoord {
  double u = 0, v = 0;  // homogeneous form (u, v, 1)
};

struct CameraCalib {
  Mat3 K;   // intrinsics, upper triangular, positive focals
  Mat3 R;   // world -> camera rotation
  Vec3 t;   // camera origin in world coordinates (meters)

  // K upper triangular with positive focals, R orthonormal with det > 0.
  bool valid(double tol = 1e-6) const;
};

// Result of projecting a world point: pixel, or Behind when the
// camera-frame depth is <= 1e-6. Behind is a value, not an error —
// attention keys for such pixels are still meaningful directions.
struct Projection {
  bool behind = false;
  PixelCoord pixel;
  double depth = 0;  // camera-frame depth
};

Projection project_point(const CameraCalib& calib, const Vec3& x_world);

// World-frame ray direction R^-1 K^-1 (u, v, 1), un-normalized.
Vec3 unproject_ray(const CameraCalib& calib, const PixelCoord& pix);

// Cosine of the angle between the pixel's ray and (x_world - t).
// Throws std::invalid_argument when x_world coincides with the camera
// origin (direction degenerate within 1e-6 m).
double geometric_similarity(const CameraCalib& calib, const PixelCoord& pix, const Vec3& x_world);

struct MapGrid {
  double extent_x = 0, extent_y = 0;  // meters
  int h = 0, w = 0;                   // cell counts (h along x, w along y)
  int channels = 0;
  std::vector<double> centers;        // h*w*2 world coords, (x, y) per cell

  double cell_size_x() const { return extent_x / h; }
  double cell_size_y() const { return extent_y / w; }
  double center_x(int i, int j) const { return centers[(i * w + j) * 2]; }
  double center_y(int i, int j) const { return centers[(i * w + j) * 2 + 1]; }
};

MapGrid map_grid_centers(double extent_x, double extent_y, int h, int w, int channels = 2);

struct OrientedBox {
  double cx = 0, cy = 0;        // footprint center, meters
  double half_x = 0, half_y = 0;  // half extents
  double yaw = 0;               // radians
  double height = 1.5;          // rendering only

  // Inclusive point-in-footprint test.
  bool contains(double px, double py) const;
  std::array<std::array<double, 2>, 4> corners() const;
};

// Cell is 1 iff its center lies inside any box footprint (inclusive).
std::vector<std::uint8_t> rasterize_boxes(const MapGrid& grid, const std::vector<OrientedBox>& boxes,
                                          int channel);

// Convex polygon footprint rasterization (used for the road corridor).
std::vector<std::uint8_t> rasterize_convex_polygon(const MapGrid& grid,
                                                   const std::vector<std::array<double, 2>>& poly);

// Cell is 1 iff its center is at least d_min from the ego origin.
std::vector<std::uint8_t> distance_mask(const MapGrid& grid, double d_min);

}  // namespace cvt
