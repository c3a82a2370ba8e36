#pragma once

// Synthetic multi-camera scenes: box vehicles on a flat ground plane with
// a road corridor, rendered by ray casting through calibrated pinhole
// cameras. Generation is a pure function of (config, seed).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cvt/geometry.hpp"

namespace cvt {

struct RigSpec {
  int cameras = 4;
  int image_h = 64;
  int image_w = 128;
  double hfov_deg = 100.0;   // horizontal field of view
  double radius_m = 1.2;     // camera distance from the ego origin
  double height_m = 1.5;
  double pitch_deg = 12.0;   // downward tilt
};

struct SceneConfig {
  RigSpec rig;
  double extent_x = 32.0, extent_y = 32.0;
  int grid_h = 64, grid_w = 64;
  int min_boxes = 2, max_boxes = 8;
  double box_len_min = 3.0, box_len_max = 5.0;    // footprint length (x)
  double box_wid_min = 1.6, box_wid_max = 2.2;    // footprint width (y)
  double box_height = 1.5;
  double road_width_min = 6.0, road_width_max = 10.0;
  double keepout_radius = 3.0;  // no vehicles this close to the ego
  int max_place_attempts = 1000;
};

struct Scene {
  std::vector<OrientedBox> boxes;
  std::vector<std::array<double, 2>> road;  // convex polygon, CCW
  std::vector<CameraCalib> rig;
  int image_h = 0, image_w = 0;
  std::uint64_t seed = 0;
};

// Evenly spaced outward-facing cameras jointly covering 360 degrees.
std::vector<CameraCalib> build_rig(const RigSpec& spec);

// Deterministic for a given seed. Boxes are placed by rejection sampling
// and never overlap; throws std::runtime_error naming the seed if
// placement fails after max_place_attempts.
Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed);

struct RenderResult {
  int h = 0, w = 0;
  std::vector<float> rgb;  // 3 x H x W, values in [0, 1]
  std::vector<int> box_id;  // per pixel: hit box index, or -1
};

RenderResult render_view(const Scene& scene, int cam_index);

// Pixels each box occupies in each camera: visibility[cam][box].
std::vector<std::vector<int>> box_pixel_counts(const Scene& scene);

struct Sample {
  std::vector<std::vector<float>> images;  // n x (3*H*W)
  std::vector<CameraCalib> calibs;
  int image_h = 0, image_w = 0;
  MapGrid grid;
  std::vector<std::uint8_t> label;  // channels x h x w; 0 vehicles, 1 driveable
};

Sample make_sample(const Scene& scene, const SceneConfig& cfg);

// Directory layout: manifest.json + image_<k>.bt1 (float32) + label.bt1
// (uint8). Calibration floats are serialized with 17 significant digits
// so the round trip is exact.
void write_sample(const std::string& dir_path, const Sample& sample);
Sample read_sample(const std::string& dir_path);

// Dataset = numbered sample directories, sample seed = base_seed + index.
void generate_dataset(const SceneConfig& cfg, std::uint64_t base_seed, int count,
                      const std::string& out_dir);
std::vector<std::string> list_sample_dirs(const std::string& dataset_dir);

}  // namespace cvt
