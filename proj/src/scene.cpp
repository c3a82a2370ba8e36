#include "cvt/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "cvt/bt1.hpp"
#include "cvt/tensor.hpp"

namespace fs = std::filesystem;

namespace cvt {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Separating-axis test for two oriented rectangle footprints.
bool boxes_overlap(const OrientedBox& a, const OrientedBox& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const OrientedBox* boxes[2] = {&a, &b};
  for (const OrientedBox* box : boxes) {
    const double axes[2][2] = {{std::cos(box->yaw), std::sin(box->yaw)},
                               {-std::sin(box->yaw), std::cos(box->yaw)}};
    for (const auto& axis : axes) {
      double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
      for (const auto& p : ca) {
        const double v = p[0] * axis[0] + p[1] * axis[1];
        amin = std::min(amin, v);
        amax = std::max(amax, v);
      }
      for (const auto& p : cb) {
        const double v = p[0] * axis[0] + p[1] * axis[1];
        bmin = std::min(bmin, v);
        bmax = std::max(bmax, v);
      }
      if (amax < bmin || bmax < amin) return false;  // separating axis found
    }
  }
  return true;
}

void hsv_to_rgb(double h, double s, double v, float rgb[3]) {
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - f * s);
  const double t = v * (1.0 - (1.0 - f) * s);
  double r, g, b;
  switch (static_cast<int>(i) % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  rgb[0] = static_cast<float>(r);
  rgb[1] = static_cast<float>(g);
  rgb[2] = static_cast<float>(b);
}

void box_color(int index, float rgb[3]) {
  const double hue = std::fmod(0.6180339887498949 * index + 0.12, 1.0);
  hsv_to_rgb(hue, 0.8, 0.9, rgb);
}

// Ray vs upright box (footprint extruded from z=0 to z=height).
// Returns the entry distance, or a negative value on miss.
double ray_box_hit(const OrientedBox& box, const Vec3& origin, const Vec3& dir) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  // into box-local frame
  const double ox = origin.x - box.cx, oy = origin.y - box.cy;
  const Vec3 o{c * ox + s * oy, -s * ox + c * oy, origin.z};
  const Vec3 d{c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z};

  double tmin = 0.0, tmax = 1e30;
  const double lo[3] = {-box.half_x, -box.half_y, 0.0};
  const double hi[3] = {box.half_x, box.half_y, box.height};
  const double op[3] = {o.x, o.y, o.z};
  const double dp[3] = {d.x, d.y, d.z};
  for (int ax = 0; ax < 3; ++ax) {
    if (std::abs(dp[ax]) < 1e-12) {
      if (op[ax] < lo[ax] || op[ax] > hi[ax]) return -1.0;
      continue;
    }
    double t0 = (lo[ax] - op[ax]) / dp[ax];
    double t1 = (hi[ax] - op[ax]) / dp[ax];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return -1.0;
  }
  return tmin > 1e-6 ? tmin : -1.0;
}

bool point_in_convex_polygon(const std::vector<std::array<double, 2>>& poly, double px, double py) {
  const std::size_t n = poly.size();
  for (std::size_t k = 0; k < n; ++k) {
    const auto& a = poly[k];
    const auto& b = poly[(k + 1) % n];
    if ((b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]) < 0) return false;
  }
  return true;
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::vector<CameraCalib> build_rig(const RigSpec& spec) {
  std::vector<CameraCalib> rig;
  rig.reserve(spec.cameras);
  const double fx = spec.image_w / (2.0 * std::tan(spec.hfov_deg * kPi / 180.0 / 2.0));
  const double pitch = spec.pitch_deg * kPi / 180.0;
  for (int k = 0; k < spec.cameras; ++k) {
    const double yaw = 2.0 * kPi * k / spec.cameras;
    CameraCalib cam;
    cam.K = Mat3::identity();
    cam.K(0, 0) = fx;
    cam.K(1, 1) = fx;
    cam.K(0, 2) = spec.image_w / 2.0;
    cam.K(1, 2) = spec.image_h / 2.0;
    // Camera axes in world coordinates: view tilted down by pitch, image
    // right kept horizontal, rows of R are (right, down, view).
    const Vec3 view{std::cos(pitch) * std::cos(yaw), std::cos(pitch) * std::sin(yaw),
                    -std::sin(pitch)};
    const Vec3 right{std::sin(yaw), -std::cos(yaw), 0.0};
    const Vec3 down = view.cross(right);
    cam.R = Mat3::from_rows(right, down, view);
    cam.t = Vec3{spec.radius_m * std::cos(yaw), spec.radius_m * std::sin(yaw), spec.height_m};
    rig.push_back(cam);
  }
  return rig;
}

Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Scene scene;
  scene.seed = seed;
  scene.rig = build_rig(cfg.rig);
  scene.image_h = cfg.rig.image_h;
  scene.image_w = cfg.rig.image_w;

  // Road corridor: a straight strip through the ego position.
  const double road_yaw = rng.uniform(0.0, kPi);
  const double road_w = rng.uniform(cfg.road_width_min, cfg.road_width_max);
  const double offset = rng.uniform(-road_w / 2 + 1.0, road_w / 2 - 1.0);
  const double ux = std::cos(road_yaw), uy = std::sin(road_yaw);
  const double nx = -uy, ny = ux;
  const double half_len = std::hypot(cfg.extent_x, cfg.extent_y);
  const double px = nx * offset, py = ny * offset;
  scene.road = {{px - ux * half_len - nx * road_w / 2, py - uy * half_len - ny * road_w / 2},
                {px + ux * half_len - nx * road_w / 2, py + uy * half_len - ny * road_w / 2},
                {px + ux * half_len + nx * road_w / 2, py + uy * half_len + ny * road_w / 2},
                {px - ux * half_len + nx * road_w / 2, py - uy * half_len + ny * road_w / 2}};

  const int n_boxes = rng.uniform_int(cfg.min_boxes, cfg.max_boxes);
  int attempts = 0;
  while (static_cast<int>(scene.boxes.size()) < n_boxes) {
    if (++attempts > cfg.max_place_attempts)
      throw std::runtime_error("generate_scene: box placement failed after " +
                               std::to_string(cfg.max_place_attempts) + " attempts (seed " +
                               std::to_string(seed) + ")");
    OrientedBox box;
    box.half_x = rng.uniform(cfg.box_len_min, cfg.box_len_max) / 2.0;
    box.half_y = rng.uniform(cfg.box_wid_min, cfg.box_wid_max) / 2.0;
    box.yaw = rng.uniform(0.0, 2.0 * kPi);
    box.height = cfg.box_height;
    const double circum = std::hypot(box.half_x, box.half_y);
    const double max_cx = cfg.extent_x / 2 - circum;
    const double max_cy = cfg.extent_y / 2 - circum;
    box.cx = rng.uniform(-max_cx, max_cx);
    box.cy = rng.uniform(-max_cy, max_cy);
    if (std::hypot(box.cx, box.cy) < cfg.keepout_radius + circum) continue;
    bool clash = false;
    for (const auto& other : scene.boxes)
      if (boxes_overlap(box, other)) {
        clash = true;
        break;
      }
    if (!clash) scene.boxes.push_back(box);
  }

  // A vehicle hidden behind another in every camera would be labeled but
  // unlearnable; prune such boxes. Removing an occluded box only reveals
  // more of the others, so one pass settles it.
  if (!scene.boxes.empty()) {
    const auto counts = box_pixel_counts(scene);
    std::vector<OrientedBox> kept;
    for (std::size_t b = 0; b < scene.boxes.size(); ++b) {
      int total = 0;
      for (std::size_t cam = 0; cam < scene.rig.size(); ++cam) total += counts[cam][b];
      if (total > 0) kept.push_back(scene.boxes[b]);
    }
    scene.boxes = std::move(kept);
  }
  return scene;
}

RenderResult render_view(const Scene& scene, int cam_index) {
  if (cam_index < 0 || cam_index >= static_cast<int>(scene.rig.size()))
    throw std::invalid_argument("render_view: camera index " + std::to_string(cam_index) +
                                " out of range");
  const CameraCalib& cam = scene.rig[cam_index];
  const int H = scene.image_h, W = scene.image_w;
  RenderResult out;
  out.h = H;
  out.w = W;
  out.rgb.assign(static_cast<std::size_t>(3) * H * W, 0.f);
  out.box_id.assign(static_cast<std::size_t>(H) * W, -1);

  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const PixelCoord pix{x + 0.5, y + 0.5};
      const Vec3 dir = unproject_ray(cam, pix);

      double best_t = 1e30;
      int best_box = -1;
      for (std::size_t b = 0; b < scene.boxes.size(); ++b) {
        const double t = ray_box_hit(scene.boxes[b], cam.t, dir);
        if (t > 0 && t < best_t) {
          best_t = t;
          best_box = static_cast<int>(b);
        }
      }

      float rgb[3];
      if (best_box >= 0) {
        box_color(best_box, rgb);
        const double depth = best_t * dir.norm();
        const float atten = static_cast<float>(0.35 + 0.65 * std::exp(-depth / 40.0));
        for (float& c : rgb) c *= atten;
        out.box_id[static_cast<std::size_t>(y) * W + x] = best_box;
      } else if (dir.z < -1e-9) {
        const double t_ground = -cam.t.z / dir.z;
        const double gx = cam.t.x + t_ground * dir.x;
        const double gy = cam.t.y + t_ground * dir.y;
        const float shade = point_in_convex_polygon(scene.road, gx, gy) ? 0.30f : 0.72f;
        rgb[0] = rgb[1] = rgb[2] = shade;
      } else {
        rgb[0] = rgb[1] = rgb[2] = 1.0f;  // sky
      }
      for (int c = 0; c < 3; ++c)
        out.rgb[(static_cast<std::size_t>(c) * H + y) * W + x] = rgb[c];
    }
  }
  return out;
}

std::vector<std::vector<int>> box_pixel_counts(const Scene& scene) {
  std::vector<std::vector<int>> counts(scene.rig.size(),
                                       std::vector<int>(scene.boxes.size(), 0));
  for (std::size_t k = 0; k < scene.rig.size(); ++k) {
    const RenderResult r = render_view(scene, static_cast<int>(k));
    for (int id : r.box_id)
      if (id >= 0) ++counts[k][id];
  }
  return counts;
}

Sample make_sample(const Scene& scene, const SceneConfig& cfg) {
  Sample s;
  s.image_h = scene.image_h;
  s.image_w = scene.image_w;
  s.calibs = scene.rig;
  s.grid = map_grid_centers(cfg.extent_x, cfg.extent_y, cfg.grid_h, cfg.grid_w, 2);
  for (std::size_t k = 0; k < scene.rig.size(); ++k)
    s.images.push_back(render_view(scene, static_cast<int>(k)).rgb);

  const auto vehicles = rasterize_boxes(s.grid, scene.boxes, 0);
  const auto road = rasterize_convex_polygon(s.grid, scene.road);
  s.label.resize(vehicles.size() + road.size());
  std::copy(vehicles.begin(), vehicles.end(), s.label.begin());
  std::copy(road.begin(), road.end(), s.label.begin() + vehicles.size());
  return s;
}

namespace {

// Manifest floats are emitted by hand so every value carries 17
// significant digits and reparses to the identical double.
void write_manifest(const std::string& path, const Sample& s) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("manifest: cannot write " + path);
  os << "{\n";
  os << "  \"version\": 1,\n";
  os << "  \"image_h\": " << s.image_h << ",\n";
  os << "  \"image_w\": " << s.image_w << ",\n";
  os << "  \"grid\": {\"extent_x\": " << fmt17(s.grid.extent_x)
     << ", \"extent_y\": " << fmt17(s.grid.extent_y) << ", \"h\": " << s.grid.h
     << ", \"w\": " << s.grid.w << ", \"channels\": " << s.grid.channels << "},\n";
  os << "  \"cameras\": [\n";
  for (std::size_t k = 0; k < s.calibs.size(); ++k) {
    const auto& c = s.calibs[k];
    os << "    {\"K\": [";
    for (int i = 0; i < 9; ++i) os << (i ? ", " : "") << fmt17(c.K.m[i]);
    os << "], \"R\": [";
    for (int i = 0; i < 9; ++i) os << (i ? ", " : "") << fmt17(c.R.m[i]);
    os << "], \"t\": [" << fmt17(c.t.x) << ", " << fmt17(c.t.y) << ", " << fmt17(c.t.z) << "], ";
    os << "\"image\": \"image_" << k << ".bt1\"}";
    os << (k + 1 < s.calibs.size() ? ",\n" : "\n");
  }
  os << "  ],\n";
  os << "  \"label\": \"label.bt1\",\n";
  os << "  \"files\": [";
  for (std::size_t k = 0; k < s.calibs.size(); ++k) os << "\"image_" << k << ".bt1\", ";
  os << "\"label.bt1\"]\n";
  os << "}\n";
  if (!os) throw std::runtime_error("manifest: write failed for " + path);
}

}  // namespace

void write_sample(const std::string& dir_path, const Sample& sample) {
  fs::create_directories(dir_path);
  write_manifest((fs::path(dir_path) / "manifest.json").string(), sample);
  const auto H = static_cast<std::uint32_t>(sample.image_h);
  const auto W = static_cast<std::uint32_t>(sample.image_w);
  for (std::size_t k = 0; k < sample.images.size(); ++k)
    write_bt1((fs::path(dir_path) / ("image_" + std::to_string(k) + ".bt1")).string(), {3, H, W},
              sample.images[k]);
  write_bt1((fs::path(dir_path) / "label.bt1").string(),
            {static_cast<std::uint32_t>(sample.grid.channels),
             static_cast<std::uint32_t>(sample.grid.h), static_cast<std::uint32_t>(sample.grid.w)},
            sample.label);
}

Sample read_sample(const std::string& dir_path) {
  const fs::path dir(dir_path);
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("manifest: missing " + manifest_path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("manifest: parse error in " + manifest_path.string() + ": " + e.what());
  }

  Sample s;
  try {
    s.image_h = j.at("image_h").get<int>();
    s.image_w = j.at("image_w").get<int>();
    const auto& g = j.at("grid");
    s.grid = map_grid_centers(g.at("extent_x").get<double>(), g.at("extent_y").get<double>(),
                              g.at("h").get<int>(), g.at("w").get<int>(),
                              g.at("channels").get<int>());
    for (const auto& cj : j.at("cameras")) {
      CameraCalib c;
      for (int i = 0; i < 9; ++i) c.K.m[i] = cj.at("K").at(i).get<double>();
      for (int i = 0; i < 9; ++i) c.R.m[i] = cj.at("R").at(i).get<double>();
      c.t = {cj.at("t").at(0).get<double>(), cj.at("t").at(1).get<double>(),
             cj.at("t").at(2).get<double>()};
      s.calibs.push_back(c);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest: bad field in " + manifest_path.string() + ": " + e.what());
  }

  for (std::size_t k = 0; k < s.calibs.size(); ++k) {
    const fs::path img = dir / ("image_" + std::to_string(k) + ".bt1");
    if (!fs::exists(img))
      throw std::runtime_error("sample: manifest lists camera " + std::to_string(k) +
                               " but " + img.filename().string() + " is missing");
    Bt1Tensor t = read_bt1(img.string());
    if (t.dtype != Bt1Dtype::F32 ||
        t.dims != std::vector<std::uint32_t>{3, static_cast<std::uint32_t>(s.image_h),
                                             static_cast<std::uint32_t>(s.image_w)})
      throw std::runtime_error("sample: " + img.filename().string() +
                               ": dims/dtype mismatch against manifest image_h/image_w");
    s.images.push_back(std::move(t.f32));
  }

  const fs::path label = dir / "label.bt1";
  if (!fs::exists(label)) throw std::runtime_error("sample: missing label.bt1 in " + dir_path);
  Bt1Tensor lt = read_bt1(label.string());
  if (lt.dtype != Bt1Dtype::U8 ||
      lt.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(s.grid.channels),
                                            static_cast<std::uint32_t>(s.grid.h),
                                            static_cast<std::uint32_t>(s.grid.w)})
    throw std::runtime_error("sample: label.bt1: dims/dtype mismatch against manifest grid");
  s.label = std::move(lt.u8);
  return s;
}

void generate_dataset(const SceneConfig& cfg, std::uint64_t base_seed, int count,
                      const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::vector<int> indices(count);
  for (int i = 0; i < count; ++i) indices[i] = i;
  // Samples are pure functions of (cfg, base_seed + i); parallel workers
  // write disjoint directories.
  parallel_for(static_cast<std::size_t>(count), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%05zu", i);
      const Scene scene = generate_scene(cfg, base_seed + i);
      write_sample((fs::path(out_dir) / name).string(), make_sample(scene, cfg));
    }
  }, 1);
}

std::vector<std::string> list_sample_dirs(const std::string& dataset_dir) {
  std::vector<std::string> dirs;
  if (!fs::is_directory(dataset_dir))
    throw std::runtime_error("dataset: not a directory: " + dataset_dir);
  for (const auto& e : fs::directory_iterator(dataset_dir))
    if (e.is_directory() && e.path().filename().string().rfind("sample_", 0) == 0)
      dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

}  // namespace cvt
