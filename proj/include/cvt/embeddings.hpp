#pragma once

// Positional embeddings feeding cross-view attention: the camera-aware
// ray-direction embedding (delta), the camera-location embedding (tau),
// and the learned map-view latent grid c0.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvt/geometry.hpp"
#include "cvt/tensor.hpp"

namespace cvt {

// Table-4 style choices for the delta path. Linear means the ray
// direction enters a learned 2-layer MLP whose first layer is the linear
// projection; Fourier replaces that first layer with a fixed random
// sin/cos feature map.
enum class EmbeddingMode { None, LearnedPerCamera, CameraAwareFourier, CameraAwareLinear };

inline const char* embedding_mode_name(EmbeddingMode m) {
  switch (m) {
    case EmbeddingMode::None: return "none";
    case EmbeddingMode::LearnedPerCamera: return "learned-per-camera";
    case EmbeddingMode::CameraAwareFourier: return "camera-aware-fourier";
    default: return "camera-aware-linear";
  }
}

inline EmbeddingMode embedding_mode_from_name(const std::string& s) {
  if (s == "none") return EmbeddingMode::None;
  if (s == "learned-per-camera") return EmbeddingMode::LearnedPerCamera;
  if (s == "camera-aware-fourier") return EmbeddingMode::CameraAwareFourier;
  if (s == "camera-aware-linear") return EmbeddingMode::CameraAwareLinear;
  throw std::invalid_argument("unknown embedding mode: " + s);
}

// One world-frame ray per feature-map location, taken at the feature
// cell's center pixel in full image coordinates. Raw unproject_ray
// outputs; unit normalization happens downstream.
struct RayGrid {
  int feat_h = 0, feat_w = 0;
  std::vector<double> dirs;  // feat_h*feat_w x 3 row-major
};

inline RayGrid ray_grid(const CameraCalib& calib, int feat_h, int feat_w, int image_h,
                        int image_w) {
  if (feat_h <= 0 || feat_w <= 0 || image_h % feat_h != 0 || image_w % feat_w != 0)
    throw std::invalid_argument("ray_grid: feature dims " + std::to_string(feat_h) + "x" +
                                std::to_string(feat_w) + " must divide image dims " +
                                std::to_string(image_h) + "x" + std::to_string(image_w));
  const int stride_y = image_h / feat_h;
  const int stride_x = image_w / feat_w;
  RayGrid g;
  g.feat_h = feat_h;
  g.feat_w = feat_w;
  g.dirs.resize(static_cast<std::size_t>(feat_h) * feat_w * 3);
  for (int i = 0; i < feat_h; ++i)
    for (int j = 0; j < feat_w; ++j) {
      const PixelCoord pix{stride_x * (j + 0.5), stride_y * (i + 0.5)};
      const Vec3 d = unproject_ray(calib, pix);
      const std::size_t base = (static_cast<std::size_t>(i) * feat_w + j) * 3;
      g.dirs[base] = d.x;
      g.dirs[base + 1] = d.y;
      g.dirs[base + 2] = d.z;
    }
  return g;
}

// 2-layer MLP, in -> D -> D with GELU between. Shared across cameras.
template <typename T>
struct Mlp2 {
  Tensor<T> w1, b1, w2, b2;

  static Mlp2 init(Rng& rng, std::size_t in, std::size_t d, double stddev) {
    Mlp2 m;
    m.w1 = Tensor<T>::randn(rng, {in, d}, stddev, true);
    m.b1 = Tensor<T>::zeros({d}, true);
    m.w2 = Tensor<T>::randn(rng, {d, d}, stddev, true);
    m.b2 = Tensor<T>::zeros({d}, true);
    return m;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return add_rowvec(matmul(gelu(add_rowvec(matmul(x, w1), b1)), w2), b2);
  }
};

// Fixed random frequency matrix (D/2 x 3, sigma = 1) followed by a
// learned D -> D linear layer over the [sin, cos] features.
template <typename T>
struct FourierEmbed {
  Tensor<T> freq;  // non-trainable
  Tensor<T> w, b;

  static FourierEmbed init(Rng& rng, std::size_t d, double stddev) {
    if (d % 2 != 0) throw std::invalid_argument("fourier embedding needs even D");
    FourierEmbed f;
    f.freq = Tensor<T>::randn(rng, {d / 2, 3}, 1.0, false);
    f.w = Tensor<T>::randn(rng, {d, d}, stddev, true);
    f.b = Tensor<T>::zeros({d}, true);
    return f;
  }

  Tensor<T> forward(const Tensor<T>& dirs) const {  // dirs: L x 3
    const std::size_t L = dirs.dim(0);
    const std::size_t half = freq.dim(0);
    std::vector<T> feats(L * 2 * half);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t k = 0; k < half; ++k) {
        T acc = T(0);
        for (std::size_t c = 0; c < 3; ++c) acc += freq.data()[k * 3 + c] * dirs.data()[i * 3 + c];
        feats[i * 2 * half + k] = std::sin(acc);
        feats[i * 2 * half + half + k] = std::cos(acc);
      }
    const auto f = Tensor<T>::from_data(std::move(feats), {L, 2 * half});
    return add_rowvec(matmul(f, w), b);
  }
};

// Unit-normalized ray directions as a constant (L x 3) tensor.
template <typename T>
Tensor<T> ray_direction_tensor(const RayGrid& grid) {
  const std::size_t L = static_cast<std::size_t>(grid.feat_h) * grid.feat_w;
  std::vector<T> data(L * 3);
  for (std::size_t i = 0; i < L; ++i) {
    const double x = grid.dirs[i * 3], y = grid.dirs[i * 3 + 1], z = grid.dirs[i * 3 + 2];
    const double n = std::sqrt(x * x + y * y + z * z);
    if (n < 1e-12) throw std::invalid_argument("ray_direction_tensor: zero-length ray");
    data[i * 3] = static_cast<T>(x / n);
    data[i * 3 + 1] = static_cast<T>(y / n);
    data[i * 3 + 2] = static_cast<T>(z / n);
  }
  return Tensor<T>::from_data(std::move(data), {L, 3});
}

// delta for one camera at one feature scale: rays -> shared MLP -> L x D.
template <typename T>
Tensor<T> ray_embedding(const CameraCalib& calib, int feat_h, int feat_w, int image_h, int image_w,
                        const Mlp2<T>& mlp) {
  const RayGrid rays = ray_grid(calib, feat_h, feat_w, image_h, image_w);
  return mlp.forward(ray_direction_tensor<T>(rays));
}

// tau_k = MLP(t_k), one 1 x D row per camera.
template <typename T>
std::vector<Tensor<T>> location_embedding(const std::vector<CameraCalib>& calibs,
                                          const Mlp2<T>& mlp) {
  std::vector<Tensor<T>> out;
  out.reserve(calibs.size());
  for (const auto& c : calibs) {
    const auto t = Tensor<T>::from_data(
        {static_cast<T>(c.t.x), static_cast<T>(c.t.y), static_cast<T>(c.t.z)}, {1, 3});
    out.push_back(mlp.forward(t));
  }
  return out;
}

// Learned map-view latent grid, (latent_h * latent_w) x D, N(0, 0.02^2).
template <typename T>
Tensor<T> init_map_embedding(int latent_w, int latent_h, int d, std::uint64_t seed) {
  if (latent_w <= 0 || latent_h <= 0 || d <= 0)
    throw std::invalid_argument("init_map_embedding: dims must be positive");
  Rng rng(seed);
  return Tensor<T>::randn(rng, {static_cast<std::size_t>(latent_h) * latent_w,
                                static_cast<std::size_t>(d)},
                          0.02, true);
}

}  // namespace cvt
