#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cvt/embeddings.hpp"
#include "cvt/scene.hpp"

using namespace cvt;
using T64 = Tensor<double>;

namespace {

CameraCalib simple_cam(double fx, double cx, double cy) {
  CameraCalib c;
  c.K = Mat3::identity();
  c.K(0, 0) = fx;
  c.K(1, 1) = fx;
  c.K(0, 2) = cx;
  c.K(1, 2) = cy;
  c.R = Mat3::identity();
  c.t = {0, 0, 1.5};
  return c;
}

Mlp2<double> zero_mlp(std::size_t in, std::size_t d, double bias2) {
  Mlp2<double> m;
  m.w1 = T64::zeros({in, d}, true);
  m.b1 = T64::zeros({d}, true);
  m.w2 = T64::zeros({d, d}, true);
  m.b2 = T64::full({d}, bias2, true);
  return m;
}

}  // namespace

TEST_CASE("ray grid sampling positions sit at feature-cell centers") {
  const auto cam = simple_cam(100, 112, 224);
  // stride-16 grid: centers at (16 j + 8, 16 i + 8) in full image coords
  const RayGrid g = ray_grid(cam, 14, 28, 224, 448);
  CHECK(g.feat_h == 14);
  CHECK(g.feat_w == 28);
  for (int i = 0; i < 14; ++i)
    for (int j = 0; j < 28; ++j) {
      const Vec3 want = unproject_ray(cam, {16.0 * j + 8.0, 16.0 * i + 8.0});
      const std::size_t base = (static_cast<std::size_t>(i) * 28 + j) * 3;
      CHECK(g.dirs[base] == doctest::Approx(want.x).epsilon(1e-12));
      CHECK(g.dirs[base + 1] == doctest::Approx(want.y).epsilon(1e-12));
      CHECK(g.dirs[base + 2] == doctest::Approx(want.z).epsilon(1e-12));
    }
}

TEST_CASE("non-integer stride is a configuration error") {
  const auto cam = simple_cam(100, 112, 224);
  CHECK_THROWS_AS(ray_grid(cam, 30, 14, 448, 224), std::invalid_argument);
  CHECK_THROWS_AS(ray_grid(cam, 0, 14, 448, 224), std::invalid_argument);
}

TEST_CASE("two cameras differing by a rotation have rotated ray grids") {
  const auto base = simple_cam(60, 64, 32);
  CameraCalib rotated = base;
  const Mat3 Q = Mat3::rotation_z(1.1);
  rotated.R = base.R * Q;  // extra extrinsic rotation

  const RayGrid ga = ray_grid(base, 8, 16, 64, 128);
  const RayGrid gb = ray_grid(rotated, 8, 16, 64, 128);
  // directions must differ by exactly Q^T applied pointwise
  for (std::size_t i = 0; i < ga.dirs.size(); i += 3) {
    const Vec3 da{ga.dirs[i], ga.dirs[i + 1], ga.dirs[i + 2]};
    const Vec3 want = Q.transposed() * da;
    CHECK(std::abs(gb.dirs[i] - want.x) < 1e-6);
    CHECK(std::abs(gb.dirs[i + 1] - want.y) < 1e-6);
    CHECK(std::abs(gb.dirs[i + 2] - want.z) < 1e-6);
  }
}

TEST_CASE("zero-weight delta MLP collapses to its bias") {
  const auto cam = simple_cam(60, 64, 32);
  const auto mlp = zero_mlp(3, 6, 0.37);
  const auto delta = ray_embedding(cam, 4, 8, 64, 128, mlp);
  CHECK(delta.shape() == Shape{32, 6});
  for (double v : delta.data()) CHECK(v == doctest::Approx(0.37));
}

TEST_CASE("delta is genuinely camera-aware") {
  Rng rng(31);
  auto mlp = Mlp2<double>::init(rng, 3, 8, 0.5);
  const auto cam = simple_cam(60, 64, 32);
  CameraCalib perturbed = cam;
  perturbed.R = cam.R * Mat3::rotation_z(M_PI / 180.0);  // 1 degree

  const auto a = ray_embedding(cam, 4, 8, 64, 128, mlp);
  const auto b = ray_embedding(perturbed, 4, 8, 64, 128, mlp);
  double max_diff = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    max_diff = std::max(max_diff, std::abs(a.data()[i] - b.data()[i]));
  CHECK(max_diff > 0.0);
}

TEST_CASE("delta MLP parameters are shared across cameras") {
  Rng rng(37);
  auto mlp = Mlp2<double>::init(rng, 3, 8, 0.5);
  const auto cam_a = simple_cam(60, 64, 32);
  auto cam_b = cam_a;
  cam_b.R = cam_a.R * Mat3::rotation_z(2.0);

  const auto da = ray_embedding(cam_a, 4, 8, 64, 128, mlp);
  const auto db = ray_embedding(cam_b, 4, 8, 64, 128, mlp);
  mlp.w1.zero_grad();
  sum(add(sum(da), sum(db))).backward();
  // a multi-camera loss accumulates into exactly one parameter copy
  CHECK(mlp.w1.grad().size() == mlp.w1.numel());
  double norm = 0;
  for (double g : mlp.w1.grad()) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("delta invariant to proportional focal and pixel-grid rescale") {
  Rng rng(41);
  auto mlp = Mlp2<double>::init(rng, 3, 8, 0.5);
  const auto cam = simple_cam(60, 64, 32);
  CameraCalib scaled = cam;
  scaled.K(0, 0) *= 2;
  scaled.K(1, 1) *= 2;
  scaled.K(0, 2) *= 2;
  scaled.K(1, 2) *= 2;

  const auto a = ray_embedding(cam, 4, 8, 64, 128, mlp);
  const auto b = ray_embedding(scaled, 4, 8, 128, 256, mlp);  // doubled pixel grid
  for (std::size_t i = 0; i < a.numel(); ++i)
    CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-6);
}

TEST_CASE("location embedding: identical origins, bias collapse, MLP oracle") {
  auto cam_a = simple_cam(60, 64, 32);
  auto cam_b = simple_cam(90, 48, 20);
  cam_b.t = cam_a.t;

  Rng rng(43);
  auto mlp = Mlp2<double>::init(rng, 3, 6, 0.5);
  const auto taus = location_embedding<double>({cam_a, cam_b}, mlp);
  REQUIRE(taus.size() == 2);
  CHECK(taus[0].data() == taus[1].data());

  const auto zero = zero_mlp(3, 6, -1.25);
  const auto tz = location_embedding<double>({cam_a}, zero);
  for (double v : tz[0].data()) CHECK(v == doctest::Approx(-1.25));

  // hand-rolled two-layer forward oracle
  const auto t = location_embedding<double>({cam_a}, mlp)[0];
  std::vector<double> h(6, 0.0);
  const double in[3] = {cam_a.t.x, cam_a.t.y, cam_a.t.z};
  for (int j = 0; j < 6; ++j) {
    double acc = mlp.b1.data()[j];
    for (int i = 0; i < 3; ++i) acc += in[i] * mlp.w1.data()[i * 6 + j];
    h[j] = 0.5 * acc * (1.0 + std::erf(acc / std::sqrt(2.0)));
  }
  for (int j = 0; j < 6; ++j) {
    double acc = mlp.b2.data()[j];
    for (int i = 0; i < 6; ++i) acc += h[i] * mlp.w2.data()[i * 6 + j];
    CHECK(t.data()[j] == doctest::Approx(acc).epsilon(1e-12));
  }
}

TEST_CASE("map embedding init: paper shape, determinism, statistics") {
  const auto c = init_map_embedding<float>(25, 25, 128, 5);
  CHECK(c.shape() == Shape{625, 128});
  CHECK(c.requires_grad());

  const auto c2 = init_map_embedding<float>(25, 25, 128, 5);
  CHECK(c.data() == c2.data());
  const auto c3 = init_map_embedding<float>(25, 25, 128, 6);
  CHECK(c.data() != c3.data());

  double mean = 0;
  for (float v : c.data()) mean += v;
  mean /= static_cast<double>(c.numel());
  CHECK(std::abs(mean) < 3.0 * 0.02 / std::sqrt(static_cast<double>(c.numel())));
}

TEST_CASE("fourier embedding is deterministic and mode names round-trip") {
  Rng rng_a(3);
  Rng rng_b(3);
  auto fa = FourierEmbed<double>::init(rng_a, 8, 0.02);
  auto fb = FourierEmbed<double>::init(rng_b, 8, 0.02);
  CHECK(fa.freq.data() == fb.freq.data());
  CHECK(!fa.freq.requires_grad());

  for (auto mode : {EmbeddingMode::None, EmbeddingMode::LearnedPerCamera,
                    EmbeddingMode::CameraAwareFourier, EmbeddingMode::CameraAwareLinear})
    CHECK(embedding_mode_from_name(embedding_mode_name(mode)) == mode);
  CHECK_THROWS_AS(embedding_mode_from_name("bogus"), std::invalid_argument);
}
