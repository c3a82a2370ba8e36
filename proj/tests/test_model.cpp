#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cvt/model.hpp"
#include "cvt/scene.hpp"
#include "cvt/train.hpp"

using namespace cvt;
using T32 = Tensor<float>;
using T64 = Tensor<double>;

namespace {

template <typename T>
std::vector<CameraInput<T>> random_inputs(Rng& rng, const ModelConfig& cfg, int n) {
  const auto rig = build_rig(RigSpec{n, cfg.image_h, cfg.image_w});
  std::vector<CameraInput<T>> cams(n);
  for (int k = 0; k < n; ++k) {
    std::vector<T> img(static_cast<std::size_t>(3) * cfg.image_h * cfg.image_w);
    for (auto& v : img) v = static_cast<T>(rng.uniform());
    cams[k].image = Tensor<T>::from_data(std::move(img),
                                         {3, static_cast<std::size_t>(cfg.image_h),
                                          static_cast<std::size_t>(cfg.image_w)});
    cams[k].calib = rig[k];
    cams[k].camera_id = k;
  }
  return cams;
}

}  // namespace

TEST_CASE("encoder scales: desk and paper-size images, exact 8x/16x strides") {
  const ModelConfig desk = desk_config();
  CHECK(desk.feat_h(0) == 8);
  CHECK(desk.feat_w(0) == 16);
  CHECK(desk.feat_h(1) == 4);
  CHECK(desk.feat_w(1) == 8);

  const ModelConfig paper = paper_scale_config();
  CHECK(paper.feat_h(0) == 28);
  CHECK(paper.feat_w(0) == 56);
  CHECK(paper.feat_h(1) == 14);
  CHECK(paper.feat_w(1) == 28);
}

TEST_CASE("encoder output shapes and cross-camera weight sharing") {
  const ModelConfig cfg = desk_config();
  auto params = ModelParams<float>::init(cfg, 7);
  Rng rng(7);
  auto cams = random_inputs<float>(rng, cfg, 2);

  const auto enc0 = encode_image(cams[0].image, params, cfg);
  CHECK(enc0.phi8.shape() == Shape{8 * 16, static_cast<std::size_t>(cfg.d)});
  CHECK(enc0.phi16.shape() == Shape{4 * 8, static_cast<std::size_t>(cfg.d)});

  const auto enc1 = encode_image(cams[0].image, params, cfg);  // same image again
  CHECK(enc0.phi8.data() == enc1.phi8.data());
  CHECK(enc0.phi16.data() == enc1.phi16.data());
}

TEST_CASE("forward: desk logits shape, variable camera count, finiteness") {
  const ModelConfig cfg = desk_config();
  auto params = ModelParams<float>::init(cfg, 11);
  Rng rng(11);

  auto cams = random_inputs<float>(rng, cfg, 4);
  const auto out = forward(cams, params, cfg);
  CHECK(out.logits.shape() == Shape{2, 64, 64});

  std::vector<CameraInput<float>> three(cams.begin(), cams.begin() + 3);
  const auto out3 = forward(three, params, cfg);
  CHECK(out3.logits.shape() == Shape{2, 64, 64});

  std::vector<CameraInput<float>> one(cams.begin(), cams.begin() + 1);
  CHECK(forward(one, params, cfg).logits.shape() == Shape{2, 64, 64});

  CHECK_THROWS_AS(forward(std::vector<CameraInput<float>>{}, params, cfg),
                  std::invalid_argument);
}

TEST_CASE("logits stay finite over random inputs and inits") {
  const ModelConfig cfg = micro_config();
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    auto params = ModelParams<float>::init(cfg, 1000 + trial);
    auto cams = random_inputs<float>(rng, cfg, 2);
    const auto out = forward(cams, params, cfg);
    for (float v : out.logits.data()) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("desk model stays under one million parameters") {
  auto params = ModelParams<float>::init(desk_config(), 3);
  const auto count = params.parameter_count();
  CHECK(count < 1000000);
  CHECK(count > 10000);
}

TEST_CASE("paper-scale config instantiates and decodes 25x25 -> 200x200") {
  const ModelConfig cfg = paper_scale_config();
  auto params = ModelParams<float>::init(cfg, 5);
  CHECK(params.parameter_count() > 500000);

  Rng rng(5);
  std::vector<float> g(static_cast<std::size_t>(cfg.d) * 25 * 25);
  for (auto& v : g) v = static_cast<float>(rng.uniform(-1, 1));
  const auto grid = T32::from_data(std::move(g), {static_cast<std::size_t>(cfg.d), 25, 25});
  const auto logits = decode_map(grid, params, cfg);
  CHECK(logits.shape() == Shape{2, 200, 200});  // three exact doublings, no crop
}

TEST_CASE("decoder: exact doubling at desk scale and zero propagation") {
  const ModelConfig cfg = desk_config();
  auto params = ModelParams<float>::init(cfg, 17);
  const auto grid = T32::zeros({static_cast<std::size_t>(cfg.d), 8, 8});
  // zero input and zero biases give zero logits
  for (auto& conv : params.dec)
    for (auto& v : conv.b.data()) v = 0.f;
  for (auto& v : params.head.b.data()) v = 0.f;
  const auto logits = decode_map(grid, params, cfg);
  CHECK(logits.shape() == Shape{2, 64, 64});
  for (float v : logits.data()) CHECK(v == 0.f);
}

TEST_CASE("decoder center-crops when the upsampled grid overshoots") {
  ModelConfig cfg = desk_config();
  cfg.latent_h = 9;  // 9 * 8 = 72 > 64: crop path
  cfg.latent_w = 9;
  auto params = ModelParams<float>::init(cfg, 19);
  const auto grid = T32::zeros({static_cast<std::size_t>(cfg.d), 9, 9});
  CHECK(decode_map(grid, params, cfg).shape() == Shape{2, 64, 64});

  ModelConfig bad = desk_config();
  bad.latent_h = 4;  // 4 * 8 = 32 < 64
  bad.latent_w = 4;
  CHECK_THROWS_AS(ModelParams<float>::init(bad, 19), std::invalid_argument);
}

TEST_CASE("every trainable parameter is reachable from the loss") {
  const ModelConfig cfg = micro_config();
  for (auto mode : {EmbeddingMode::CameraAwareLinear, EmbeddingMode::None,
                    EmbeddingMode::LearnedPerCamera, EmbeddingMode::CameraAwareFourier}) {
    ModelConfig m = cfg;
    m.embedding = mode;
    auto params = ModelParams<float>::init(m, 23);
    Rng rng(23);
    auto cams = random_inputs<float>(rng, m, 2);
    std::vector<std::uint8_t> target(static_cast<std::size_t>(m.channels) * m.out_h * m.out_w);
    for (auto& t : target) t = rng.uniform() < 0.3 ? 1 : 0;

    auto trainable = params.trainable();
    for (auto& p : trainable) p.zero_grad();
    const auto out = forward(cams, params, m);
    focal_loss(out.logits, target, 2.0f, 0.25f).backward();
    params.visit([&](const std::string& name, Tensor<float>& t) {
      if (!t.requires_grad()) return;
      INFO("parameter: " << name << " mode " << embedding_mode_name(mode));
      REQUIRE(t.grad().size() == t.numel());
      double norm = 0;
      for (float g : t.grad()) norm += static_cast<double>(g) * g;
      CHECK(norm > 0.0);
    });
  }
}

TEST_CASE("ablation flags change the computation as intended") {
  const ModelConfig base = micro_config();
  auto params = ModelParams<float>::init(base, 29);
  Rng rng(29);
  auto cams = random_inputs<float>(rng, base, 2);

  const auto full = forward(cams, params, base);

  ModelConfig frozen = base;
  frozen.refine_queries = false;
  const auto no_refine = forward(cams, params, frozen);
  CHECK(full.logits.data() != no_refine.logits.data());

  ModelConfig no_phi = base;
  no_phi.keys_use_phi = false;
  const auto keys_delta_only = forward(cams, params, no_phi);
  CHECK(full.logits.data() != keys_delta_only.logits.data());
}

TEST_CASE("per-camera embeddings require in-rig camera ids") {
  ModelConfig cfg = micro_config();
  cfg.embedding = EmbeddingMode::LearnedPerCamera;
  auto params = ModelParams<float>::init(cfg, 31);
  Rng rng(31);
  auto cams = random_inputs<float>(rng, cfg, 2);
  CHECK_NOTHROW(forward(cams, params, cfg));
  cams[1].camera_id = 9;
  CHECK_THROWS_AS(forward(cams, params, cfg), std::invalid_argument);
}

TEST_CASE("coarse block consumes 16x keys, fine block 8x keys") {
  const ModelConfig cfg = desk_config();
  auto params = ModelParams<float>::init(cfg, 37);
  Rng rng(37);
  auto cams = random_inputs<float>(rng, cfg, 4);
  const auto out = forward(cams, params, cfg, true);
  REQUIRE(out.traces.size() == 2);
  CHECK(out.traces[0].total_keys() == 4 * 4 * 8);    // stride-16 scale first
  CHECK(out.traces[1].total_keys() == 4 * 8 * 16);   // then stride-8
  CHECK(out.traces[0].queries == cfg.latent_h * cfg.latent_w);
  CHECK(out.traces[1].queries == cfg.latent_h * cfg.latent_w);
}
