#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cvt/bt1.hpp"
#include "cvt/train.hpp"

using namespace cvt;
using T32 = Tensor<float>;
using T64 = Tensor<double>;
namespace fs = std::filesystem;

namespace {

SceneConfig micro_scene_config() {
  SceneConfig cfg;
  cfg.rig.cameras = 2;
  cfg.rig.image_h = 8;
  cfg.rig.image_w = 16;
  cfg.grid_h = 32;
  cfg.grid_w = 32;
  cfg.max_boxes = 4;
  return cfg;
}

std::vector<Sample> micro_samples(int count, std::uint64_t seed0) {
  const auto cfg = micro_scene_config();
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i)
    out.push_back(make_sample(generate_scene(cfg, seed0 + i), cfg));
  return out;
}

}  // namespace

TEST_CASE("focal loss: saturated-correct, BCE reduction, closed form") {
  // logits +40 where y=1 and -40 where y=0: loss below 1e-10
  std::vector<std::uint8_t> target = {1, 0, 1, 1, 0, 0};
  std::vector<double> logits(6);
  for (int i = 0; i < 6; ++i) logits[i] = target[i] ? 40.0 : -40.0;
  const auto saturated =
      focal_loss(T64::from_data(logits, {6}), target, 2.0, 0.25);
  CHECK(saturated.item() >= 0.0);
  CHECK(saturated.item() < 1e-10);

  // gamma=0, alpha=0.5 equals half the binary cross-entropy
  Rng rng(3);
  std::vector<double> z(12);
  for (auto& v : z) v = rng.uniform(-3, 3);
  std::vector<std::uint8_t> y(12);
  for (auto& v : y) v = rng.uniform() < 0.5;
  const double got = focal_loss(T64::from_data(z, {12}), y, 0.0, 0.5).item();
  double bce = 0;
  for (int i = 0; i < 12; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z[i]));
    bce += y[i] ? -std::log(p) : -std::log(1 - p);
  }
  bce /= 12;
  CHECK(std::abs(got - 0.5 * bce) < 1e-9);

  // single cell, y=1, p=0.5, gamma=2, alpha=0.25: 0.25 * 0.25 * ln 2
  const double single =
      focal_loss(T64::from_data({0.0}, {1}), std::vector<std::uint8_t>{1}, 2.0, 0.25).item();
  CHECK(single == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-9));
  CHECK(single == doctest::Approx(0.043322).epsilon(1e-4));
}

TEST_CASE("focal loss is non-negative and zero only when saturated") {
  Rng rng(5);
  for (int rep = 0; rep < 30; ++rep) {
    std::vector<double> z(8);
    for (auto& v : z) v = rng.uniform(-10, 10);
    std::vector<std::uint8_t> y(8);
    for (auto& v : y) v = rng.uniform() < 0.5;
    const double loss = focal_loss(T64::from_data(z, {8}), y, 2.0, 0.25).item();
    CHECK(loss >= 0.0);
    CHECK(loss > 1e-10);  // not saturated for moderate logits
  }
}

TEST_CASE("adamw: no-op, first-step size, decay-only path") {
  auto make_params = [](float v) {
    std::vector<T32> p{T32::from_data({v}, {1}, true)};
    return p;
  };

  // zero grads, zero decay: parameters unchanged
  auto p0 = make_params(1.0f);
  auto s0 = AdamWState<float>::init(p0);
  adamw_step(p0, s0, 0.1, 0.0);
  CHECK(p0[0].data()[0] == 1.0f);

  // p=1, g=1, lr=0.1, wd=0: bias-corrected first step moves by about lr
  auto p1 = make_params(1.0f);
  auto s1 = AdamWState<float>::init(p1);
  p1[0].node()->ensure_grad();
  p1[0].grad()[0] = 1.0f;
  adamw_step(p1, s1, 0.1, 0.0);
  CHECK(p1[0].data()[0] == doctest::Approx(0.9).epsilon(1e-6));

  // wd=0.1, zero grads, lr=0.1: multiplied by (1 - 0.01)
  auto p2 = make_params(2.0f);
  auto s2 = AdamWState<float>::init(p2);
  adamw_step(p2, s2, 0.1, 0.1);
  CHECK(p2[0].data()[0] == doctest::Approx(2.0 * 0.99).epsilon(1e-7));
}

TEST_CASE("adamw with decay and zero grads strictly shrinks norms") {
  Rng rng(7);
  std::vector<T32> params{T32::randn(rng, {4, 4}, 1.0, true)};
  auto state = AdamWState<float>::init(params);
  double prev = 0;
  for (float v : params[0].data()) prev += v * v;
  for (int step = 0; step < 5; ++step) {
    adamw_step(params, state, 0.05, 0.1);
    double cur = 0;
    for (float v : params[0].data()) cur += v * v;
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("one_cycle_lr endpoints, peak, continuity, cosine oracle") {
  const long total = 100;
  const double max_lr = 1e-3;
  CHECK(one_cycle_lr(0, total, max_lr) == doctest::Approx(max_lr / 25));
  CHECK(one_cycle_lr(30, total, max_lr) == doctest::Approx(max_lr));  // pct_start * total

  // mid-anneal closed form
  const long step = 65;
  const double t = (65.0 - 30.0) / 70.0;
  const double want = max_lr / 1e4 + (max_lr - max_lr / 1e4) * 0.5 * (1 + std::cos(M_PI * t));
  CHECK(std::abs(one_cycle_lr(step, total, max_lr) - want) < 1e-12);

  // continuity (cosine warmup peak slope is pi/2 * max_lr / (0.3 * total))
  // and a unique maximum
  int argmax = -1;
  double best = -1;
  for (long s = 0; s < total; ++s) {
    const double lr = one_cycle_lr(s, total, max_lr);
    if (lr > best) {
      best = lr;
      argmax = static_cast<int>(s);
    }
    if (s > 0)
      CHECK(std::abs(lr - one_cycle_lr(s - 1, total, max_lr)) < 6 * max_lr / total);
  }
  CHECK(argmax == 30);
  int peak_count = 0;
  for (long s = 0; s < total; ++s)
    if (one_cycle_lr(s, total, max_lr) == best) ++peak_count;
  CHECK(peak_count == 1);

  CHECK_THROWS_AS(one_cycle_lr(-1, total, max_lr), std::invalid_argument);
  CHECK_THROWS_AS(one_cycle_lr(total, total, max_lr), std::invalid_argument);
}

TEST_CASE("train_run: loss decreases on most seeds (micro smoke)") {
  const auto samples = micro_samples(4, 900);
  int improved = 0;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    ModelConfig mcfg = micro_config();
    auto params = ModelParams<float>::init(mcfg, seed);
    TrainConfig tcfg;
    tcfg.epochs = 8;
    tcfg.batch_size = 2;
    tcfg.max_lr = 3e-3;
    tcfg.seed = seed;
    const auto result = train_run(params, mcfg, tcfg, samples, {});
    if (result.history.back().train_loss < result.history.front().train_loss) ++improved;
  }
  CHECK(improved >= 3);
}

TEST_CASE("train_run is deterministic and rejects empty datasets") {
  const auto samples = micro_samples(4, 950);
  ModelConfig mcfg = micro_config();
  TrainConfig tcfg;
  tcfg.epochs = 2;
  tcfg.batch_size = 2;
  tcfg.seed = 11;

  auto params_a = ModelParams<float>::init(mcfg, 5);
  const auto run_a = train_run(params_a, mcfg, tcfg, samples, {samples[0]});
  auto params_b = ModelParams<float>::init(mcfg, 5);
  const auto run_b = train_run(params_b, mcfg, tcfg, samples, {samples[0]});
  CHECK(history_csv(run_a.history) == history_csv(run_b.history));

  bool identical = true;
  auto ta = params_a.trainable();
  auto tb = params_b.trainable();
  REQUIRE(ta.size() == tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (ta[i].data() != tb[i].data()) identical = false;
  CHECK(identical);

  auto params_c = ModelParams<float>::init(mcfg, 5);
  CHECK_THROWS_AS(train_run(params_c, mcfg, tcfg, {}, {}), std::invalid_argument);
}

TEST_CASE("history csv has the documented header") {
  std::vector<EpochStats> h{{0, 0.5, 0.1, 0.2, 1e-3}};
  const auto csv = history_csv(h);
  CHECK(csv.rfind("epoch,train_loss,val_iou_vehicle,val_iou_driveable,lr\n", 0) == 0);
}

TEST_CASE("checkpoint round trip resumes bit-identically") {
  const auto samples = micro_samples(4, 970);
  ModelConfig mcfg = micro_config();
  TrainConfig tcfg;
  tcfg.epochs = 1;
  tcfg.batch_size = 2;
  tcfg.seed = 3;

  auto params = ModelParams<float>::init(mcfg, 9);
  auto trainable = params.trainable();
  auto state = AdamWState<float>::init(trainable);
  train_run(params, mcfg, tcfg, samples, {}, &state);

  const auto dir = fs::temp_directory_path() / "cvt_ckpt_test";
  fs::remove_all(dir);
  save_checkpoint(dir.string(), params, mcfg, &state);
  auto restored = load_checkpoint(dir.string());
  CHECK(restored.has_optim);
  CHECK(restored.optim.step == state.step);

  // continue both the in-memory and the restored model one more epoch
  TrainConfig cont = tcfg;
  cont.seed = 4;
  const auto run_mem = train_run(params, mcfg, cont, samples, {}, &state);
  const auto run_disk =
      train_run(restored.params, restored.model_cfg, cont, samples, {}, &restored.optim);
  CHECK(history_csv(run_mem.history) == history_csv(run_disk.history));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint errors: corrupt shape on disk names the tensor") {
  ModelConfig mcfg = micro_config();
  auto params = ModelParams<float>::init(mcfg, 13);
  const auto dir = fs::temp_directory_path() / "cvt_ckpt_corrupt";
  fs::remove_all(dir);
  save_checkpoint(dir.string(), params, mcfg);

  // overwrite the first tensor file with wrong dims
  write_bt1((dir / "t0000.bt1").string(), {2, 2}, std::vector<float>{1, 2, 3, 4});
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.string()), doctest::Contains("enc.conv0.w"),
                       std::runtime_error);
  fs::remove_all(dir);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt"), std::runtime_error);
}

TEST_CASE("model config json round trip covers every field") {
  ModelConfig cfg = desk_config();
  cfg.embedding = EmbeddingMode::CameraAwareFourier;
  cfg.keys_use_phi = false;
  cfg.refine_queries = false;
  cfg.temperature = 0.7;
  const auto j = model_config_to_json(cfg);
  const ModelConfig back = model_config_from_json(j);
  CHECK(back.d == cfg.d);
  CHECK(back.embedding == cfg.embedding);
  CHECK(back.keys_use_phi == cfg.keys_use_phi);
  CHECK(back.refine_queries == cfg.refine_queries);
  CHECK(back.temperature == cfg.temperature);
  CHECK(back.enc_widths == cfg.enc_widths);
}
