#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cvt/eval.hpp"
#include "cvt/train.hpp"

using namespace cvt;
namespace fs = std::filesystem;

namespace {

// logits that binarize to the given mask at threshold 0.5
std::vector<float> logits_for(const std::vector<std::uint8_t>& mask) {
  std::vector<float> out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] ? 5.f : -5.f;
  return out;
}

SceneConfig small_scene_config() {
  SceneConfig cfg;
  cfg.rig.cameras = 4;
  cfg.rig.image_h = 16;
  cfg.rig.image_w = 32;
  cfg.grid_h = 32;
  cfg.grid_w = 32;
  cfg.max_boxes = 4;
  return cfg;
}

ModelConfig small_model_config() {
  ModelConfig cfg = micro_config();
  cfg.image_h = 16;
  cfg.image_w = 32;
  cfg.latent_h = 4;
  cfg.latent_w = 4;
  cfg.out_h = 32;
  cfg.out_w = 32;
  cfg.rig_cameras = 4;
  return cfg;
}

}  // namespace

TEST_CASE("iou: identical, disjoint, containment, half overlap") {
  std::vector<std::uint8_t> target(100, 0);
  for (int i = 0; i < 20; ++i) target[i] = 1;

  const auto same = iou(logits_for(target), target, 1, 100);
  CHECK(same[0].value == doctest::Approx(1.0));
  CHECK(!same[0].empty_union);

  std::vector<std::uint8_t> shifted(100, 0);
  for (int i = 20; i < 40; ++i) shifted[i] = 1;
  CHECK(iou(logits_for(shifted), target, 1, 100)[0].value == doctest::Approx(0.0));

  // prediction covers the target plus an equal extra area: IoU 1/2
  std::vector<std::uint8_t> cover(100, 0);
  for (int i = 0; i < 40; ++i) cover[i] = 1;
  CHECK(iou(logits_for(cover), target, 1, 100)[0].value == doctest::Approx(0.5));

  // half-overlapping equal-size masks: counting oracle gives 10/30 = 1/3
  std::vector<std::uint8_t> half(100, 0);
  for (int i = 10; i < 30; ++i) half[i] = 1;
  int inter = 0, uni = 0;
  for (int i = 0; i < 100; ++i) {
    inter += half[i] && target[i];
    uni += half[i] || target[i];
  }
  CHECK(iou(logits_for(half), target, 1, 100)[0].value ==
        doctest::Approx(static_cast<double>(inter) / uni));
  CHECK(iou(logits_for(half), target, 1, 100)[0].value == doctest::Approx(1.0 / 3));
}

TEST_CASE("iou: empty union reports 1.0 with the degenerate flag") {
  std::vector<std::uint8_t> empty(50, 0);
  const auto res = iou(logits_for(empty), empty, 1, 50);
  CHECK(res[0].value == 1.0);
  CHECK(res[0].empty_union);
}

TEST_CASE("iou respects the valid mask and accumulates globally") {
  std::vector<std::uint8_t> target = {1, 1, 0, 0};
  std::vector<std::uint8_t> pred = {1, 0, 1, 0};
  std::vector<std::uint8_t> mask = {1, 0, 0, 1};  // only cells 0 and 3 count
  const auto res = iou(logits_for(pred), target, 1, 4, mask.data());
  CHECK(res[0].value == doctest::Approx(1.0));  // the one masked-in positive matches

  // global counts, not per-sample mean: two samples pooled
  IouAccumulator acc(1);
  std::vector<std::uint8_t> t1 = {1, 1, 1, 1}, p1 = {1, 1, 1, 1};  // 4/4
  std::vector<std::uint8_t> t2 = {1, 0, 0, 0}, p2 = {0, 1, 0, 0};  // 0/2
  acc.add(logits_for(p1), t1, 1, 4);
  acc.add(logits_for(p2), t2, 1, 4);
  CHECK(acc.channel(0).value == doctest::Approx(4.0 / 6.0));  // not (1 + 0)/2
}

TEST_CASE("iou is monotone under shrinking valid masks") {
  Rng rng(3);
  std::vector<std::uint8_t> target(64), pred(64);
  for (auto& v : target) v = rng.uniform() < 0.4;
  for (auto& v : pred) v = rng.uniform() < 0.4;
  const double full = iou(logits_for(pred), target, 1, 64)[0].value;
  (void)full;
  // shrinking the mask only removes cells; the value changes but stays in [0,1]
  std::vector<std::uint8_t> mask(64, 1);
  for (int drop = 0; drop < 60; drop += 7) {
    mask[drop] = 0;
    const auto r = iou(logits_for(pred), target, 1, 64, mask.data());
    CHECK(r[0].value >= 0.0);
    CHECK(r[0].value <= 1.0);
  }
}

TEST_CASE("distance-binned iou: d=0 equals plain, far bins flag empty") {
  const auto scfg = small_scene_config();
  std::vector<Sample> samples;
  for (int i = 0; i < 3; ++i) samples.push_back(make_sample(generate_scene(scfg, 500 + i), scfg));

  ModelConfig mcfg = small_model_config();
  auto params = ModelParams<float>::init(mcfg, 3);

  const auto bins = distance_binned_iou(params, mcfg, samples, {0.0, 5.0, 1000.0});
  const auto plain = evaluate_model(params, mcfg, samples);
  CHECK(bins[0].per_channel[0].value == doctest::Approx(plain[0].value));
  CHECK(bins[0].per_channel[1].value == doctest::Approx(plain[1].value));
  CHECK(bins[2].per_channel[0].empty_union);  // beyond the grid: no valid cells
  CHECK(bins[2].per_channel[0].value == 1.0);
}

TEST_CASE("camera dropout at m=0 is bit-identical to standard eval") {
  const auto scfg = small_scene_config();
  std::vector<Sample> samples;
  for (int i = 0; i < 3; ++i) samples.push_back(make_sample(generate_scene(scfg, 600 + i), scfg));
  ModelConfig mcfg = small_model_config();
  auto params = ModelParams<float>::init(mcfg, 5);

  const auto plain = evaluate_model(params, mcfg, samples);
  const auto drop0 = camera_dropout_eval(params, mcfg, samples, 0, 3, 77);
  CHECK(drop0.per_channel[0].value == plain[0].value);
  CHECK(drop0.per_channel[1].value == plain[1].value);

  CHECK_THROWS_AS(camera_dropout_eval(params, mcfg, samples, 4, 1, 1), std::invalid_argument);
  const auto drop2 = camera_dropout_eval(params, mcfg, samples, 2, 2, 78);
  CHECK(drop2.per_channel[0].value >= 0.0);
  CHECK(drop2.per_channel[0].value <= 1.0);
}

TEST_CASE("attention export: weights sum to one and csv round-trips") {
  const auto scfg = small_scene_config();
  const Sample sample = make_sample(generate_scene(scfg, 700), scfg);
  ModelConfig mcfg = small_model_config();
  auto params = ModelParams<float>::init(mcfg, 7);

  const auto dir = fs::temp_directory_path() / "cvt_attn_export";
  fs::remove_all(dir);
  const auto csv_path =
      export_attention_maps(params, mcfg, sample, {{0, 0}, {2, 3}}, dir.string());

  // parse the csv back and re-sum per query
  std::ifstream is(csv_path);
  REQUIRE(is.good());
  std::string line;
  std::getline(is, line);
  CHECK(line == "query_i,query_j,camera,location,weight");
  std::map<std::pair<int, int>, double> sums;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string qi, qj, cam, loc, w;
    std::getline(ls, qi, ',');
    std::getline(ls, qj, ',');
    std::getline(ls, cam, ',');
    std::getline(ls, loc, ',');
    std::getline(ls, w, ',');
    sums[{std::stoi(qi), std::stoi(qj)}] += std::stod(w);
  }
  REQUIRE(sums.size() == 2);
  for (const auto& [cell, total] : sums) CHECK(std::abs(total - 1.0) < 1e-4);

  // one pgm per (query, camera), P5 with maxval 255
  int pgm_count = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".pgm") {
      ++pgm_count;
      std::ifstream ps(e.path(), std::ios::binary);
      std::string magic;
      ps >> magic;
      CHECK(magic == "P5");
      int w, h, maxval;
      ps >> w >> h >> maxval;
      CHECK(w == sample.image_w);
      CHECK(h == sample.image_h);
      CHECK(maxval == 255);
    }
  CHECK(pgm_count == 2 * 4);

  CHECK_THROWS_AS(
      export_attention_maps(params, mcfg, sample, {{9, 9}}, dir.string()),
      std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("bilinear_resize matches the upsample2x taps on doubling") {
  Rng rng(11);
  std::vector<double> src(6 * 4);
  for (auto& v : src) v = rng.uniform(-1, 1);
  const auto up = bilinear_resize(src, 6, 4, 12, 8);
  auto t = Tensor<double>::from_data(src, {1, 6, 4});
  const auto want = bilinear_upsample2x(t);
  for (std::size_t i = 0; i < up.size(); ++i)
    CHECK(up[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
}
