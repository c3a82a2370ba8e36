#include "cvt/gradcheck.hpp"

#include <cmath>

namespace cvt {

namespace {

using T64 = Tensor<double>;

T64 rand_tensor(Rng& rng, Shape shape, double lo, double hi, bool rg = true) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return T64::from_data(std::move(d), std::move(shape), rg);
}

// Values bounded away from zero, for ops with a kink at the origin.
T64 rand_tensor_signed(Rng& rng, Shape shape, double mag_lo, double mag_hi) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) {
    const double m = rng.uniform(mag_lo, mag_hi);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return T64::from_data(std::move(d), std::move(shape), true);
}

// Fixed random weighting, built once per case, so every output element
// contributes to the loss and repeated evaluations see one function.
T64 make_weight(const Shape& shape, Rng& rng) {
  std::vector<double> w(shape_numel(shape));
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  return T64::from_data(std::move(w), shape);
}

T64 weighted_sum(const T64& x, const T64& w) { return sum(mul(x, w)); }

constexpr double kOpH = 1e-5;
constexpr double kOpTol = 1e-6;

GradCheckEntry check(const std::string& name, double err, double tol = kOpTol) {
  return {name, err, tol};
}

}  // namespace

std::vector<GradCheckEntry> run_gradcheck(std::uint64_t seed, bool include_full_model) {
  std::vector<GradCheckEntry> out;
  Rng rng(seed);

  {  // matmul, 3 shape pairs
    double err = 0;
    const std::vector<std::array<std::size_t, 3>> shapes = {{1, 1, 1}, {3, 4, 2}, {5, 3, 7}};
    for (const auto& [m, k, n] : shapes) {
      auto a = rand_tensor_signed(rng, {m, k}, 0.2, 1.5);
      auto b = rand_tensor_signed(rng, {k, n}, 0.2, 1.5);
      const auto W = make_weight({m, n}, rng);
      err = std::max(err, finite_diff_max_rel_err(
                              [&] { return weighted_sum(matmul(a, b), W); }, {a, b}, kOpH));
    }
    out.push_back(check("matmul", err));
  }

  {  // conv2d: identity kernel, strided + padded, multichannel with bias
    double err = 0;
    struct Case { Shape x, w; int stride, pad; };
    const std::vector<Case> cases = {{{1, 3, 3}, {1, 1, 1, 1}, 1, 0},
                                     {{2, 5, 5}, {3, 2, 3, 3}, 2, 1},
                                     {{3, 6, 4}, {2, 3, 3, 3}, 1, 1}};
    for (const auto& c : cases) {
      auto x = rand_tensor_signed(rng, c.x, 0.2, 1.2);
      auto w = rand_tensor_signed(rng, c.w, 0.2, 1.2);
      auto b = rand_tensor_signed(rng, {c.w[0]}, 0.1, 0.5);
      const auto W = make_weight(conv2d(x, w, b, c.stride, c.pad).shape(), rng);
      err = std::max(err, finite_diff_max_rel_err(
                              [&] { return weighted_sum(conv2d(x, w, b, c.stride, c.pad), W); },
                              {x, w, b}, kOpH));
    }
    out.push_back(check("conv2d", err));
  }

  {  // softmax over three axis layouts
    double err = 0;
    const std::vector<std::pair<Shape, int>> cases = {{{5}, 0}, {{3, 6}, 1}, {{2, 4, 3}, 1}};
    for (const auto& [shape, axis] : cases) {
      auto x = rand_tensor(rng, shape, -2.0, 2.0);
      const auto W = make_weight(shape, rng);
      const int ax = axis;
      err = std::max(err, finite_diff_max_rel_err(
                              [&, ax] { return weighted_sum(softmax(x, ax), W); }, {x}, kOpH));
    }
    out.push_back(check("softmax", err));
  }

  {  // layer_norm including gain/bias grads
    double err = 0;
    const std::vector<Shape> cases = {{1, 4}, {4, 8}, {2, 3, 6}};
    for (const auto& shape : cases) {
      const std::size_t D = shape.back();
      auto x = rand_tensor(rng, shape, -1.5, 1.5);
      auto g = rand_tensor(rng, {D}, 0.5, 1.5);
      auto b = rand_tensor(rng, {D}, -0.3, 0.3);
      const auto W = make_weight(shape, rng);
      err = std::max(err, finite_diff_max_rel_err(
                              [&] { return weighted_sum(layer_norm(x, g, b), W); }, {x, g, b},
                              kOpH));
    }
    out.push_back(check("layer_norm", err));
  }

  {  // bilinear_upsample2x
    double err = 0;
    const std::vector<Shape> cases = {{1, 1, 1}, {2, 3, 5}, {3, 2, 2}};
    for (const auto& shape : cases) {
      auto x = rand_tensor(rng, shape, -1.0, 1.0);
      const auto W = make_weight({shape[0], 2 * shape[1], 2 * shape[2]}, rng);
      err = std::max(err, finite_diff_max_rel_err(
                              [&] { return weighted_sum(bilinear_upsample2x(x), W); }, {x},
                              kOpH));
    }
    out.push_back(check("bilinear_upsample2x", err));
  }

  {  // elementwise ops; relu inputs avoid the kink at 0
    double err = 0;
    const std::vector<Shape> cases = {{3}, {2, 5}, {4, 3, 2}};
    for (const auto& shape : cases) {
      auto x = rand_tensor_signed(rng, shape, 0.05, 2.0);
      auto y = rand_tensor_signed(rng, shape, 0.05, 2.0);
      const auto W = make_weight(shape, rng);
      err = std::max(err, finite_diff_max_rel_err(
                              [&] {
                                auto z = add(mul(relu(x), sigmoid(y)), gelu(sub(x, y)));
                                return weighted_sum(z, W);
                              },
                              {x, y}, kOpH));
    }
    out.push_back(check("elementwise(relu,gelu,sigmoid,add,sub,mul)", err));
  }

  {  // log_clamped + pow_scalar away from the clamp/origin
    double err = 0;
    const std::vector<Shape> cases = {{4}, {3, 3}, {2, 2, 2}};
    for (const auto& shape : cases) {
      auto x = rand_tensor(rng, shape, 0.1, 0.9);
      const auto W = make_weight(shape, rng);
      err = std::max(err, finite_diff_max_rel_err(
                              [&] {
                                auto z = mul(pow_scalar(x, 2.5), log_clamped(x));
                                return weighted_sum(z, W);
                              },
                              {x}, kOpH));
    }
    out.push_back(check("log_clamped,pow_scalar", err));
  }

  {  // row-vector broadcasts and row normalization
    double err = 0;
    const std::vector<Shape> cases = {{1, 3}, {4, 6}, {5, 2}};
    for (const auto& shape : cases) {
      auto x = rand_tensor_signed(rng, shape, 0.2, 1.5);
      auto v = rand_tensor_signed(rng, {shape[1]}, 0.2, 1.0);
      auto u = rand_tensor_signed(rng, {shape[1]}, 0.2, 1.0);
      const auto W = make_weight(shape, rng);
      const auto W2 = make_weight(shape, rng);
      err = std::max(err, finite_diff_max_rel_err(
                              [&] {
                                auto z = l2_normalize_rows(add_rowvec(x, v));
                                auto z2 = sub_rowvec(x, u);
                                return add(weighted_sum(z, W), weighted_sum(z2, W2));
                              },
                              {x, v, u}, kOpH));
    }
    out.push_back(check("rowvec,l2_normalize_rows", err));
  }

  {  // shape plumbing: reshape, transpose, concat, crop
    double err = 0;
    for (int rep = 0; rep < 3; ++rep) {
      auto a = rand_tensor(rng, {2, 3}, -1.0, 1.0);
      auto b = rand_tensor(rng, {2, 3}, -1.0, 1.0);
      auto c = rand_tensor(rng, {2, 6, 5}, -1.0, 1.0);
      const auto W = make_weight({3, 4}, rng);
      err = std::max(err, finite_diff_max_rel_err(
                              [&] {
                                auto cat = concat2d<double>({transpose2d(a), transpose2d(b)}, 1);
                                auto cropped = center_crop(c, 4, 3);
                                auto flat = reshape(cropped, Shape{2 * 4 * 3});
                                return add(weighted_sum(cat, W), mean(flat));
                              },
                              {a, b, c}, kOpH));
    }
    out.push_back(check("reshape,transpose,concat,crop", err));
  }

  {  // focal loss against random binary targets
    double err = 0;
    Rng trng(seed + 99);
    for (int rep = 0; rep < 3; ++rep) {
      auto logits = rand_tensor_signed(rng, {2, 4, 3}, 0.1, 2.0);
      std::vector<std::uint8_t> target(logits.numel());
      for (auto& t : target) t = trng.uniform() < 0.4 ? 1 : 0;
      err = std::max(err, finite_diff_max_rel_err(
                              [&] { return focal_loss(logits, target, 2.0, 0.25); }, {logits},
                              kOpH));
    }
    out.push_back(check("focal_loss", err));
  }

  {  // cross-view attention block over 2 cameras at 2 micro scales
    double err = 0;
    AttentionConfig acfg;
    acfg.heads = 2;
    acfg.d_head = 3;
    acfg.d = 6;
    for (int rep = 0; rep < 3; ++rep) {
      Rng prng(seed + 7 + rep);
      auto params = BlockParams<double>::init(prng, acfg, 0.3);
      auto c = rand_tensor(rng, {4, 6}, -1.0, 1.0);
      std::vector<CameraTokens<double>> cams(2);
      for (int k = 0; k < 2; ++k) {
        cams[k].tau = rand_tensor(rng, {1, 6}, -1.0, 1.0);
        cams[k].delta = rand_tensor(rng, {3, 6}, -1.0, 1.0);
        cams[k].phi = rand_tensor(rng, {3, 6}, -1.0, 1.0);
        cams[k].camera_id = k;
      }
      std::vector<T64> leaves = {c, cams[0].tau, cams[0].delta, cams[0].phi,
                                 cams[1].tau, cams[1].delta, cams[1].phi};
      std::vector<T64> block_params;
      block_params.push_back(params.ln1_g);
      block_params.push_back(params.ln1_b);
      for (auto& h : params.attn.heads)
        for (auto* t : {&h.wq, &h.bq, &h.wk, &h.bk, &h.wv, &h.bv, &h.wo})
          block_params.push_back(*t);
      block_params.push_back(params.attn.bo);
      for (auto* t : {&params.ln2_g, &params.ln2_b, &params.mlp_w1, &params.mlp_b1,
                      &params.mlp_w2, &params.mlp_b2})
        block_params.push_back(*t);
      leaves.insert(leaves.end(), block_params.begin(), block_params.end());
      const auto W = make_weight(c.shape(), rng);
      err = std::max(err, finite_diff_max_rel_err(
                              [&] {
                                return weighted_sum(cvt_block(c, c, cams, params, acfg), W);
                              },
                              leaves, kOpH));
    }
    out.push_back(check("cvt_block", err));
  }

  if (include_full_model) {
    // Full micro model: D=8, 2 cameras, 8x16 images, latent 4x4. Params
    // are re-randomized at a larger scale than the training init so
    // gradients stay well above finite-difference noise.
    const ModelConfig cfg = micro_config();
    auto params = ModelParams<double>::init(cfg, seed);
    Rng prng(seed + 1);
    params.visit([&](const std::string& name, Tensor<double>& t) {
      const bool is_gain = name.find("ln") != std::string::npos && name.back() == 'g';
      for (auto& v : t.data())
        v = is_gain ? 1.0 + 0.1 * prng.gaussian() : 0.25 * prng.gaussian();
    });

    const auto rig = build_rig(RigSpec{2, cfg.image_h, cfg.image_w, 100.0, 1.0, 1.5, 10.0});
    std::vector<CameraInput<double>> cams(2);
    for (int k = 0; k < 2; ++k) {
      cams[k].image = rand_tensor(rng, {3, static_cast<std::size_t>(cfg.image_h),
                                        static_cast<std::size_t>(cfg.image_w)},
                                  0.0, 1.0, false);
      cams[k].calib = rig[k];
      cams[k].camera_id = k;
    }
    std::vector<std::uint8_t> target(static_cast<std::size_t>(cfg.channels) * cfg.out_h *
                                     cfg.out_w);
    Rng trng(seed + 2);
    for (auto& t : target) t = trng.uniform() < 0.3 ? 1 : 0;

    GradCheckEntry entry;
    entry.name = "full_micro_model";
    entry.tolerance = 1e-5;
    entry.max_rel_err = finite_diff_max_rel_err(
        [&] {
          const auto res = forward(cams, params, cfg);
          return focal_loss(res.logits, target, 2.0, 0.25);
        },
        params.trainable(), 1e-5, 1e-5);
    out.push_back(entry);
  }

  return out;
}

}  // namespace cvt
