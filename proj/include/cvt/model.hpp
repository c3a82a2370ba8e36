#pragma once

// The full network: shared CNN encoder with taps at strides 8 and 16,
// per-scale 1x1 projection to width D, two cross-view refinement blocks
// applied coarse-to-fine, and an upsampling decoder to map-view logits.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cvt/attention.hpp"
#include "cvt/embeddings.hpp"
#include "cvt/geometry.hpp"
#include "cvt/tensor.hpp"

namespace cvt {

struct ModelConfig {
  int d = 32;
  int heads = 2;
  int d_head = 16;
  int resolutions = 2;  // feature scales == refinement blocks
  int latent_h = 8, latent_w = 8;
  int image_h = 64, image_w = 128;
  int out_h = 64, out_w = 64;
  int channels = 2;
  std::array<int, 4> enc_widths{8, 16, 32, 32};
  std::array<int, 3> dec_widths{32, 16, 8};
  EmbeddingMode embedding = EmbeddingMode::CameraAwareLinear;
  bool keys_use_phi = true;
  bool refine_queries = true;
  double temperature = 1.0;
  int rig_cameras = 4;  // needed only by the per-camera embedding table

  void validate() const {
    if (resolutions != 2)
      throw std::invalid_argument("model: this architecture provides exactly 2 feature scales");
    if (d <= 0 || heads <= 0 || d_head <= 0)
      throw std::invalid_argument("model: D, heads, d_head must be positive");
    if (latent_h * 8 < out_h || latent_w * 8 < out_w)
      throw std::invalid_argument("model: latent grid x8 must cover the output dims");
    if (!keys_use_phi && embedding == EmbeddingMode::None)
      throw std::invalid_argument("model: attention keys need image features or delta");
  }

  AttentionConfig attention_config() const {
    AttentionConfig a;
    a.heads = heads;
    a.d_head = d_head;
    a.d = d;
    a.temperature = temperature;
    a.keys_use_delta = embedding != EmbeddingMode::None;
    a.keys_use_phi = keys_use_phi;
    return a;
  }

  // ceil(x / 2) per stride-2 conv (kernel 3, pad 1)
  static int conv_down(int v) { return (v - 1) / 2 + 1; }
  int feat_h(int scale) const {  // scale 0 = stride 8, scale 1 = stride 16
    int v = conv_down(conv_down(conv_down(image_h)));
    return scale == 0 ? v : conv_down(v);
  }
  int feat_w(int scale) const {
    int v = conv_down(conv_down(conv_down(image_w)));
    return scale == 0 ? v : conv_down(v);
  }
};

inline ModelConfig desk_config() { return ModelConfig{}; }

inline ModelConfig paper_scale_config() {
  ModelConfig c;
  c.d = 128;
  c.heads = 4;
  c.d_head = 64;
  c.latent_h = 25;
  c.latent_w = 25;
  c.image_h = 224;
  c.image_w = 448;
  c.out_h = 200;
  c.out_w = 200;
  c.enc_widths = {32, 64, 128, 128};
  c.dec_widths = {128, 64, 64};
  c.rig_cameras = 6;
  return c;
}

inline ModelConfig micro_config() {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.d_head = 4;
  c.latent_h = 4;
  c.latent_w = 4;
  c.image_h = 8;
  c.image_w = 16;
  c.out_h = 32;
  c.out_w = 32;
  c.enc_widths = {4, 8, 8, 8};
  c.dec_widths = {8, 8, 8};
  c.rig_cameras = 2;
  return c;
}

template <typename T>
struct ConvParams {
  Tensor<T> w, b;

  static ConvParams he_init(Rng& rng, std::size_t out, std::size_t in, std::size_t k) {
    ConvParams p;
    const double stddev = std::sqrt(2.0 / static_cast<double>(in * k * k));
    p.w = Tensor<T>::randn(rng, {out, in, k, k}, stddev, true);
    p.b = Tensor<T>::zeros({out}, true);
    return p;
  }
};

template <typename T>
struct ModelParams {
  std::vector<ConvParams<T>> enc;        // conv0..conv3b (strides 2,2,2,1,2,1)
  ConvParams<T> proj8, proj16;           // 1x1 projections to D
  Mlp2<T> delta_mlp;                     // shared across cameras
  FourierEmbed<T> fourier;               // only for the Fourier mode
  std::vector<Tensor<T>> per_camera;     // [scale * rig_cameras + cam], per-camera mode
  Mlp2<T> tau_mlp;
  Tensor<T> c0;                          // (latent_h * latent_w) x D
  std::vector<BlockParams<T>> blocks;    // [0] coarse (16x), [1] fine (8x)
  std::vector<ConvParams<T>> dec;        // three 3x3 convs
  ConvParams<T> head;                    // 1x1 to channels

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

  // Enumerates every tensor in a fixed order. Non-trainable tensors (the
  // Fourier frequency matrix) are included so checkpoints capture them.
  void visit(const std::function<void(const std::string&, Tensor<T>&)>& fn);

  std::vector<Tensor<T>> trainable() {
    std::vector<Tensor<T>> out;
    visit([&](const std::string&, Tensor<T>& t) {
      if (t.requires_grad()) out.push_back(t);
    });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Tensor<T>& t) {
      if (t.requires_grad()) n += t.numel();
    });
    return n;
  }
};

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams p;
  const auto D = static_cast<std::size_t>(cfg.d);
  const auto& w = cfg.enc_widths;
  p.enc.push_back(ConvParams<T>::he_init(rng, w[0], 3, 3));
  p.enc.push_back(ConvParams<T>::he_init(rng, w[1], w[0], 3));
  p.enc.push_back(ConvParams<T>::he_init(rng, w[2], w[1], 3));
  p.enc.push_back(ConvParams<T>::he_init(rng, w[2], w[2], 3));
  p.enc.push_back(ConvParams<T>::he_init(rng, w[3], w[2], 3));
  p.enc.push_back(ConvParams<T>::he_init(rng, w[3], w[3], 3));
  p.proj8 = ConvParams<T>::he_init(rng, D, w[2], 1);
  p.proj16 = ConvParams<T>::he_init(rng, D, w[3], 1);

  const double embed_std = 0.02;
  if (cfg.embedding == EmbeddingMode::CameraAwareLinear)
    p.delta_mlp = Mlp2<T>::init(rng, 3, D, embed_std);
  if (cfg.embedding == EmbeddingMode::CameraAwareFourier)
    p.fourier = FourierEmbed<T>::init(rng, D, embed_std);
  if (cfg.embedding == EmbeddingMode::LearnedPerCamera)
    for (int scale = 0; scale < 2; ++scale) {
      const auto L = static_cast<std::size_t>(cfg.feat_h(scale)) * cfg.feat_w(scale);
      for (int cam = 0; cam < cfg.rig_cameras; ++cam)
        p.per_camera.push_back(Tensor<T>::randn(rng, {L, D}, embed_std, true));
    }
  p.tau_mlp = Mlp2<T>::init(rng, 3, D, embed_std);
  p.c0 = Tensor<T>::randn(rng, {static_cast<std::size_t>(cfg.latent_h) * cfg.latent_w, D},
                          embed_std, true);

  const AttentionConfig acfg = cfg.attention_config();
  p.blocks.push_back(BlockParams<T>::init(rng, acfg, embed_std));
  p.blocks.push_back(BlockParams<T>::init(rng, acfg, embed_std));

  const auto& dw = cfg.dec_widths;
  p.dec.push_back(ConvParams<T>::he_init(rng, dw[0], D, 3));
  p.dec.push_back(ConvParams<T>::he_init(rng, dw[1], dw[0], 3));
  p.dec.push_back(ConvParams<T>::he_init(rng, dw[2], dw[1], 3));
  p.head = ConvParams<T>::he_init(rng, cfg.channels, dw[2], 1);
  return p;
}

template <typename T>
void ModelParams<T>::visit(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  static const char* enc_names[] = {"enc.conv0", "enc.conv1", "enc.conv2",
                                    "enc.conv2b", "enc.conv3", "enc.conv3b"};
  for (std::size_t i = 0; i < enc.size(); ++i) {
    fn(std::string(enc_names[i]) + ".w", enc[i].w);
    fn(std::string(enc_names[i]) + ".b", enc[i].b);
  }
  fn("proj8.w", proj8.w);
  fn("proj8.b", proj8.b);
  fn("proj16.w", proj16.w);
  fn("proj16.b", proj16.b);
  if (delta_mlp.w1.defined()) {
    fn("delta.w1", delta_mlp.w1);
    fn("delta.b1", delta_mlp.b1);
    fn("delta.w2", delta_mlp.w2);
    fn("delta.b2", delta_mlp.b2);
  }
  if (fourier.w.defined()) {
    fn("delta.fourier.freq", fourier.freq);
    fn("delta.fourier.w", fourier.w);
    fn("delta.fourier.b", fourier.b);
  }
  for (std::size_t i = 0; i < per_camera.size(); ++i)
    fn("delta.per_camera." + std::to_string(i), per_camera[i]);
  fn("tau.w1", tau_mlp.w1);
  fn("tau.b1", tau_mlp.b1);
  fn("tau.w2", tau_mlp.w2);
  fn("tau.b2", tau_mlp.b2);
  fn("c0", c0);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    auto& blk = blocks[b];
    fn(pre + "ln1.g", blk.ln1_g);
    fn(pre + "ln1.b", blk.ln1_b);
    for (std::size_t h = 0; h < blk.attn.heads.size(); ++h) {
      const std::string hp = pre + "attn.h" + std::to_string(h) + ".";
      auto& head = blk.attn.heads[h];
      fn(hp + "wq", head.wq);
      fn(hp + "bq", head.bq);
      fn(hp + "wk", head.wk);
      fn(hp + "bk", head.bk);
      fn(hp + "wv", head.wv);
      fn(hp + "bv", head.bv);
      fn(hp + "wo", head.wo);
    }
    fn(pre + "attn.bo", blk.attn.bo);
    fn(pre + "ln2.g", blk.ln2_g);
    fn(pre + "ln2.b", blk.ln2_b);
    fn(pre + "mlp.w1", blk.mlp_w1);
    fn(pre + "mlp.b1", blk.mlp_b1);
    fn(pre + "mlp.w2", blk.mlp_w2);
    fn(pre + "mlp.b2", blk.mlp_b2);
  }
  for (std::size_t i = 0; i < dec.size(); ++i) {
    fn("dec.conv" + std::to_string(i) + ".w", dec[i].w);
    fn("dec.conv" + std::to_string(i) + ".b", dec[i].b);
  }
  fn("head.w", head.w);
  fn("head.b", head.b);
}

// One camera's input to forward(). camera_id selects the learned
// per-camera embedding in that mode and labels attention traces.
template <typename T>
struct CameraInput {
  Tensor<T> image;  // 3 x H x W
  CameraCalib calib;
  int camera_id = 0;
};

template <typename T>
struct EncodedCamera {
  Tensor<T> phi8, phi16;  // rows: L x D
};

namespace detail {

template <typename T>
Tensor<T> to_rows(const Tensor<T>& chw) {  // C x H x W -> (H*W) x C
  const std::size_t C = chw.dim(0), L = chw.dim(1) * chw.dim(2);
  return transpose2d(reshape(chw, {C, L}));
}

}  // namespace detail

// Shared-weight CNN applied per camera; taps at strides 8 and 16 are
// projected to width D by 1x1 convs, producing phi at the attention width.
template <typename T>
EncodedCamera<T> encode_image(const Tensor<T>& image, const ModelParams<T>& p,
                              const ModelConfig& cfg) {
  if (static_cast<int>(image.dim(1)) != cfg.image_h ||
      static_cast<int>(image.dim(2)) != cfg.image_w)
    throw std::invalid_argument("encode_image: image dims " + shape_str(image.shape()) +
                                " do not match config");
  auto x = relu(conv2d(image, p.enc[0].w, p.enc[0].b, 2, 1));
  x = relu(conv2d(x, p.enc[1].w, p.enc[1].b, 2, 1));
  x = relu(conv2d(x, p.enc[2].w, p.enc[2].b, 2, 1));
  const auto tap8 = relu(conv2d(x, p.enc[3].w, p.enc[3].b, 1, 1));
  auto y = relu(conv2d(tap8, p.enc[4].w, p.enc[4].b, 2, 1));
  const auto tap16 = relu(conv2d(y, p.enc[5].w, p.enc[5].b, 1, 1));
  EncodedCamera<T> out;
  out.phi8 = detail::to_rows(conv2d(tap8, p.proj8.w, p.proj8.b, 1, 0));
  out.phi16 = detail::to_rows(conv2d(tap16, p.proj16.w, p.proj16.b, 1, 0));
  return out;
}

template <typename T>
Tensor<T> compute_delta(const ModelParams<T>& p, const ModelConfig& cfg, const CameraCalib& calib,
                        int camera_id, int scale) {
  const int fh = cfg.feat_h(scale), fw = cfg.feat_w(scale);
  switch (cfg.embedding) {
    case EmbeddingMode::None:
      return {};
    case EmbeddingMode::LearnedPerCamera: {
      if (camera_id < 0 || camera_id >= cfg.rig_cameras)
        throw std::invalid_argument("compute_delta: camera id " + std::to_string(camera_id) +
                                    " outside the learned rig of " +
                                    std::to_string(cfg.rig_cameras));
      return p.per_camera[static_cast<std::size_t>(scale) * cfg.rig_cameras + camera_id];
    }
    case EmbeddingMode::CameraAwareFourier: {
      const RayGrid rays = ray_grid(calib, fh, fw, cfg.image_h, cfg.image_w);
      return p.fourier.forward(ray_direction_tensor<T>(rays));
    }
    default:
      return ray_embedding(calib, fh, fw, cfg.image_h, cfg.image_w, p.delta_mlp);
  }
}

// Decoder: three (bilinear upsample + 3x3 conv + ReLU) stages, then a 1x1
// conv to logits, center-cropped when the upsampled grid overshoots.
template <typename T>
Tensor<T> decode_map(const Tensor<T>& grid, const ModelParams<T>& p, const ModelConfig& cfg) {
  auto x = grid;
  for (const auto& conv : p.dec) x = relu(conv2d(bilinear_upsample2x(x), conv.w, conv.b, 1, 1));
  auto logits = conv2d(x, p.head.w, p.head.b, 1, 0);
  if (static_cast<int>(logits.dim(1)) < cfg.out_h || static_cast<int>(logits.dim(2)) < cfg.out_w)
    throw std::invalid_argument("decode_map: decoded grid " + shape_str(logits.shape()) +
                                " smaller than output dims");
  if (static_cast<int>(logits.dim(1)) != cfg.out_h || static_cast<int>(logits.dim(2)) != cfg.out_w)
    logits = center_crop(logits, cfg.out_h, cfg.out_w);
  return logits;
}

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // channels x out_h x out_w
  std::vector<AttentionTrace<T>> traces;  // per block when retained
};

template <typename T>
ForwardResult<T> forward(const std::vector<CameraInput<T>>& cameras, const ModelParams<T>& p,
                         const ModelConfig& cfg, bool retain_trace = false) {
  if (cameras.empty()) throw std::invalid_argument("forward: need at least one camera");
  const AttentionConfig acfg = cfg.attention_config();

  std::vector<CameraTokens<T>> coarse, fine;
  for (const auto& cam : cameras) {
    const EncodedCamera<T> enc = encode_image(cam.image, p, cfg);
    const auto tau = location_embedding(std::vector<CameraCalib>{cam.calib}, p.tau_mlp)[0];
    CameraTokens<T> t16;
    t16.tau = tau;
    t16.delta = compute_delta(p, cfg, cam.calib, cam.camera_id, 1);
    t16.phi = enc.phi16;
    t16.feat_h = cfg.feat_h(1);
    t16.feat_w = cfg.feat_w(1);
    t16.camera_id = cam.camera_id;
    coarse.push_back(std::move(t16));
    CameraTokens<T> t8;
    t8.tau = tau;
    t8.delta = compute_delta(p, cfg, cam.calib, cam.camera_id, 0);
    t8.phi = enc.phi8;
    t8.feat_h = cfg.feat_h(0);
    t8.feat_w = cfg.feat_w(0);
    t8.camera_id = cam.camera_id;
    fine.push_back(std::move(t8));
  }

  ForwardResult<T> out;
  if (retain_trace) out.traces.resize(2);
  AttentionTrace<T>* tr0 = retain_trace ? &out.traces[0] : nullptr;
  AttentionTrace<T>* tr1 = retain_trace ? &out.traces[1] : nullptr;

  // Lowest resolution first, refining the same latent stream.
  auto c = cvt_block(p.c0, p.c0, coarse, p.blocks[0], acfg, tr0);
  const auto& q1 = cfg.refine_queries ? c : p.c0;
  c = cvt_block(c, q1, fine, p.blocks[1], acfg, tr1);

  const auto grid = reshape(transpose2d(c), {static_cast<std::size_t>(cfg.d),
                                             static_cast<std::size_t>(cfg.latent_h),
                                             static_cast<std::size_t>(cfg.latent_w)});
  out.logits = decode_map(grid, p, cfg);
  return out;
}

}  // namespace cvt
