#include "cvt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <utility>

namespace fs = std::filesystem;

namespace cvt {

void IouAccumulator::add(const std::vector<float>& logits, const std::vector<std::uint8_t>& target,
                         int channels, std::size_t hw, const std::uint8_t* valid_mask,
                         double threshold) {
  if (channels != static_cast<int>(inter_.size()))
    throw std::invalid_argument("iou: channel count mismatch");
  if (logits.size() != target.size() || logits.size() != static_cast<std::size_t>(channels) * hw)
    throw std::invalid_argument("iou: prediction and target sizes disagree");
  if (threshold <= 0.0 || threshold >= 1.0) throw std::invalid_argument("iou: threshold in (0,1)");
  // sigmoid(logit) >= threshold  <=>  logit >= logit(threshold)
  const float cut = static_cast<float>(std::log(threshold / (1.0 - threshold)));
  for (int c = 0; c < channels; ++c) {
    const std::size_t base = static_cast<std::size_t>(c) * hw;
    std::uint64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      if (valid_mask && !valid_mask[i]) continue;
      const bool pred = logits[base + i] >= cut;
      const bool gt = target[base + i] != 0;
      inter += pred && gt;
      uni += pred || gt;
    }
    inter_[c] += inter;
    uni_[c] += uni;
  }
}

IouResult IouAccumulator::channel(int c) const {
  IouResult r;
  if (uni_[c] == 0) {
    r.value = 1.0;
    r.empty_union = true;
  } else {
    r.value = static_cast<double>(inter_[c]) / static_cast<double>(uni_[c]);
  }
  return r;
}

std::vector<IouResult> iou(const std::vector<float>& logits,
                           const std::vector<std::uint8_t>& target, int channels, std::size_t hw,
                           const std::uint8_t* valid_mask, double threshold) {
  IouAccumulator acc(channels);
  acc.add(logits, target, channels, hw, valid_mask, threshold);
  std::vector<IouResult> out;
  for (int c = 0; c < channels; ++c) out.push_back(acc.channel(c));
  return out;
}

std::vector<CameraInput<float>> sample_inputs(const Sample& s) {
  std::vector<CameraInput<float>> cams;
  cams.reserve(s.images.size());
  for (std::size_t k = 0; k < s.images.size(); ++k) {
    CameraInput<float> in;
    in.image = Tensor<float>::from_data(s.images[k],
                                        {3, static_cast<std::size_t>(s.image_h),
                                         static_cast<std::size_t>(s.image_w)});
    in.calib = s.calibs[k];
    in.camera_id = static_cast<int>(k);
    cams.push_back(std::move(in));
  }
  return cams;
}

std::vector<IouResult> evaluate_model(ModelParams<float>& params, const ModelConfig& cfg,
                                      const std::vector<Sample>& samples,
                                      const std::uint8_t* valid_mask,
                                      const std::vector<std::vector<int>>* keep_cameras) {
  NoGradGuard ng;
  IouAccumulator acc(cfg.channels);
  const std::size_t hw = static_cast<std::size_t>(cfg.out_h) * cfg.out_w;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto cams = sample_inputs(samples[i]);
    if (keep_cameras) {
      std::vector<CameraInput<float>> subset;
      for (int k : (*keep_cameras)[i]) subset.push_back(cams[k]);
      cams = std::move(subset);
    }
    const auto result = forward(cams, params, cfg);
    acc.add(result.logits.data(), samples[i].label, cfg.channels, hw, valid_mask);
  }
  std::vector<IouResult> out;
  for (int c = 0; c < cfg.channels; ++c) out.push_back(acc.channel(c));
  return out;
}

std::vector<DistanceBin> distance_binned_iou(ModelParams<float>& params, const ModelConfig& cfg,
                                             const std::vector<Sample>& samples,
                                             const std::vector<double>& thresholds) {
  if (samples.empty()) throw std::invalid_argument("distance_binned_iou: empty dataset");
  std::vector<DistanceBin> out;
  for (double d : thresholds) {
    const auto mask = distance_mask(samples[0].grid, d);
    DistanceBin bin;
    bin.d_min = d;
    bin.per_channel = evaluate_model(params, cfg, samples, mask.data());
    out.push_back(std::move(bin));
  }
  return out;
}

DropoutPoint camera_dropout_eval(ModelParams<float>& params, const ModelConfig& cfg,
                                 const std::vector<Sample>& samples, int m, int trials,
                                 std::uint64_t seed) {
  if (samples.empty()) throw std::invalid_argument("camera_dropout_eval: empty dataset");
  const int rig = static_cast<int>(samples[0].calibs.size());
  if (m < 0 || m >= rig)
    throw std::invalid_argument("camera_dropout_eval: cannot drop " + std::to_string(m) + " of " +
                                std::to_string(rig) + " cameras");
  DropoutPoint point;
  point.dropped = m;
  std::vector<std::vector<double>> sums(cfg.channels);
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(seed + static_cast<std::uint64_t>(trial) * 0x9e3779b97f4a7c15ull);
    std::vector<std::vector<int>> keep(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::vector<int> order(rig);
      for (int k = 0; k < rig; ++k) order[k] = k;
      rng.shuffle(order.begin(), order.end());
      order.resize(rig - m);
      std::sort(order.begin(), order.end());
      keep[i] = std::move(order);
    }
    const auto res = evaluate_model(params, cfg, samples, nullptr, &keep);
    for (int c = 0; c < cfg.channels; ++c) sums[c].push_back(res[c].value);
  }
  for (int c = 0; c < cfg.channels; ++c) {
    IouResult r;
    double acc = 0;
    for (double v : sums[c]) acc += v;
    r.value = acc / static_cast<double>(trials);
    point.per_channel.push_back(r);
  }
  return point;
}

void write_pgm(const std::string& path, int h, int w, const std::vector<std::uint8_t>& gray) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("pgm: cannot write " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
}

std::vector<double> bilinear_resize(const std::vector<double>& src, int sh, int sw, int dh,
                                    int dw) {
  std::vector<double> out(static_cast<std::size_t>(dh) * dw);
  const double sy = static_cast<double>(sh) / dh;
  const double sx = static_cast<double>(sw) / dw;
  for (int y = 0; y < dh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::max(0.0, std::min(fy, sh - 1.0));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (int x = 0; x < dw; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::max(0.0, std::min(fx, sw - 1.0));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      const double top = src[y0 * sw + x0] * (1 - wx) + src[y0 * sw + x1] * wx;
      const double bot = src[y1 * sw + x0] * (1 - wx) + src[y1 * sw + x1] * wx;
      out[static_cast<std::size_t>(y) * dw + x] = top * (1 - wy) + bot * wy;
    }
  }
  return out;
}

std::string export_attention_maps(ModelParams<float>& params, const ModelConfig& cfg,
                                  const Sample& sample,
                                  const std::vector<std::pair<int, int>>& query_cells,
                                  const std::string& out_dir) {
  NoGradGuard ng;
  fs::create_directories(out_dir);
  const auto result = forward(sample_inputs(sample), params, cfg, true);
  const AttentionTrace<float>& trace = result.traces.back();  // fine scale

  const std::string csv_path = (fs::path(out_dir) / "attention_weights.csv").string();
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw std::runtime_error("attention export: cannot write " + csv_path);
  csv << "query_i,query_j,camera,location,weight\n";

  for (const auto& [qi, qj] : query_cells) {
    if (qi < 0 || qi >= cfg.latent_h || qj < 0 || qj >= cfg.latent_w)
      throw std::invalid_argument("attention export: query cell (" + std::to_string(qi) + "," +
                                  std::to_string(qj) + ") outside latent grid");
    const int q = qi * cfg.latent_w + qj;
    const int total_keys = trace.total_keys();
    // head-mean weights for this query; they sum to 1 across all cameras
    std::vector<double> weights(total_keys, 0.0);
    for (int h = 0; h < trace.heads; ++h)
      for (int k = 0; k < total_keys; ++k)
        weights[k] += trace.weights[h][static_cast<std::size_t>(q) * total_keys + k];
    for (double& v : weights) v /= trace.heads;

    int offset = 0;
    for (std::size_t ci = 0; ci < trace.camera_ids.size(); ++ci) {
      const int cam = trace.camera_ids[ci];
      const int fh = trace.feat_hs[ci], fw = trace.feat_ws[ci];
      const int count = trace.key_counts[ci];
      std::vector<double> grid(weights.begin() + offset, weights.begin() + offset + count);
      for (int k = 0; k < count; ++k)
        csv << qi << "," << qj << "," << cam << "," << k << "," << grid[k] << "\n";

      const auto up = bilinear_resize(grid, fh, fw, sample.image_h, sample.image_w);
      double mx = 0;
      for (double v : up) mx = std::max(mx, v);
      std::vector<std::uint8_t> gray(up.size(), 0);
      if (mx > 0)
        for (std::size_t i = 0; i < up.size(); ++i)
          gray[i] = static_cast<std::uint8_t>(std::lround(255.0 * up[i] / mx));
      char name[64];
      std::snprintf(name, sizeof(name), "attn_q%d_%d_cam%d.pgm", qi, qj, cam);
      write_pgm((fs::path(out_dir) / name).string(), sample.image_h, sample.image_w, gray);
      offset += count;
    }
  }
  return csv_path;
}

}  // namespace cvt
