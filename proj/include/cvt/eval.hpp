#pragma once

// IoU metrics (global counts over a dataset), distance-binned curves,
// camera-dropout sweeps, and attention-map export.

#include <cstdint>
#include <string>
#include <vector>

#include "cvt/model.hpp"
#include "cvt/scene.hpp"

namespace cvt {

struct IouResult {
  double value = 1.0;
  bool empty_union = false;  // reported as 1.0 with this flag set
};

// Intersections and unions are summed over every sample fed in, then
// divided once; this is global-count IoU, not a per-sample mean.
class IouAccumulator {
 public:
  explicit IouAccumulator(int channels) : inter_(channels, 0), uni_(channels, 0) {}

  // logits: channels x h x w; target: same dims in {0,1};
  // valid_mask: optional h x w, cells outside it are ignored.
  void add(const std::vector<float>& logits, const std::vector<std::uint8_t>& target,
           int channels, std::size_t hw, const std::uint8_t* valid_mask = nullptr,
           double threshold = 0.5);

  IouResult channel(int c) const;
  int channels() const { return static_cast<int>(inter_.size()); }

 private:
  std::vector<std::uint64_t> inter_, uni_;
};

// Single-pair convenience wrapper around the accumulator.
std::vector<IouResult> iou(const std::vector<float>& logits,
                           const std::vector<std::uint8_t>& target, int channels, std::size_t hw,
                           const std::uint8_t* valid_mask = nullptr, double threshold = 0.5);

std::vector<CameraInput<float>> sample_inputs(const Sample& s);

// Forward every sample and accumulate global-count IoU per channel.
// keep_cameras, when non-null, selects a per-sample camera subset.
std::vector<IouResult> evaluate_model(ModelParams<float>& params, const ModelConfig& cfg,
                                      const std::vector<Sample>& samples,
                                      const std::uint8_t* valid_mask = nullptr,
                                      const std::vector<std::vector<int>>* keep_cameras = nullptr);

struct DistanceBin {
  double d_min = 0;
  std::vector<IouResult> per_channel;
};

std::vector<DistanceBin> distance_binned_iou(ModelParams<float>& params, const ModelConfig& cfg,
                                             const std::vector<Sample>& samples,
                                             const std::vector<double>& thresholds);

struct DropoutPoint {
  int dropped = 0;
  std::vector<IouResult> per_channel;  // mean of per-trial global IoU
};

// Per sample, drop m uniformly chosen cameras (seeded) and evaluate with
// the remaining keys/values only. m = 0 reproduces standard evaluation.
DropoutPoint camera_dropout_eval(ModelParams<float>& params, const ModelConfig& cfg,
                                 const std::vector<Sample>& samples, int m, int trials,
                                 std::uint64_t seed);

// Writes one P5 PGM per (query cell, camera) of the fine-scale attention
// weights upsampled to image size, plus a CSV of the raw weights.
// Filenames: attn_q<i>_<j>_cam<k>.pgm. Returns the CSV path.
std::string export_attention_maps(ModelParams<float>& params, const ModelConfig& cfg,
                                  const Sample& sample,
                                  const std::vector<std::pair<int, int>>& query_cells,
                                  const std::string& out_dir);

void write_pgm(const std::string& path, int h, int w, const std::vector<std::uint8_t>& gray);

// Plain bilinear resize (align_corners = false) used for trace export.
std::vector<double> bilinear_resize(const std::vector<double>& src, int sh, int sw, int dh, int dw);

}  // namespace cvt
