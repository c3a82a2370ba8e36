#pragma once

// Trains and evaluates the attention-mechanism variants under identical
// data and seed schedules: the full model, the three key/refinement
// ablations, and the alternative positional-embedding modes.

#include <string>
#include <vector>

#include "cvt/train.hpp"

namespace cvt {

struct AblationVariant {
  std::string name;
  ModelConfig cfg;
};

// Order: full, no-delta, no-phi-in-keys, no-refinement, learned-per-camera,
// fourier. "full" doubles as the camera-aware linear embedding row and
// "no-delta" as the no-positional-embedding row.
std::vector<AblationVariant> ablation_variants(const ModelConfig& base);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double iou_vehicle = 0;
  double iou_driveable = 0;
};

std::vector<AblationRow> run_ablation_suite(const std::vector<Sample>& train_set,
                                            const std::vector<Sample>& val_set,
                                            const ModelConfig& base, const TrainConfig& tcfg,
                                            const std::vector<std::uint64_t>& seeds);

std::string ablation_csv(const std::vector<AblationRow>& rows);

double median(std::vector<double> values);

// Median vehicle IoU per variant name.
double median_iou(const std::vector<AblationRow>& rows, const std::string& variant);

}  // namespace cvt
