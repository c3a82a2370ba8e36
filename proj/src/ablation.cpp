#include "cvt/ablation.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace cvt {

std::vector<AblationVariant> ablation_variants(const ModelConfig& base) {
  std::vector<AblationVariant> out;
  out.push_back({"full", base});

  ModelConfig no_delta = base;
  no_delta.embedding = EmbeddingMode::None;
  out.push_back({"no-delta", no_delta});

  ModelConfig no_phi = base;
  no_phi.keys_use_phi = false;
  out.push_back({"no-phi-keys", no_phi});

  ModelConfig no_refine = base;
  no_refine.refine_queries = false;
  out.push_back({"no-refinement", no_refine});

  ModelConfig per_cam = base;
  per_cam.embedding = EmbeddingMode::LearnedPerCamera;
  out.push_back({"learned-per-camera", per_cam});

  ModelConfig fourier = base;
  fourier.embedding = EmbeddingMode::CameraAwareFourier;
  out.push_back({"fourier", fourier});
  return out;
}

std::vector<AblationRow> run_ablation_suite(const std::vector<Sample>& train_set,
                                            const std::vector<Sample>& val_set,
                                            const ModelConfig& base, const TrainConfig& tcfg,
                                            const std::vector<std::uint64_t>& seeds) {
  if (seeds.size() < 3) throw std::invalid_argument("ablation: need at least 3 seeds");
  std::vector<AblationRow> rows;
  for (const auto& variant : ablation_variants(base)) {
    for (const std::uint64_t seed : seeds) {
      auto params = ModelParams<float>::init(variant.cfg, seed);
      TrainConfig tc = tcfg;
      tc.seed = seed;
      train_run(params, variant.cfg, tc, train_set, val_set);
      const auto res = evaluate_model(params, variant.cfg, val_set);
      AblationRow row;
      row.variant = variant.name;
      row.seed = seed;
      row.iou_vehicle = res[0].value;
      row.iou_driveable = res.size() > 1 ? res[1].value : 0.0;
      rows.push_back(row);
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant,seed,iou_vehicle,iou_driveable\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%s,%llu,%.9g,%.9g\n", r.variant.c_str(),
                  static_cast<unsigned long long>(r.seed), r.iou_vehicle, r.iou_driveable);
    os << line;
  }
  return os.str();
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median: empty");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double median_iou(const std::vector<AblationRow>& rows, const std::string& variant) {
  std::vector<double> vals;
  for (const auto& r : rows)
    if (r.variant == variant) vals.push_back(r.iou_vehicle);
  return median(vals);
}

}  // namespace cvt
