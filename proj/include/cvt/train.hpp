#pragma once

// Focal loss, AdamW with decoupled weight decay, the one-cycle schedule,
// the training loop, and checkpoint persistence.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvt/eval.hpp"
#include "cvt/model.hpp"
#include "cvt/scene.hpp"
#include "cvt/tensor.hpp"

namespace cvt {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double max_lr = 2e-3;
  double weight_decay = 1e-4;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  std::uint64_t seed = 1;
  bool verbose = false;  // per-epoch progress lines on stderr

  void validate() const {
    if (epochs < 1 || batch_size < 1)
      throw std::invalid_argument("train: epochs and batch_size must be >= 1");
    if (focal_gamma < 0) throw std::invalid_argument("train: focal gamma must be >= 0");
    if (focal_alpha <= 0 || focal_alpha > 1)
      throw std::invalid_argument("train: focal alpha must be in (0,1]");
  }
};

// Mean over all cells of -alpha_t (1 - p_t)^gamma log(p_t), p = sigmoid.
// Built from autodiff primitives; the log is clamped at 1e-12.
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& logits, const std::vector<std::uint8_t>& target, T gamma,
                     T alpha) {
  if (logits.numel() != target.size())
    throw std::invalid_argument("focal_loss: logits " + shape_str(logits.shape()) + " vs target " +
                                std::to_string(target.size()) + " cells");
  std::vector<T> pos(target.size()), negv(target.size()), alpha_t(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const bool y = target[i] != 0;
    pos[i] = y ? T(1) : T(0);
    negv[i] = y ? T(0) : T(1);
    alpha_t[i] = y ? alpha : T(1) - alpha;
  }
  const auto m_pos = Tensor<T>::from_data(std::move(pos), logits.shape());
  const auto m_neg = Tensor<T>::from_data(std::move(negv), logits.shape());
  const auto w = Tensor<T>::from_data(std::move(alpha_t), logits.shape());

  const auto p = sigmoid(logits);
  const auto one_minus_p = add_scalar(neg(p), T(1));
  // p_t = p where y=1 else 1-p, assembled from the constant masks
  const auto pt = add(mul(m_pos, p), mul(m_neg, one_minus_p));
  const auto one_minus_pt = add(mul(m_pos, one_minus_p), mul(m_neg, p));
  const auto focal_term = gamma == T(0)
                              ? Tensor<T>::full(logits.shape(), T(1))
                              : pow_scalar(one_minus_pt, gamma);
  const auto loss_cells = neg(mul(w, mul(focal_term, log_clamped(pt))));
  return mean(loss_cells);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamWState {
  std::vector<std::vector<T>> m, v;
  long step = 0;

  static AdamWState init(std::vector<Tensor<T>>& params) {
    AdamWState s;
    for (auto& p : params) {
      s.m.emplace_back(p.numel(), T(0));
      s.v.emplace_back(p.numel(), T(0));
    }
    return s;
  }
};

// Decoupled decay: p <- p - lr*wd*p before the bias-corrected adaptive
// step. A missing grad buffer is treated as an all-zero gradient.
template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, AdamWState<T>& state, double lr,
                double weight_decay, const AdamWConfig& cfg = {}) {
  if (state.m.size() != params.size())
    throw std::invalid_argument("adamw: state does not match parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, state.step);
  const double bc2 = 1.0 - std::pow(cfg.beta2, state.step);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (state.m[pi].size() != p.numel())
      throw std::invalid_argument("adamw: moment shape mismatch for parameter " +
                                  std::to_string(pi));
    auto& data = p.data();
    const bool has_grad = p.grad().size() == data.size();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T g = has_grad ? p.grad()[i] : T(0);
      data[i] -= static_cast<T>(lr * weight_decay) * data[i];
      auto& m = state.m[pi][i];
      auto& v = state.v[pi][i];
      m = static_cast<T>(cfg.beta1) * m + static_cast<T>(1.0 - cfg.beta1) * g;
      v = static_cast<T>(cfg.beta2) * v + static_cast<T>(1.0 - cfg.beta2) * g * g;
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      data[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// Cosine warmup from max_lr/div to max_lr over pct_start of the run, then
// cosine anneal to max_lr/final_div.
inline double one_cycle_lr(long step, long total_steps, double max_lr, double pct_start = 0.3,
                           double div = 25.0, double final_div = 1e4) {
  if (step < 0 || step >= total_steps)
    throw std::invalid_argument("one_cycle_lr: step " + std::to_string(step) +
                                " outside [0, " + std::to_string(total_steps) + ")");
  const double warm = pct_start * static_cast<double>(total_steps);
  const double initial = max_lr / div;
  const double final_lr = max_lr / final_div;
  if (static_cast<double>(step) <= warm) {
    const double t = warm > 0 ? static_cast<double>(step) / warm : 1.0;
    return initial + (max_lr - initial) * 0.5 * (1.0 - std::cos(M_PI * t));
  }
  const double t = (static_cast<double>(step) - warm) / (static_cast<double>(total_steps) - warm);
  return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + std::cos(M_PI * t));
}

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double val_iou_vehicle = 0;
  double val_iou_driveable = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
};

std::string history_csv(const std::vector<EpochStats>& history);

// Deterministic given the seed in single-threaded mode: shuffles are
// seeded, accumulation orders are fixed. Aborts on NaN loss naming the
// step. Params are updated in place.
TrainResult train_run(ModelParams<float>& params, const ModelConfig& model_cfg,
                      const TrainConfig& cfg, const std::vector<Sample>& train_set,
                      const std::vector<Sample>& val_set, AdamWState<float>* resume_state = nullptr);

// epoch-disjoint 80/20 split by sample index (index % 5 == 4 -> val)
void split_dataset(const std::vector<Sample>& all, std::vector<Sample>& train,
                   std::vector<Sample>& val);

std::vector<Sample> load_samples(const std::string& dataset_dir, int limit = -1);

// ---------------------------------------------------------------------------
// Checkpoints: params.json index plus one BT1 file per tensor.

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Checkpoint {
  ModelConfig model_cfg;
  ModelParams<float> params;
  AdamWState<float> optim;
  bool has_optim = false;
};

void save_checkpoint(const std::string& dir, ModelParams<float>& params,
                     const ModelConfig& model_cfg, const AdamWState<float>* optim = nullptr);
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace cvt
