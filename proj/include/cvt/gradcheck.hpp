#pragma once

// Central finite-difference checks in F64 for every differentiable op and
// for the full micro model. The relative error is
// |analytic - numeric| / (|numeric| + 1e-8), maximized over parameters.

#include <functional>
#include <string>
#include <vector>

#include "cvt/attention.hpp"
#include "cvt/model.hpp"
#include "cvt/tensor.hpp"
#include "cvt/train.hpp"

namespace cvt {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  double tolerance = 1e-6;
  bool pass() const { return max_rel_err < tolerance; }
};

// make_loss must rebuild the graph from the same leaf tensors each call.
// With denom_floor == 0 the relative error is |a-n| / (|n| + 1e-8); a
// positive floor switches to |a-n| / max(|a|, |n|, floor), which forgives
// the finite-difference noise floor (~1e-10 here) on parameters whose
// true gradient is near zero while still flagging any real mismatch.
template <typename MakeLoss>
double finite_diff_max_rel_err(MakeLoss&& make_loss, std::vector<Tensor<double>> leaves, double h,
                               double denom_floor = 0.0) {
  for (auto& p : leaves) p.zero_grad();
  make_loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : leaves)
    analytic.push_back(p.grad().size() == p.numel() ? p.grad()
                                                    : std::vector<double>(p.numel(), 0.0));

  double max_rel = 0;
  NoGradGuard ng;
  for (std::size_t pi = 0; pi < leaves.size(); ++pi) {
    auto& data = leaves[pi].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = make_loss().item();
      data[i] = orig - h;
      const double fm = make_loss().item();
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][i];
      const double rel = denom_floor > 0.0
                             ? std::abs(a - numeric) /
                                   std::max({std::abs(a), std::abs(numeric), denom_floor})
                             : std::abs(a - numeric) / (std::abs(numeric) + 1e-8);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

// Per-op checks on at least 3 input shapes each, h = 1e-6, plus the full
// micro model (2 cameras, 8x16 images, latent 4x4) at h = 1e-4.
std::vector<GradCheckEntry> run_gradcheck(std::uint64_t seed = 42, bool include_full_model = true);

}  // namespace cvt
