#pragma once

// Cross-view attention: map-view queries (c - tau_k) against the union of
// every camera's keys (delta + phi) and values (phi), with per-head cosine
// similarity and one softmax over all cameras jointly. Cameras are
// processed in a content-derived canonical order, so the output is exactly
// invariant to the order the caller lists them in.

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

#include "cvt/tensor.hpp"

namespace cvt {

struct AttentionConfig {
  int heads = 4;
  int d_head = 8;
  int d = 32;                 // embedding width D
  double temperature = 1.0;   // cosine logits are divided by this
  bool keys_use_delta = true;
  bool keys_use_phi = true;
};

template <typename T>
struct CameraTokens {
  Tensor<T> tau;    // 1 x D
  Tensor<T> delta;  // L_k x D; may be undefined when keys_use_delta is false
  Tensor<T> phi;    // L_k x D
  int feat_h = 0, feat_w = 0;
  int camera_id = 0;  // caller's index, preserved through reordering
};

template <typename T>
struct AttentionTrace {
  int heads = 0;
  int queries = 0;
  std::vector<int> camera_ids;   // canonical processing order
  std::vector<int> key_counts;   // keys contributed per camera, same order
  std::vector<int> feat_hs, feat_ws;
  std::vector<std::vector<T>> weights;  // per head, queries x total_keys

  int total_keys() const {
    int n = 0;
    for (int k : key_counts) n += k;
    return n;
  }
};

template <typename T>
struct AttentionHeadParams {
  Tensor<T> wq, bq;  // D x d_head, d_head
  Tensor<T> wk, bk;
  Tensor<T> wv, bv;
  Tensor<T> wo;      // d_head x D
};

template <typename T>
struct AttentionParams {
  std::vector<AttentionHeadParams<T>> heads;
  Tensor<T> bo;  // D

  static AttentionParams init(Rng& rng, const AttentionConfig& cfg, double stddev) {
    AttentionParams p;
    const auto D = static_cast<std::size_t>(cfg.d);
    const auto dh = static_cast<std::size_t>(cfg.d_head);
    for (int h = 0; h < cfg.heads; ++h) {
      AttentionHeadParams<T> hp;
      hp.wq = Tensor<T>::randn(rng, {D, dh}, stddev, true);
      hp.bq = Tensor<T>::zeros({dh}, true);
      hp.wk = Tensor<T>::randn(rng, {D, dh}, stddev, true);
      hp.bk = Tensor<T>::zeros({dh}, true);
      hp.wv = Tensor<T>::randn(rng, {D, dh}, stddev, true);
      hp.bv = Tensor<T>::zeros({dh}, true);
      hp.wo = Tensor<T>::randn(rng, {dh, D}, stddev, true);
      p.heads.push_back(std::move(hp));
    }
    p.bo = Tensor<T>::zeros({D}, true);
    return p;
  }
};

namespace detail {

template <typename T>
int lex_compare(const std::vector<T>& a, const std::vector<T>& b) {
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (a[i] < b[i]) return -1;
    if (a[i] > b[i]) return 1;
  }
  if (a.size() < b.size()) return -1;
  return a.size() > b.size() ? 1 : 0;
}

// Content-derived total order over cameras. Ties can only occur between
// cameras with identical embeddings, whose contributions commute exactly.
template <typename T>
std::vector<std::size_t> canonical_order(const std::vector<CameraTokens<T>>& cams) {
  std::vector<std::size_t> idx(cams.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    int c = lex_compare(cams[a].tau.data(), cams[b].tau.data());
    if (c != 0) return c < 0;
    if (cams[a].delta.defined() && cams[b].delta.defined()) {
      c = lex_compare(cams[a].delta.data(), cams[b].delta.data());
      if (c != 0) return c < 0;
    }
    return lex_compare(cams[a].phi.data(), cams[b].phi.data()) < 0;
  });
  return idx;
}

}  // namespace detail

// c: Lq x D (already layer-normed by the caller). Output: Lq x D.
template <typename T>
Tensor<T> cross_view_attend(const Tensor<T>& c, const std::vector<CameraTokens<T>>& cams,
                            const AttentionParams<T>& params, const AttentionConfig& cfg,
                            AttentionTrace<T>* trace = nullptr) {
  if (cams.empty()) throw std::invalid_argument("cross_view_attend: need at least one camera");
  if (!cfg.keys_use_delta && !cfg.keys_use_phi)
    throw std::invalid_argument("cross_view_attend: keys need delta or phi");
  if (static_cast<int>(c.dim(1)) != cfg.d)
    throw std::invalid_argument("cross_view_attend: query width " + std::to_string(c.dim(1)) +
                                " != D " + std::to_string(cfg.d));
  for (const auto& cam : cams) {
    if (static_cast<int>(cam.phi.dim(1)) != cfg.d)
      throw std::invalid_argument("cross_view_attend: phi width mismatch");
    if (cfg.keys_use_delta &&
        (!cam.delta.defined() || cam.delta.shape() != cam.phi.shape()))
      throw std::invalid_argument("cross_view_attend: delta/phi shape mismatch");
  }

  const std::vector<std::size_t> order = detail::canonical_order(cams);
  const T inv_temp = T(1.0 / cfg.temperature);

  if (trace) {
    trace->heads = cfg.heads;
    trace->queries = static_cast<int>(c.dim(0));
    trace->camera_ids.clear();
    trace->key_counts.clear();
    trace->feat_hs.clear();
    trace->feat_ws.clear();
    trace->weights.clear();
    for (std::size_t i : order) {
      trace->camera_ids.push_back(cams[i].camera_id);
      trace->key_counts.push_back(static_cast<int>(cams[i].phi.dim(0)));
      trace->feat_hs.push_back(cams[i].feat_h);
      trace->feat_ws.push_back(cams[i].feat_w);
    }
  }

  // Key inputs are shared across heads.
  std::vector<Tensor<T>> key_inputs(cams.size());
  std::vector<Tensor<T>> query_inputs(cams.size());
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const auto& cam = cams[order[pos]];
    if (cfg.keys_use_delta && cfg.keys_use_phi)
      key_inputs[pos] = add(cam.delta, cam.phi);
    else if (cfg.keys_use_delta)
      key_inputs[pos] = cam.delta;
    else
      key_inputs[pos] = cam.phi;
    query_inputs[pos] = sub_rowvec(c, reshape(cam.tau, {cam.tau.numel()}));
  }

  Tensor<T> merged;
  for (int h = 0; h < cfg.heads; ++h) {
    const auto& hp = params.heads[h];
    std::vector<Tensor<T>> logit_parts, value_parts;
    logit_parts.reserve(cams.size());
    value_parts.reserve(cams.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const auto& cam = cams[order[pos]];
      const auto q = l2_normalize_rows(add_rowvec(matmul(query_inputs[pos], hp.wq), hp.bq));
      const auto k = l2_normalize_rows(add_rowvec(matmul(key_inputs[pos], hp.wk), hp.bk));
      logit_parts.push_back(scale(matmul(q, transpose2d(k)), inv_temp));
      value_parts.push_back(add_rowvec(matmul(cam.phi, hp.wv), hp.bv));
    }
    const auto weights = softmax(concat2d(logit_parts, 1), 1);
    if (trace) trace->weights.push_back(weights.data());
    const auto head_out = matmul(weights, concat2d(value_parts, 0));
    const auto proj = matmul(head_out, hp.wo);
    merged = merged.defined() ? add(merged, proj) : proj;
  }
  return add_rowvec(merged, reshape(params.bo, {params.bo.numel()}));
}

// Pre-norm refinement block: attention residual then MLP residual.
template <typename T>
struct BlockParams {
  Tensor<T> ln1_g, ln1_b;
  AttentionParams<T> attn;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> mlp_w1, mlp_b1;  // D x 4D
  Tensor<T> mlp_w2, mlp_b2;  // 4D x D

  static BlockParams init(Rng& rng, const AttentionConfig& cfg, double stddev) {
    BlockParams p;
    const auto D = static_cast<std::size_t>(cfg.d);
    p.ln1_g = Tensor<T>::full({D}, T(1), true);
    p.ln1_b = Tensor<T>::zeros({D}, true);
    p.attn = AttentionParams<T>::init(rng, cfg, stddev);
    p.ln2_g = Tensor<T>::full({D}, T(1), true);
    p.ln2_b = Tensor<T>::zeros({D}, true);
    p.mlp_w1 = Tensor<T>::randn(rng, {D, 4 * D}, stddev, true);
    p.mlp_b1 = Tensor<T>::zeros({4 * D}, true);
    p.mlp_w2 = Tensor<T>::randn(rng, {4 * D, D}, stddev, true);
    p.mlp_b2 = Tensor<T>::zeros({D}, true);
    return p;
  }
};

// c_query feeds the attention queries; it equals c_stream except in the
// no-refinement ablation, where it stays pinned at c0.
template <typename T>
Tensor<T> cvt_block(const Tensor<T>& c_stream, const Tensor<T>& c_query,
                    const std::vector<CameraTokens<T>>& cams, const BlockParams<T>& params,
                    const AttentionConfig& cfg, AttentionTrace<T>* trace = nullptr) {
  const auto attended =
      cross_view_attend(layer_norm(c_query, params.ln1_g, params.ln1_b), cams, params.attn, cfg,
                        trace);
  const auto c1 = add(c_stream, attended);
  const auto normed = layer_norm(c1, params.ln2_g, params.ln2_b);
  const auto hidden = gelu(add_rowvec(matmul(normed, params.mlp_w1), params.mlp_b1));
  const auto mlp_out = add_rowvec(matmul(hidden, params.mlp_w2), params.mlp_b2);
  return add(c1, mlp_out);
}

}  // namespace cvt
