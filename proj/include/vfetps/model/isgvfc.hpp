#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vfetps/core/errors.hpp"
#include "vfetps/core/log.hpp"
#include "vfetps/core/ops.hpp"
#include "vfetps/core/rng.hpp"
#include "vfetps/nn/layers.hpp"

// Identity-supervised calibration of global visual features, plus the ID-loss
// and batch-hard triplet baselines it is compared against.

namespace vfetps {

/// C anchors from a batch and their pairwise same-identity labels.
struct IdentitySampleSet {
  std::vector<std::size_t> indices;   // positions in the batch
  std::vector<std::int64_t> pids;     // identity of each anchor
  std::vector<std::uint8_t> labels;   // C x C, 1 iff same identity (diagonal included)

  std::size_t size() const { return indices.size(); }
  bool has_cross_positive() const {
    const auto C = size();
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j)
        if (i != j && labels[i * C + j]) return true;
    return false;
  }
};

inline std::vector<std::uint8_t> identity_labels(std::span<const std::int64_t> pids) {
  const auto n = pids.size();
  std::vector<std::uint8_t> y(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = pids[i] == pids[j] ? 1 : 0;
  return y;
}

/// Draws C anchors without replacement. If the batch holds any same-identity
/// pair but the draw contains none, one such pair is swapped in.
inline IdentitySampleSet sample_pairs(std::span<const std::int64_t> batch_pids, std::size_t C, Rng& rng) {
  const auto B = batch_pids.size();
  if (B < 2) throw ConfigError("IS-GVFC needs a batch of at least 2 images");
  if (C == 0 || C > B) {
    throw ConfigError("IS-GVFC pair count C=" + std::to_string(C) + " must lie in [1, B=" + std::to_string(B) + "]");
  }
  auto sel = rng.sample_without_replacement(B, C);
  auto has_positive = [&](const std::vector<std::size_t>& s) {
    for (std::size_t a = 0; a < s.size(); ++a)
      for (std::size_t b = a + 1; b < s.size(); ++b)
        if (batch_pids[s[a]] == batch_pids[s[b]]) return true;
    return false;
  };
  if (C >= 2 && !has_positive(sel)) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = i + 1; j < B; ++j)
        if (batch_pids[i] == batch_pids[j]) pairs.emplace_back(i, j);
    if (!pairs.empty()) {
      const auto [i, j] = pairs[rng.below(pairs.size())];
      auto contains = [&](std::size_t v) { return std::find(sel.begin(), sel.end(), v) != sel.end(); };
      if (!contains(i)) *std::find_if(sel.begin(), sel.end(), [&](std::size_t v) { return v != j; }) = i;
      if (!contains(j)) *std::find_if(sel.begin(), sel.end(), [&](std::size_t v) { return v != i; }) = j;
    }
  }
  IdentitySampleSet out;
  out.indices = std::move(sel);
  for (auto i : out.indices) out.pids.push_back(batch_pids[i]);
  out.labels = identity_labels(out.pids);
  return out;
}

/// Row-normalized labels q_ij = y_ij / sum_k y_ik.
inline std::vector<double> match_targets(std::span<const std::uint8_t> labels, std::size_t n) {
  if (labels.size() != n * n) throw DimensionError("label matrix is not square");
  std::vector<double> q(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < n; ++j) row += labels[i * n + j];
    if (row == 0) throw ContractError("label row " + std::to_string(i) + " has no positive");
    for (std::size_t j = 0; j < n; ++j) q[i * n + j] = labels[i * n + j] / row;
  }
  return q;
}

/// Predicted (softmax over cosine / tau) and target matching distributions.
template <class T>
struct MatchDistribution {
  Tensor<T> p;      // [C, C] row-stochastic
  Tensor<T> log_p;  // [C, C]
  std::vector<double> q;
  double tau = 0.02;

  std::size_t size() const { return p.dim(0); }

  /// Distribution with explicitly given probabilities.
  static MatchDistribution from_probabilities(const Tensor<T>& p, std::vector<double> q) {
    return {p, log(p), std::move(q), 0.0};
  }
};

inline void check_tau(double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature tau must be positive");
}

/// Pairwise matching logits cos(f_i, f_j) / tau between rows of a and b.
template <class T>
Tensor<T> match_logits(const Tensor<T>& a, const Tensor<T>& b, double tau, T norm_floor = T(1e-12)) {
  check_tau(tau);
  for (const auto* m : {&a, &b}) {
    for (std::size_t r = 0; r < m->dim(0); ++r) {
      T acc = 0;
      for (std::size_t c = 0; c < m->dim(1); ++c) acc += m->at(r, c) * m->at(r, c);
      if (std::sqrt(acc) <= norm_floor) {
        log_warning("zero-norm feature row " + std::to_string(r) + "; cosine uses the norm floor");
      }
    }
  }
  return scale(cosine_similarity(a, b, norm_floor), static_cast<T>(1.0 / tau));
}

/// p_ij = softmax_j(cos(f_i, f_j) / tau) over the C sampled image features.
template <class T>
Tensor<T> match_prob(const Tensor<T>& features, double tau) {
  return softmax(match_logits(features, features, tau));
}

template <class T>
MatchDistribution<T> match_distribution(const Tensor<T>& features, std::span<const std::uint8_t> labels, double tau) {
  auto logits = match_logits(features, features, tau);
  return {softmax(logits), log_softmax(logits), match_targets(labels, features.dim(0)), tau};
}

/// (1/C) sum_i sum_j p_ij log(p_ij / (q_ij + eps)): per-anchor KL summed over
/// rows, averaged over anchors.
template <class T>
Tensor<T> isgvfc_loss(const MatchDistribution<T>& dist, double eps = 1e-8) {
  const auto C = dist.size();
  if (dist.q.size() != C * C) throw DimensionError("isgvfc_loss: target distribution size mismatch");
  std::vector<T> log_q(C * C);
  for (std::size_t i = 0; i < log_q.size(); ++i) log_q[i] = static_cast<T>(std::log(dist.q[i] + eps));
  Tensor<T> lq(dist.p.shape(), std::move(log_q));
  return scale(sum(mul(dist.p, sub(dist.log_p, lq))), T(1) / static_cast<T>(C));
}

/// Mean softmax cross-entropy of an identity classifier.
template <class T>
Tensor<T> id_loss(const Tensor<T>& features, std::span<const std::size_t> classes, const nn::Linear<T>& classifier) {
  if (classes.size() != features.dim(0)) throw DimensionError("id_loss: one class label per feature row required");
  const auto K = classifier.out_features();
  std::vector<std::size_t> picks(classes.size());
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] >= K) {
      throw ContractError("id_loss: identity class " + std::to_string(classes[i]) + " outside classifier range " +
                          std::to_string(K));
    }
    picks[i] = i * K + classes[i];
  }
  auto lsm = log_softmax(classifier(features));
  return scale(sum(gather_elements(lsm, std::move(picks))), T(-1) / static_cast<T>(classes.size()));
}

/// Batch-hard triplet loss on cosine distance 1 - cos. For each anchor with at
/// least one positive and one negative: max(0, d(a, hardest p) - d(a, hardest n)
/// + margin), averaged over those anchors. Ties pick the lowest index.
template <class T>
Tensor<T> triplet_loss(const Tensor<T>& features, std::span<const std::int64_t> pids, double margin) {
  const auto n = features.dim(0);
  if (pids.size() != n) throw DimensionError("triplet_loss: one identity per feature row required");
  auto dist = add_scalar(scale(cosine_similarity(features, features), T(-1)), T(1));
  std::vector<std::size_t> pos_idx, neg_idx;
  for (std::size_t a = 0; a < n; ++a) {
    std::size_t best_p = n, best_n = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      const T dj = dist[a * n + j];
      if (pids[j] == pids[a]) {
        if (best_p == n || dj > dist[a * n + best_p]) best_p = j;
      } else if (best_n == n || dj < dist[a * n + best_n]) {
        best_n = j;
      }
    }
    if (best_p == n || best_n == n) continue;
    pos_idx.push_back(a * n + best_p);
    neg_idx.push_back(a * n + best_n);
  }
  if (pos_idx.empty()) {
    log_warning("triplet_loss: batch has no valid (anchor, positive, negative) triple; loss is 0");
    return Tensor<T>::scalar(T(0));
  }
  const auto count = pos_idx.size();
  auto hinge = relu(add_scalar(sub(gather_elements(dist, std::move(pos_idx)), gather_elements(dist, std::move(neg_idx))),
                               static_cast<T>(margin)));
  return scale(sum(hinge), T(1) / static_cast<T>(count));
}

}  // namespace vfetps
