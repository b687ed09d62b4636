#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vfetps/core/errors.hpp"
#include "vfetps/core/ops.hpp"
#include "vfetps/core/rng.hpp"
#include "vfetps/core/tensor.hpp"

namespace vfetps::nn {

/// Name-ordered collection of trainable tensors. Insertion order is the
/// serialization and optimizer order.
template <class T>
class ParameterStore {
 public:
  Tensor<T> normal(const std::string& name, Shape shape, Rng& rng, double stddev = 0.02) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return add(name, Tensor<T>(std::move(shape), std::move(v), true));
  }

  Tensor<T> constant(const std::string& name, Shape shape, T value) {
    const auto n = shape_numel(shape);
    return add(name, Tensor<T>(std::move(shape), std::vector<T>(n, value), true));
  }

  Tensor<T> add(const std::string& name, Tensor<T> t) {
    for (const auto& [n, _] : entries_) {
      if (n == name) throw ContractError("duplicate parameter name " + name);
    }
    entries_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }

  std::optional<Tensor<T>> find(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return t;
    return std::nullopt;
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }

  /// Tensors whose name starts with `prefix`.
  std::vector<Tensor<T>> with_prefix(const std::string& prefix) const {
    std::vector<Tensor<T>> out;
    for (const auto& [n, t] : entries_)
      if (n.rfind(prefix, 0) == 0) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool bias = true, double stddev = 0.02)
      : in_(in), out_(out) {
    weight_ = store.normal(name + ".weight", {in, out}, rng, stddev);
    if (bias) bias_ = store.constant(name + ".bias", {out}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul(x, weight_);
    return bias_.defined() ? add_broadcast(y, bias_) : y;
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weight() const { return weight_; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor<T> weight_, bias_;
};

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, std::size_t d) {
    gamma_ = store.constant(name + ".gamma", {d}, T(1));
    beta_ = store.constant(name + ".beta", {d}, T(0));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma_, beta_); }

 private:
  Tensor<T> gamma_, beta_;
};

/// Additive attention bias hiding masked keys: 0 where kept, -1e9 where dropped.
/// `keep` is [batch * keys]; the result is [batch * heads, queries, keys].
template <class T>
Tensor<T> key_mask_bias(const std::vector<std::uint8_t>& keep, std::size_t batch, std::size_t heads,
                        std::size_t queries, std::size_t keys) {
  if (keep.size() != batch * keys) throw DimensionError("key mask length does not match batch x keys");
  std::vector<T> bias(batch * heads * queries * keys);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t q = 0; q < queries; ++q)
        for (std::size_t k = 0; k < keys; ++k)
          bias[((b * heads + h) * queries + q) * keys + k] = keep[b * keys + k] ? T(0) : T(-1e9);
  return Tensor<T>(Shape{batch * heads, queries, keys}, std::move(bias));
}

// Multi-head attention over stacked sequences. Inputs are [batch * length, d];
// queries come from one sequence, keys and values from another (the same one
// for self-attention). Per-head projections are the column blocks of the
// d x d query/key/value matrices. The key projection never has a bias: a
// shared key offset shifts each score row by a constant and leaves the
// softmax unchanged.
template <class T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore<T>& store, const std::string& name, std::size_t d, std::size_t heads, Rng& rng,
                     bool bias, double score_scale_dim)
      : d_(d), heads_(heads), scale_(T(1) / std::sqrt(static_cast<T>(score_scale_dim))) {
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("model width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    }
    wq_ = Linear<T>(store, name + ".wq", d, d, rng, bias);
    wk_ = Linear<T>(store, name + ".wk", d, d, rng, false);
    wv_ = Linear<T>(store, name + ".wv", d, d, rng, bias);
    wo_ = Linear<T>(store, name + ".wo", d, d, rng, bias);
  }

  Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& context, std::size_t batch, std::size_t q_len,
                       std::size_t k_len, const std::vector<std::uint8_t>* key_keep = nullptr) const {
    if (queries.dim(1) != d_ || context.dim(1) != d_) {
      throw ContractError("attention width mismatch: expected " + std::to_string(d_) + ", got " +
                          std::to_string(queries.dim(1)) + " and " + std::to_string(context.dim(1)));
    }
    if (queries.dim(0) != batch * q_len || context.dim(0) != batch * k_len) {
      throw DimensionError("attention: sequence rows do not match batch x length");
    }
    const auto dh = d_ / heads_;
    auto q = split_heads(wq_(queries), batch, q_len, dh);
    auto k = split_heads(wk_(context), batch, k_len, dh);
    auto v = split_heads(wv_(context), batch, k_len, dh);
    auto scores = scale(matmul_nt(q, k), scale_);
    if (key_keep) scores = add(scores, key_mask_bias<T>(*key_keep, batch, heads_, q_len, k_len));
    auto ctx = matmul(softmax(scores), v);
    auto merged = reshape(permute(reshape(ctx, {batch, heads_, q_len, dh}), {0, 2, 1, 3}), {batch * q_len, d_});
    return wo_(merged);
  }

  Linear<T>& output_projection() { return wo_; }
  Linear<T>& value_projection() { return wv_; }
  std::size_t heads() const { return heads_; }
  T score_scale() const { return scale_; }

 private:
  Tensor<T> split_heads(const Tensor<T>& x, std::size_t batch, std::size_t len, std::size_t dh) const {
    return reshape(permute(reshape(x, {batch, len, heads_, dh}), {0, 2, 1, 3}), {batch * heads_, len, dh});
  }

  std::size_t d_ = 0, heads_ = 1;
  T scale_ = 1;
  Linear<T> wq_, wk_, wv_, wo_;
};

/// Pre-norm transformer encoder layer with a 4x GELU MLP.
template <class T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParameterStore<T>& store, const std::string& name, std::size_t d, std::size_t heads, Rng& rng)
      : ln1_(store, name + ".ln1", d),
        attn_(store, name + ".attn", d, heads, rng, true, static_cast<double>(d / heads)),
        ln2_(store, name + ".ln2", d),
        fc1_(store, name + ".fc1", d, 4 * d, rng),
        fc2_(store, name + ".fc2", 4 * d, d, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, std::size_t batch, std::size_t len,
                       const std::vector<std::uint8_t>* key_keep = nullptr) const {
    auto n1 = ln1_(x);
    auto h = add(x, attn_(n1, n1, batch, len, len, key_keep));
    return add(h, fc2_(gelu(fc1_(ln2_(h)))));
  }

  MultiHeadAttention<T>& attention() { return attn_; }
  Linear<T>& mlp_out() { return fc2_; }

 private:
  LayerNorm<T> ln1_;
  MultiHeadAttention<T> attn_;
  LayerNorm<T> ln2_;
  Linear<T> fc1_, fc2_;
};

}  // namespace vfetps::nn
