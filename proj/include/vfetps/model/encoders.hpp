#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vfetps/core/errors.hpp"
#include "vfetps/core/ops.hpp"
#include "vfetps/core/rng.hpp"
#include "vfetps/model/image.hpp"
#include "vfetps/model/tokenizer.hpp"
#include "vfetps/nn/layers.hpp"

namespace vfetps {

/// Shape hyperparameters shared by both towers. Defaults are the desk-scale
/// setting (64x32 images, 8-pixel patches, 16 words).
struct EncoderConfig {
  std::size_t d = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t patch = 8;
  std::size_t channels = 3;
  std::size_t image_h = 64;
  std::size_t image_w = 32;
  std::size_t text_len = 16;  // M, real words kept per caption
  std::size_t vocab_size = 4;
  std::size_t d_out = 64;

  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t patches() const { return grid_h() * grid_w(); }
  std::size_t text_positions() const { return text_len + 2; }

  void validate() const {
    patch_grid(image_h, image_w, patch);
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("model width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
    }
    if (d == 0 || d_out == 0 || channels == 0) throw ConfigError("encoder widths must be positive");
    if (vocab_size < 4) throw ConfigError("vocabulary must hold at least the four special tokens");
  }
};

enum class Modality { image, text };

/// Global vector plus the per-patch or per-word token outputs of one input.
template <class T>
struct FeatureBundle {
  Tensor<T> global;  // [d_out]
  Tensor<T> locals;  // [L, d]
  Modality modality = Modality::image;
};

/// Encoder output for a batch: the full final-layer sequence (CLS/SOS..EOS
/// positions included) and the projected global vectors.
template <class T>
struct SequenceFeatures {
  Tensor<T> tokens;   // [B*L, d]
  Tensor<T> globals;  // [B, d_out]
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> key_keep;  // [B*L], empty when every position is real
};

template <class T>
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(nn::ParameterStore<T>& store, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const auto patch_dim = cfg.channels * cfg.patch * cfg.patch;
    patch_embed_ = nn::Linear<T>(store, "image.patch_embed", patch_dim, cfg.d, rng);
    cls_ = store.normal("image.cls", {1, cfg.d}, rng);
    pos_ = store.normal("image.pos", {cfg.patches() + 1, cfg.d}, rng);
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      blocks_.emplace_back(store, "image.blocks." + std::to_string(i), cfg.d, cfg.heads, rng);
    }
    ln_ = nn::LayerNorm<T>(store, "image.ln_final", cfg.d);
    proj_ = nn::Linear<T>(store, "image.proj", cfg.d, cfg.d_out, rng);
  }

  /// Encodes a batch. When masks are given, pixels of masked patches are
  /// zeroed before the patch projection.
  SequenceFeatures<T> forward(std::span<const Image> images, std::span<const PatchMask> masks = {}) const {
    if (images.empty()) throw ContractError("encode_image: empty batch");
    if (!masks.empty() && masks.size() != images.size()) {
      throw ContractError("encode_image: one mask per image required");
    }
    for (const auto& im : images) {
      if (im.channels != cfg_.channels || im.height != cfg_.image_h || im.width != cfg_.image_w) {
        throw ContractError("encode_image: image " + std::to_string(im.channels) + "x" + std::to_string(im.height) +
                            "x" + std::to_string(im.width) + " does not match encoder configuration");
      }
    }
    const auto B = images.size(), N = cfg_.patches(), L = N + 1;
    Tensor<T> patches;
    if (masks.empty()) {
      patches = patchify_batch<T>(images, cfg_.patch);
    } else {
      std::vector<Image> masked;
      masked.reserve(B);
      for (std::size_t b = 0; b < B; ++b) {
        if (masks[b].size() != N) {
          throw ContractError("mask length " + std::to_string(masks[b].size()) + " != patch count " + std::to_string(N));
        }
        masked.push_back(apply_mask(images[b], masks[b], cfg_.patch));
      }
      patches = patchify_batch<T>(masked, cfg_.patch);
    }
    auto emb = patch_embed_(patches);  // [B*N, d]
    // Row 0 is the CLS vector, rows 1.. the patch embeddings; interleave per image.
    auto pool = concat_rows<T>({cls_, emb});
    std::vector<std::size_t> order;
    order.reserve(B * L);
    for (std::size_t b = 0; b < B; ++b) {
      order.push_back(0);
      for (std::size_t i = 0; i < N; ++i) order.push_back(1 + b * N + i);
    }
    auto x = add_broadcast(gather_rows(pool, std::move(order)), pos_);
    for (const auto& blk : blocks_) x = blk(x, B, L);
    SequenceFeatures<T> out;
    out.tokens = ln_(x);
    std::vector<std::size_t> cls_rows(B);
    for (std::size_t b = 0; b < B; ++b) cls_rows[b] = b * L;
    out.globals = proj_(gather_rows(out.tokens, std::move(cls_rows)));
    out.batch = B;
    out.length = L;
    return out;
  }

  /// Single image: locals are the N patch outputs, global is FC(v_CLS).
  FeatureBundle<T> encode(const Image& image, const PatchMask* mask = nullptr) const {
    std::vector<Image> one{image};
    std::vector<PatchMask> masks;
    if (mask) masks.push_back(*mask);
    auto seq = forward(one, masks);
    std::vector<std::size_t> rows(cfg_.patches());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i + 1;
    return {reshape(seq.globals, {cfg_.d_out}), gather_rows(seq.tokens, std::move(rows)), Modality::image};
  }

  const EncoderConfig& config() const { return cfg_; }
  nn::Linear<T>& projection() { return proj_; }
  const nn::Linear<T>& projection() const { return proj_; }

 private:
  EncoderConfig cfg_;
  nn::Linear<T> patch_embed_;
  Tensor<T> cls_, pos_;
  std::vector<nn::TransformerBlock<T>> blocks_;
  nn::LayerNorm<T> ln_;
  nn::Linear<T> proj_;
};

template <class T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(nn::ParameterStore<T>& store, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    embed_ = store.normal("text.embed", {cfg.vocab_size, cfg.d}, rng);
    pos_ = store.normal("text.pos", {cfg.text_positions(), cfg.d}, rng);
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      blocks_.emplace_back(store, "text.blocks." + std::to_string(i), cfg.d, cfg.heads, rng);
    }
    ln_ = nn::LayerNorm<T>(store, "text.ln_final", cfg.d);
    proj_ = nn::Linear<T>(store, "text.proj", cfg.d, cfg.d_out, rng);
  }

  /// All sequences must share one length (at most M+2). PAD positions are
  /// hidden from attention.
  SequenceFeatures<T> forward(std::span<const TokenSequence> seqs) const {
    if (seqs.empty()) throw ContractError("encode_text: empty batch");
    const auto B = seqs.size(), L = seqs[0].length();
    if (L > cfg_.text_positions() || L < 2) {
      throw ContractError("encode_text: sequence length " + std::to_string(L) + " outside [2, M+2]");
    }
    std::vector<std::size_t> ids;
    ids.reserve(B * L);
    std::vector<std::uint8_t> keep(B * L, 0);
    std::vector<std::size_t> eos_rows(B);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& s = seqs[b];
      if (s.length() != L) throw ContractError("encode_text: sequences of different lengths in one batch");
      if (s.eos_index >= L || s.ids[s.eos_index] != Vocabulary::kEos || s.real_length != s.eos_index + 1) {
        throw ContractError("encode_text: eos_index " + std::to_string(s.eos_index) + " is not a valid EOS position");
      }
      for (std::size_t i = 0; i < L; ++i) {
        const auto id = s.ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
          throw ContractError("encode_text: token id " + std::to_string(id) + " outside vocabulary");
        }
        ids.push_back(static_cast<std::size_t>(id));
        keep[b * L + i] = i < s.real_length ? 1 : 0;
      }
      eos_rows[b] = b * L + s.eos_index;
    }
    auto pos = pos_;
    if (L < cfg_.text_positions()) {
      std::vector<std::size_t> first(L);
      for (std::size_t i = 0; i < L; ++i) first[i] = i;
      pos = gather_rows(pos_, std::move(first));
    }
    auto x = add_broadcast(gather_rows(embed_, std::move(ids)), pos);
    for (const auto& blk : blocks_) x = blk(x, B, L, &keep);
    SequenceFeatures<T> out;
    out.tokens = ln_(x);
    out.globals = proj_(gather_rows(out.tokens, std::move(eos_rows)));
    out.batch = B;
    out.length = L;
    out.key_keep = std::move(keep);
    return out;
  }

  /// Single caption: locals are the M word positions, global is FC(v_EOS).
  FeatureBundle<T> encode(const TokenSequence& seq) const {
    std::vector<TokenSequence> one{seq};
    auto out = forward(one);
    std::vector<std::size_t> rows;
    for (std::size_t i = 1; i + 1 < seq.length(); ++i) rows.push_back(i);
    return {reshape(out.globals, {cfg_.d_out}), gather_rows(out.tokens, std::move(rows)), Modality::text};
  }

  const EncoderConfig& config() const { return cfg_; }
  nn::Linear<T>& projection() { return proj_; }
  Tensor<T>& embedding() { return embed_; }
  Tensor<T>& positions() { return pos_; }
  std::vector<nn::TransformerBlock<T>>& blocks() { return blocks_; }

 private:
  EncoderConfig cfg_;
  Tensor<T> embed_, pos_;
  std::vector<nn::TransformerBlock<T>> blocks_;
  nn::LayerNorm<T> ln_;
  nn::Linear<T> proj_;
};

}  // namespace vfetps
