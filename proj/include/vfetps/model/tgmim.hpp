#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vfetps/core/errors.hpp"
#include "vfetps/core/ops.hpp"
#include "vfetps/core/rng.hpp"
#include "vfetps/model/encoders.hpp"
#include "vfetps/model/image.hpp"
#include "vfetps/nn/layers.hpp"

// Text-guided masked image modeling: random patch masking, cross attention
// from visual tokens to text tokens, a small fusion encoder and a 1x1
// convolution + pixel shuffle prediction head trained with masked L1.

namespace vfetps {

/// Exactly round(ratio * n) distinct patches, chosen uniformly.
inline PatchMask sample_mask(std::size_t n, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("masking ratio must lie in [0, 1]");
  PatchMask m;
  m.ratio = ratio;
  m.flags.assign(n, 0);
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  for (auto i : rng.sample_without_replacement(n, k)) m.flags[i] = 1;
  return m;
}

enum class MimVariant { text_guided, text_free };

struct TgMimConfig {
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t fusion_depth = 1;
  std::size_t patch = 8;
  std::size_t channels = 3;
  std::size_t grid_h = 8;
  std::size_t grid_w = 4;
  // Cross-attention scores are divided by sqrt(d) unless this is set, in which
  // case the per-head width d/H is used.
  bool scale_by_head_dim = false;

  static TgMimConfig from(const EncoderConfig& e, std::size_t fusion_depth, bool head_dim_scale = false) {
    return {e.d, e.heads, fusion_depth, e.patch, e.channels, e.grid_h(), e.grid_w(), head_dim_scale};
  }
};

template <class T>
class TgMimHead {
 public:
  TgMimHead() = default;
  TgMimHead(nn::ParameterStore<T>& store, const TgMimConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.heads == 0 || cfg.d % cfg.heads != 0) throw ConfigError("TG-MIM width not divisible by head count");
    ln_visual_ = nn::LayerNorm<T>(store, "tgmim.ln_visual", cfg.d);
    ln_text_ = nn::LayerNorm<T>(store, "tgmim.ln_text", cfg.d);
    const double scale_dim = cfg.scale_by_head_dim ? static_cast<double>(cfg.d / cfg.heads) : static_cast<double>(cfg.d);
    mca_ = nn::MultiHeadAttention<T>(store, "tgmim.mca", cfg.d, cfg.heads, rng, false, scale_dim);
    for (std::size_t i = 0; i < cfg.fusion_depth; ++i) {
      fusion_.emplace_back(store, "tgmim.fusion." + std::to_string(i), cfg.d, cfg.heads, rng);
    }
    ln_out_ = nn::LayerNorm<T>(store, "tgmim.ln_out", cfg.d);
    pixel_head_ = nn::Linear<T>(store, "tgmim.pixel_head", cfg.d, cfg.channels * cfg.patch * cfg.patch, rng);
  }

  /// Raw multi-head cross attention: [head_1..head_H] W^O with
  /// head_i = softmax(Q_i K_i^T / sqrt(d)) V_i, queries from the visual
  /// sequence and keys/values from the text sequence.
  Tensor<T> mca(const Tensor<T>& visual, const Tensor<T>& text, std::size_t batch, std::size_t visual_len,
                std::size_t text_len, const std::vector<std::uint8_t>* text_keep = nullptr) const {
    if (visual.dim(1) != cfg_.d || text.dim(1) != cfg_.d) {
      throw ContractError("mca: visual width " + std::to_string(visual.dim(1)) + " and text width " +
                          std::to_string(text.dim(1)) + " must both equal " + std::to_string(cfg_.d));
    }
    return mca_(visual, text, batch, visual_len, text_len, text_keep);
  }

  /// Residual cross-modal enhancement z_v + MCA(LN(z_v), LN(z_t)).
  Tensor<T> enhance(const SequenceFeatures<T>& visual, const SequenceFeatures<T>& text) const {
    if (visual.batch != text.batch) throw ContractError("enhance: image and text batch sizes differ");
    const auto* keep = text.key_keep.empty() ? nullptr : &text.key_keep;
    return add(visual.tokens, mca(ln_visual_(visual.tokens), ln_text_(text.tokens), visual.batch, visual.length,
                                  text.length, keep));
  }

  /// Self-attention fusion over the visual positions; identity at depth 0.
  Tensor<T> fuse(const Tensor<T>& enhanced, std::size_t batch, std::size_t len) const {
    auto x = enhanced;
    for (const auto& blk : fusion_) x = blk(x, batch, len);
    return x;
  }

  /// Patch tokens [B*N, d] -> 1x1 conv to C*P*P channels -> pixel shuffle ->
  /// images [B, C, H, W].
  Tensor<T> predict_pixels(const Tensor<T>& patch_tokens, std::size_t batch) const {
    if (patch_tokens.dim(0) != batch * cfg_.grid_h * cfg_.grid_w) {
      throw ContractError("predict_pixels: " + std::to_string(patch_tokens.dim(0)) + " tokens do not fill a " +
                          std::to_string(cfg_.grid_h) + "x" + std::to_string(cfg_.grid_w) + " grid for batch " +
                          std::to_string(batch));
    }
    auto cells = pixel_head_(ln_out_(patch_tokens));
    return pixel_shuffle(cells, batch, cfg_.grid_h, cfg_.grid_w, cfg_.channels, cfg_.patch);
  }

  /// Full prediction path from encoded (masked) image sequences. The text
  /// sequence is required for the text-guided variant and ignored otherwise.
  Tensor<T> forward(const SequenceFeatures<T>& visual, const SequenceFeatures<T>* text, MimVariant variant) const {
    Tensor<T> x = visual.tokens;
    if (variant == MimVariant::text_guided) {
      if (!text) throw ContractError("text-guided MIM requires text features");
      x = enhance(visual, *text);
    }
    x = fuse(x, visual.batch, visual.length);
    // Drop the CLS row of every image.
    const auto N = visual.length - 1;
    std::vector<std::size_t> rows;
    rows.reserve(visual.batch * N);
    for (std::size_t b = 0; b < visual.batch; ++b)
      for (std::size_t i = 1; i <= N; ++i) rows.push_back(b * visual.length + i);
    return predict_pixels(gather_rows(x, std::move(rows)), visual.batch);
  }

  const TgMimConfig& config() const { return cfg_; }
  nn::MultiHeadAttention<T>& cross_attention() { return mca_; }
  nn::Linear<T>& pixel_head() { return pixel_head_; }

 private:
  TgMimConfig cfg_;
  nn::LayerNorm<T> ln_visual_, ln_text_;
  nn::MultiHeadAttention<T> mca_;
  std::vector<nn::TransformerBlock<T>> fusion_;
  nn::LayerNorm<T> ln_out_;
  nn::Linear<T> pixel_head_;
};

/// Mean over masked patches of (1 / (C P^2)) * sum |pred - gt| inside the
/// patch. Unmasked patches contribute nothing; no masked patch gives 0.
template <class T>
Tensor<T> tgmim_loss(const Tensor<T>& predicted, std::span<const Image> ground_truth, std::span<const PatchMask> masks,
                     std::size_t patch) {
  if (ground_truth.size() != masks.size() || ground_truth.empty()) {
    throw ContractError("tgmim_loss: one mask per ground-truth image required");
  }
  auto target = stack_images<T>(ground_truth);
  detail::require_same_shape(predicted.shape(), target.shape(), "tgmim_loss");
  const auto& g0 = ground_truth[0];
  const auto grid = patch_grid(g0.height, g0.width, patch);
  std::size_t masked_total = 0;
  for (const auto& m : masks) {
    if (m.size() != grid.count()) throw ContractError("tgmim_loss: mask length does not match patch grid");
    masked_total += m.masked_count();
  }
  if (masked_total == 0) return Tensor<T>::scalar(T(0));
  const T w = T(1) / static_cast<T>(g0.channels * patch * patch * masked_total);
  std::vector<T> weights(target.numel(), T(0));
  const auto per_image = g0.channels * g0.height * g0.width;
  for (std::size_t b = 0; b < masks.size(); ++b)
    for (std::size_t c = 0; c < g0.channels; ++c)
      for (std::size_t y = 0; y < g0.height; ++y)
        for (std::size_t x = 0; x < g0.width; ++x) {
          const auto p = (y / patch) * grid.cols + x / patch;
          if (masks[b].masked(p)) weights[b * per_image + (c * g0.height + y) * g0.width + x] = w;
        }
  Tensor<T> wt(predicted.shape(), std::move(weights));
  return sum(mul(abs(sub(predicted, target)), wt));
}

/// Per-patch mean absolute error of one predicted image, [N].
template <class T>
std::vector<double> per_patch_l1(std::span<const T> predicted, const Image& ground_truth, std::size_t patch) {
  const auto grid = patch_grid(ground_truth.height, ground_truth.width, patch);
  std::vector<double> out(grid.count(), 0.0);
  for (std::size_t c = 0; c < ground_truth.channels; ++c)
    for (std::size_t y = 0; y < ground_truth.height; ++y)
      for (std::size_t x = 0; x < ground_truth.width; ++x) {
        const auto i = (c * ground_truth.height + y) * ground_truth.width + x;
        out[(y / patch) * grid.cols + x / patch] +=
            std::abs(static_cast<double>(predicted[i]) - static_cast<double>(ground_truth.pixels[i]));
      }
  for (auto& v : out) v /= static_cast<double>(ground_truth.channels * patch * patch);
  return out;
}

template <class T>
struct ReconstructionOutput {
  Tensor<T> predicted;                 // [C, H, W]
  std::vector<double> per_patch_loss;  // [N]
};

/// Masked-image reconstruction loss for one image under either MIM variant,
/// encoding the masked image (and the caption, when text-guided) from scratch.
template <class T>
Tensor<T> mim_variant_loss(const ImageEncoder<T>& image_encoder, const TextEncoder<T>* text_encoder,
                           const TgMimHead<T>& head, const Image& image, const TokenSequence* tokens,
                           const PatchMask& mask, MimVariant variant, ReconstructionOutput<T>* detail_out = nullptr) {
  if (variant == MimVariant::text_guided && (!tokens || !text_encoder)) {
    throw ContractError("text-guided MIM variant requires a caption");
  }
  std::vector<Image> images{image};
  std::vector<PatchMask> masks{mask};
  auto visual = image_encoder.forward(images, masks);
  Tensor<T> predicted;
  if (variant == MimVariant::text_guided) {
    std::vector<TokenSequence> seqs{*tokens};
    auto text = text_encoder->forward(seqs);
    predicted = head.forward(visual, &text, variant);
  } else {
    predicted = head.forward(visual, nullptr, variant);
  }
  if (detail_out) {
    detail_out->predicted = reshape(predicted.detach(), {image.channels, image.height, image.width});
    detail_out->per_patch_loss = per_patch_l1<T>(predicted.data(), image, head.config().patch);
  }
  return tgmim_loss(predicted, std::span<const Image>(images), std::span<const PatchMask>(masks), head.config().patch);
}

}  // namespace vfetps
