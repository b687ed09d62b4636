#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vfetps/core/errors.hpp"
#include "vfetps/core/tensor.hpp"

namespace vfetps {

/// Channel-major C x H x W image with values in [0, 1].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }

  template <class T>
  Tensor<T> to_tensor() const {
    std::vector<T> v(pixels.begin(), pixels.end());
    return Tensor<T>(Shape{channels, height, width}, std::move(v));
  }

  bool operator==(const Image&) const = default;
};

/// One flag per patch (true = masked) plus the ratio that produced it.
struct PatchMask {
  std::vector<std::uint8_t> flags;
  double ratio = 0.0;

  std::size_t size() const { return flags.size(); }
  std::size_t masked_count() const {
    std::size_t n = 0;
    for (auto f : flags) n += f ? 1 : 0;
    return n;
  }
  bool masked(std::size_t i) const { return flags[i] != 0; }
};

struct PatchGrid {
  std::size_t rows = 0, cols = 0, patch = 0;
  std::size_t count() const { return rows * cols; }
};

inline PatchGrid patch_grid(std::size_t height, std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible into " + std::to_string(patch) + "-pixel patches");
  }
  return {height / patch, width / patch, patch};
}

/// Copy of `image` with every pixel of a masked patch set to zero.
inline Image apply_mask(const Image& image, const PatchMask& mask, std::size_t patch) {
  const auto grid = patch_grid(image.height, image.width, patch);
  if (mask.size() != grid.count()) {
    throw ContractError("mask has " + std::to_string(mask.size()) + " entries, image has " +
                        std::to_string(grid.count()) + " patches");
  }
  Image out = image;
  for (std::size_t p = 0; p < grid.count(); ++p) {
    if (!mask.masked(p)) continue;
    const auto py = (p / grid.cols) * patch, px = (p % grid.cols) * patch;
    for (std::size_t c = 0; c < image.channels; ++c)
      for (std::size_t y = py; y < py + patch; ++y)
        for (std::size_t x = px; x < px + patch; ++x) out.at(c, y, x) = 0.0f;
  }
  return out;
}

namespace detail {

template <class T>
void write_patches(const Image& image, const PatchGrid& grid, T* dst) {
  const auto P = grid.patch, C = image.channels;
  for (std::size_t gy = 0; gy < grid.rows; ++gy)
    for (std::size_t gx = 0; gx < grid.cols; ++gx) {
      T* row = dst + (gy * grid.cols + gx) * P * P * C;
      for (std::size_t r = 0; r < P; ++r)
        for (std::size_t c = 0; c < P; ++c)
          for (std::size_t ch = 0; ch < C; ++ch)
            row[(r * P + c) * C + ch] = static_cast<T>(image.at(ch, gy * P + r, gx * P + c));
    }
}

}  // namespace detail

/// [N, C*P*P]: one row per patch in row-major grid order; each row is the
/// row-major flattening of the P x P x C patch (channel fastest).
template <class T>
Tensor<T> patchify(const Image& image, std::size_t patch) {
  const auto grid = patch_grid(image.height, image.width, patch);
  std::vector<T> out(image.pixels.size());
  detail::write_patches(image, grid, out.data());
  return Tensor<T>(Shape{grid.count(), patch * patch * image.channels}, std::move(out));
}

/// Stacked patch rows for a batch, [B*N, C*P*P].
template <class T>
Tensor<T> patchify_batch(std::span<const Image> images, std::size_t patch) {
  if (images.empty()) throw ContractError("patchify_batch: empty batch");
  const auto grid = patch_grid(images[0].height, images[0].width, patch);
  const auto per = images[0].pixels.size();
  std::vector<T> out(per * images.size());
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b].pixels.size() != per || images[b].height != images[0].height) {
      throw DimensionError("patchify_batch: images of different sizes in one batch");
    }
    detail::write_patches(images[b], grid, out.data() + b * per);
  }
  return Tensor<T>(Shape{grid.count() * images.size(), patch * patch * images[0].channels}, std::move(out));
}

/// [B, C, H, W] tensor of a batch of images.
template <class T>
Tensor<T> stack_images(std::span<const Image> images) {
  if (images.empty()) throw ContractError("stack_images: empty batch");
  const auto& f = images[0];
  std::vector<T> out;
  out.reserve(f.pixels.size() * images.size());
  for (const auto& im : images) {
    if (im.pixels.size() != f.pixels.size()) throw DimensionError("stack_images: size mismatch");
    out.insert(out.end(), im.pixels.begin(), im.pixels.end());
  }
  return Tensor<T>(Shape{images.size(), f.channels, f.height, f.width}, std::move(out));
}

}  // namespace vfetps
