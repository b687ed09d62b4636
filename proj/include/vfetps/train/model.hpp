#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vfetps/core/binary_io.hpp"
#include "vfetps/core/errors.hpp"
#include "vfetps/core/rng.hpp"
#include "vfetps/model/encoders.hpp"
#include "vfetps/model/tgmim.hpp"
#include "vfetps/nn/adam.hpp"
#include "vfetps/nn/layers.hpp"
#include "vfetps/train/config.hpp"

namespace vfetps {

/// Both encoders plus the training-only heads. Parameter names are prefixed
/// image., text., tgmim. and isgvfc.
template <class T>
class VfeModel {
 public:
  explicit VfeModel(const TrainConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const Rng init = Rng(cfg.seed).split("init");
    Rng image_rng = init.split("image"), text_rng = init.split("text");
    Rng tgmim_rng = init.split("tgmim"), isgvfc_rng = init.split("isgvfc");
    image_ = ImageEncoder<T>(store_, cfg.encoder, image_rng);
    text_ = TextEncoder<T>(store_, cfg.encoder, text_rng);
    if (cfg.tgmim_active()) tgmim_.emplace(store_, cfg.tgmim_config(), tgmim_rng);
    if (cfg.isgvfc && cfg.isgvfc_mode == CalibrationMode::id_loss) {
      if (cfg.id_classes < 2) throw ConfigError("id_loss calibration needs id_classes >= 2");
      id_classifier_.emplace(store_, "isgvfc.id_classifier", cfg.encoder.d_out, cfg.id_classes, isgvfc_rng);
    }
  }

  VfeModel(const VfeModel&) = delete;
  VfeModel& operator=(const VfeModel&) = delete;
  VfeModel(VfeModel&&) noexcept = default;
  VfeModel& operator=(VfeModel&&) noexcept = default;

  const TrainConfig& config() const { return cfg_; }
  nn::ParameterStore<T>& parameters() { return store_; }
  const nn::ParameterStore<T>& parameters() const { return store_; }
  const ImageEncoder<T>& image() const { return image_; }
  const TextEncoder<T>& text() const { return text_; }
  const TgMimHead<T>* tgmim() const { return tgmim_ ? &*tgmim_ : nullptr; }
  const nn::Linear<T>* id_classifier() const { return id_classifier_ ? &*id_classifier_ : nullptr; }

  /// Global image features [n, d_out] without recording a graph.
  Tensor<T> embed_images(std::span<const Image> images, std::size_t chunk = 64) const {
    NoGradGuard guard;
    std::vector<Tensor<T>> parts;
    for (std::size_t i = 0; i < images.size(); i += chunk) {
      parts.push_back(image_.forward(images.subspan(i, std::min(chunk, images.size() - i))).globals);
    }
    return concat_rows<T>(parts);
  }

  Tensor<T> embed_texts(std::span<const TokenSequence> seqs, std::size_t chunk = 64) const {
    NoGradGuard guard;
    std::vector<Tensor<T>> parts;
    for (std::size_t i = 0; i < seqs.size(); i += chunk) {
      parts.push_back(text_.forward(seqs.subspan(i, std::min(chunk, seqs.size() - i))).globals);
    }
    return concat_rows<T>(parts);
  }

  /// Total forward reads of parameters whose name starts with `prefix`.
  std::uint64_t reads(const std::string& prefix) const {
    std::uint64_t n = 0;
    for (const auto& [name, t] : store_.entries())
      if (name.rfind(prefix, 0) == 0) n += t.reads();
    return n;
  }

  void reset_reads() {
    for (auto t : store_.tensors()) t.reset_reads();
  }

 private:
  TrainConfig cfg_;
  nn::ParameterStore<T> store_;
  ImageEncoder<T> image_;
  TextEncoder<T> text_;
  std::optional<TgMimHead<T>> tgmim_;
  std::optional<nn::Linear<T>> id_classifier_;
};

// Checkpoint: "VFTC" | u32 version | u32 precision | config text | u64 epoch
// | u64 rng state | u64 adam steps | u32 tensor count | per tensor: name,
// u32 rank, u64 dims, values, adam m, adam v | log text.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct CheckpointData {
  TrainConfig config;
  std::uint64_t epoch = 0;
  std::uint64_t rng_state = 0;
  std::uint64_t adam_steps = 0;
  struct Blob {
    std::string name;
    Shape shape;
    std::vector<T> value, m, v;
  };
  std::vector<Blob> tensors;
  std::string log;  // JSON lines of the epochs trained so far
};

namespace detail {

template <class T>
void write_values(std::ostream& out, std::span<const T> v) {
  for (T x : v) {
    if constexpr (sizeof(T) == 8) binio::write_f64(out, static_cast<double>(x));
    else binio::write_f32(out, static_cast<float>(x));
  }
}

template <class T>
std::vector<T> read_values(std::istream& in, std::size_t n) {
  std::vector<T> v(n);
  for (auto& x : v) {
    if constexpr (sizeof(T) == 8) x = static_cast<T>(binio::read_f64(in));
    else x = static_cast<T>(binio::read_f32(in));
  }
  return v;
}

}  // namespace detail

template <class T>
void write_checkpoint(const std::filesystem::path& path, const CheckpointData<T>& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  binio::write_magic(out, "VFTC");
  binio::write_u32(out, kCheckpointVersion);
  binio::write_u32(out, sizeof(T) == 8 ? 64u : 32u);
  binio::write_string(out, ck.config.to_text());
  binio::write_u64(out, ck.epoch);
  binio::write_u64(out, ck.rng_state);
  binio::write_u64(out, ck.adam_steps);
  binio::write_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& b : ck.tensors) {
    binio::write_string(out, b.name);
    binio::write_u32(out, static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) binio::write_u64(out, d);
    detail::write_values<T>(out, b.value);
    detail::write_values<T>(out, b.m);
    detail::write_values<T>(out, b.v);
  }
  binio::write_string(out, ck.log);
  if (!out) throw IoError("short write on checkpoint " + path.string());
}

/// Precision tag stored in a checkpoint (32 or 64).
inline int checkpoint_precision(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  binio::expect_magic(in, "VFTC", path.string());
  const auto version = binio::read_u32(in);
  if (version != kCheckpointVersion) throw VersionError("unsupported checkpoint version " + std::to_string(version));
  return static_cast<int>(binio::read_u32(in));
}

template <class T>
CheckpointData<T> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  binio::expect_magic(in, "VFTC", path.string());
  const auto version = binio::read_u32(in);
  if (version != kCheckpointVersion) throw VersionError("unsupported checkpoint version " + std::to_string(version));
  const auto precision = binio::read_u32(in);
  if (precision != (sizeof(T) == 8 ? 64u : 32u)) {
    throw VersionError("checkpoint holds " + std::to_string(precision) + "-bit tensors, requested " +
                       std::to_string(sizeof(T) * 8) + "-bit");
  }
  CheckpointData<T> ck;
  ck.config = TrainConfig::from_text(binio::read_string(in));
  ck.epoch = binio::read_u64(in);
  ck.rng_state = binio::read_u64(in);
  ck.adam_steps = binio::read_u64(in);
  const auto count = binio::read_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    typename CheckpointData<T>::Blob b;
    b.name = binio::read_string(in);
    const auto rank = binio::read_u32(in);
    for (std::uint32_t r = 0; r < rank; ++r) b.shape.push_back(static_cast<std::size_t>(binio::read_u64(in)));
    const auto n = shape_numel(b.shape);
    b.value = detail::read_values<T>(in, n);
    b.m = detail::read_values<T>(in, n);
    b.v = detail::read_values<T>(in, n);
    ck.tensors.push_back(std::move(b));
  }
  ck.log = binio::read_string(in);
  return ck;
}

/// Copies checkpoint tensors into `model` (and Adam moments into `opt` when
/// given). Names and shapes must match exactly.
template <class T>
void restore_parameters(const CheckpointData<T>& ck, VfeModel<T>& model, nn::Adam<T>* opt = nullptr) {
  const auto& entries = model.parameters().entries();
  if (entries.size() != ck.tensors.size()) {
    throw VersionError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model has " +
                       std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = entries[i];
    const auto& b = ck.tensors[i];
    if (b.name != name || b.shape != t.shape()) {
      throw VersionError("checkpoint tensor " + b.name + " " + shape_str(b.shape) + " does not match model tensor " +
                         name + " " + shape_str(t.shape()));
    }
    auto handle = t;
    auto dst = handle.mutable_data();
    std::copy(b.value.begin(), b.value.end(), dst.begin());
    if (opt) {
      opt->first_moments()[i] = b.m;
      opt->second_moments()[i] = b.v;
    }
  }
  if (opt) opt->set_steps(ck.adam_steps);
}

}  // namespace vfetps
