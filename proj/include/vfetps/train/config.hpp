#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vfetps/core/errors.hpp"
#include "vfetps/model/encoders.hpp"
#include "vfetps/model/tgmim.hpp"

namespace vfetps {

enum class CalibrationMode { kl, id_loss, triplet };
enum class MimMode { text_guided, text_free, off };

inline std::string to_string(CalibrationMode m) {
  switch (m) {
    case CalibrationMode::id_loss: return "id_loss";
    case CalibrationMode::triplet: return "triplet";
    default: return "kl";
  }
}

inline std::string to_string(MimMode m) {
  switch (m) {
    case MimMode::text_free: return "text_free";
    case MimMode::off: return "off";
    default: return "text_guided";
  }
}

struct TrainConfig {
  EncoderConfig encoder;
  std::size_t fusion_depth = 1;
  bool mca_head_dim_scale = false;

  double tau = 0.02;
  double eps = 1e-8;
  double mask_ratio = 0.5;
  std::size_t pairs = 16;   // C
  std::size_t batch = 32;   // B
  std::size_t per_identity = 4;  // max pairs of one identity in a batch
  double lr = 3e-4;
  std::size_t epochs = 200;

  bool tgmim = true;
  bool isgvfc = true;
  bool cmpm = true;
  CalibrationMode isgvfc_mode = CalibrationMode::kl;
  MimMode mim_variant = MimMode::text_guided;
  double triplet_margin = 0.3;
  std::size_t id_classes = 0;  // identity classifier width, filled in from the training split
  double w_tgmim = 1.0, w_isgvfc = 1.0, w_cmpm = 1.0;

  std::uint64_t seed = 0;
  int precision = 32;
  std::string dataset;
  std::string out;

  bool tgmim_active() const { return tgmim && mim_variant != MimMode::off; }

  /// Laptop-sized setting used for the experiments in this repository.
  static TrainConfig desk() { return {}; }

  /// Values of the full-size setting: ViT-B/16-sized towers on 384x128
  /// images, 77-word captions, B=100, lr=1e-5, 60 epochs.
  static TrainConfig paper() {
    TrainConfig c;
    c.encoder.d = 768;
    c.encoder.layers = 12;
    c.encoder.heads = 12;
    c.encoder.patch = 16;
    c.encoder.image_h = 384;
    c.encoder.image_w = 128;
    c.encoder.text_len = 77;
    c.encoder.d_out = 512;
    c.fusion_depth = 4;
    c.pairs = 20;
    c.batch = 100;
    c.lr = 1e-5;
    c.epochs = 60;
    return c;
  }

  void validate() const {
    if (!cmpm) throw ConfigError("cmpm cannot be disabled: it is the retrieval objective");
    if (batch < 2) throw ConfigError("batch size must be at least 2");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (pairs < 2 || pairs > batch) throw ConfigError("pairs (C) must lie in [2, batch]");
    if (per_identity < 1) throw ConfigError("per_identity must be at least 1");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw ConfigError("mask_ratio must lie in [0, 1]");
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(eps >= 0.0)) throw ConfigError("eps must be non-negative");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
    encoder.validate();
  }

  /// Sets one field from its key=value text form.
  void set(const std::string& key, const std::string& value) {
    auto as_size = [&] {
      try {
        std::size_t pos = 0;
        const auto v = std::stoull(value, &pos);
        if (pos != value.size() || value[0] == '-') throw std::invalid_argument(value);
        return static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + value + "'");
      }
    };
    auto as_double = [&] {
      try {
        std::size_t pos = 0;
        const auto v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
      } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
      }
    };
    auto as_bool = [&] {
      if (value == "1" || value == "true" || value == "on" || value == "yes") return true;
      if (value == "0" || value == "false" || value == "off" || value == "no") return false;
      throw ConfigError("config key '" + key + "' expects a boolean, got '" + value + "'");
    };
    if (key == "d") encoder.d = as_size();
    else if (key == "d_out") encoder.d_out = as_size();
    else if (key == "layers") encoder.layers = as_size();
    else if (key == "heads") encoder.heads = as_size();
    else if (key == "patch") encoder.patch = as_size();
    else if (key == "image_h") encoder.image_h = as_size();
    else if (key == "image_w") encoder.image_w = as_size();
    else if (key == "text_len") encoder.text_len = as_size();
    else if (key == "vocab_size") encoder.vocab_size = as_size();
    else if (key == "fusion_depth") fusion_depth = as_size();
    else if (key == "mca_head_dim_scale") mca_head_dim_scale = as_bool();
    else if (key == "tau") tau = as_double();
    else if (key == "eps") eps = as_double();
    else if (key == "mask_ratio") mask_ratio = as_double();
    else if (key == "pairs") pairs = as_size();
    else if (key == "batch") batch = as_size();
    else if (key == "per_identity") per_identity = as_size();
    else if (key == "lr") lr = as_double();
    else if (key == "epochs") epochs = as_size();
    else if (key == "tgmim") tgmim = as_bool();
    else if (key == "isgvfc") isgvfc = as_bool();
    else if (key == "cmpm") cmpm = as_bool();
    else if (key == "isgvfc_mode") {
      if (value == "kl") isgvfc_mode = CalibrationMode::kl;
      else if (value == "id_loss") isgvfc_mode = CalibrationMode::id_loss;
      else if (value == "triplet") isgvfc_mode = CalibrationMode::triplet;
      else throw ConfigError("isgvfc_mode must be kl, id_loss or triplet, got '" + value + "'");
    } else if (key == "mim_variant") {
      if (value == "text_guided") mim_variant = MimMode::text_guided;
      else if (value == "text_free") mim_variant = MimMode::text_free;
      else if (value == "off") mim_variant = MimMode::off;
      else throw ConfigError("mim_variant must be text_guided, text_free or off, got '" + value + "'");
    } else if (key == "triplet_margin") triplet_margin = as_double();
    else if (key == "id_classes") id_classes = as_size();
    else if (key == "w_tgmim") w_tgmim = as_double();
    else if (key == "w_isgvfc") w_isgvfc = as_double();
    else if (key == "w_cmpm") w_cmpm = as_double();
    else if (key == "seed") seed = as_size();
    else if (key == "precision") precision = static_cast<int>(as_size());
    else if (key == "dataset") dataset = value;
    else if (key == "out") out = value;
    else throw ConfigError("unknown config key '" + key + "'");
  }

  std::map<std::string, std::string> to_map() const {
    auto num = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    return {{"d", std::to_string(encoder.d)},
            {"d_out", std::to_string(encoder.d_out)},
            {"layers", std::to_string(encoder.layers)},
            {"heads", std::to_string(encoder.heads)},
            {"patch", std::to_string(encoder.patch)},
            {"image_h", std::to_string(encoder.image_h)},
            {"image_w", std::to_string(encoder.image_w)},
            {"text_len", std::to_string(encoder.text_len)},
            {"vocab_size", std::to_string(encoder.vocab_size)},
            {"fusion_depth", std::to_string(fusion_depth)},
            {"mca_head_dim_scale", mca_head_dim_scale ? "true" : "false"},
            {"tau", num(tau)},
            {"eps", num(eps)},
            {"mask_ratio", num(mask_ratio)},
            {"pairs", std::to_string(pairs)},
            {"batch", std::to_string(batch)},
            {"per_identity", std::to_string(per_identity)},
            {"lr", num(lr)},
            {"epochs", std::to_string(epochs)},
            {"tgmim", tgmim ? "true" : "false"},
            {"isgvfc", isgvfc ? "true" : "false"},
            {"cmpm", cmpm ? "true" : "false"},
            {"isgvfc_mode", to_string(isgvfc_mode)},
            {"mim_variant", to_string(mim_variant)},
            {"triplet_margin", num(triplet_margin)},
            {"id_classes", std::to_string(id_classes)},
            {"w_tgmim", num(w_tgmim)},
            {"w_isgvfc", num(w_isgvfc)},
            {"w_cmpm", num(w_cmpm)},
            {"seed", std::to_string(seed)},
            {"precision", std::to_string(precision)},
            {"dataset", dataset},
            {"out", out}};
  }

  std::string to_text() const {
    std::string s;
    for (const auto& [k, v] : to_map()) s += k + "=" + v + "\n";
    return s;
  }

  /// Applies key=value lines; blank lines and '#' comments are skipped.
  void apply_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + " has no '='");
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t"), b = s.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  static TrainConfig from_text(const std::string& text, TrainConfig base = desk()) {
    base.apply_text(text);
    return base;
  }

  static TrainConfig load(const std::filesystem::path& path, TrainConfig base = desk()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), std::move(base));
  }

  /// VFE_SEED, when set, replaces the seed.
  void apply_environment() {
    if (const char* s = std::getenv("VFE_SEED"); s && *s) set("seed", s);
  }

  TgMimConfig tgmim_config() const { return TgMimConfig::from(encoder, fusion_depth, mca_head_dim_scale); }

  bool operator==(const TrainConfig& o) const { return to_map() == o.to_map(); }
};

}  // namespace vfetps
