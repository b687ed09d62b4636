#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "vfetps/core/errors.hpp"
#include "vfetps/core/rng.hpp"
#include "vfetps/model/image.hpp"
#include "vfetps/model/tokenizer.hpp"

// Procedural pedestrian-like identities: blocky figures whose hair, top,
// trousers, shoes and bag follow an attribute tuple, plus template captions
// describing the same tuple.

namespace vfetps::synth {

inline constexpr std::size_t kPaletteSize = 8;
inline constexpr std::array<const char*, kPaletteSize> kColorNames = {"red",   "green", "blue", "yellow",
                                                                      "black", "white", "gray", "purple"};
inline constexpr std::array<std::array<float, 3>, kPaletteSize> kColorRgb = {{{0.85f, 0.10f, 0.10f},
                                                                               {0.10f, 0.70f, 0.20f},
                                                                               {0.10f, 0.20f, 0.85f},
                                                                               {0.90f, 0.85f, 0.10f},
                                                                               {0.05f, 0.05f, 0.05f},
                                                                               {0.95f, 0.95f, 0.95f},
                                                                               {0.50f, 0.50f, 0.50f},
                                                                               {0.55f, 0.15f, 0.70f}}};
inline constexpr std::array<float, 3> kSkin = {0.87f, 0.72f, 0.60f};
inline constexpr std::array<float, 3> kBagRgb = {0.45f, 0.30f, 0.15f};
inline constexpr std::array<float, 3> kPlainBackground = {0.40f, 0.45f, 0.40f};

enum class Bag : std::uint8_t { none, backpack, shoulder };
enum class TopLength : std::uint8_t { short_top, long_top };

inline const char* bag_words(Bag b) {
  switch (b) {
    case Bag::backpack: return "backpack";
    case Bag::shoulder: return "shoulder bag";
    default: return "";
  }
}
inline const char* top_length_word(TopLength t) { return t == TopLength::short_top ? "short" : "long"; }

struct IdentitySpec {
  std::int64_t pid = 0;
  std::uint8_t hair = 0, top = 0, bottom = 0, shoe = 0;  // palette indices
  Bag bag = Bag::none;
  TopLength top_len = TopLength::short_top;

  auto attributes() const { return std::tuple(hair, top, bottom, shoe, bag, top_len); }
  bool operator==(const IdentitySpec&) const = default;
};

/// 8^4 * 3 * 2 = 24576 attribute tuples, about 14.6 bits.
inline constexpr std::size_t kAttributeCombinations = kPaletteSize * kPaletteSize * kPaletteSize * kPaletteSize * 3 * 2;

inline IdentitySpec generate_identity(std::int64_t pid, Rng& rng) {
  IdentitySpec s;
  s.pid = pid;
  s.hair = static_cast<std::uint8_t>(rng.below(kPaletteSize));
  s.top = static_cast<std::uint8_t>(rng.below(kPaletteSize));
  s.bottom = static_cast<std::uint8_t>(rng.below(kPaletteSize));
  s.shoe = static_cast<std::uint8_t>(rng.below(kPaletteSize));
  s.bag = static_cast<Bag>(rng.below(3));
  s.top_len = static_cast<TopLength>(rng.below(2));
  return s;
}

/// `count` identities with pids 0..count-1 and pairwise distinct attribute
/// tuples (a colliding draw is redrawn).
inline std::vector<IdentitySpec> generate_identities(std::size_t count, Rng& rng) {
  if (count > kAttributeCombinations) throw ConfigError("more identities requested than attribute combinations");
  std::vector<IdentitySpec> out;
  std::set<decltype(IdentitySpec{}.attributes())> seen;
  for (std::size_t i = 0; i < count; ++i) {
    IdentitySpec s;
    do {
      s = generate_identity(static_cast<std::int64_t>(i), rng);
    } while (!seen.insert(s.attributes()).second);
    out.push_back(s);
  }
  return out;
}

struct JitterOptions {
  bool enabled = true;
  int max_shift = 3;          // pixels, horizontal
  double brightness = 0.10;   // relative
  double noise_sigma = 0.02;
  bool random_background = true;

  static JitterOptions off() { return {false, 0, 0.0, 0.0, false}; }
};

struct RenderedView {
  std::int64_t pid = 0;
  Image image;
  std::uint64_t view_seed = 0;
};

/// Row ranges of the figure's bands for a given top length.
struct BandLayout {
  std::size_t hair_begin = 3, hair_end = 8;
  std::size_t face_end = 12;
  std::size_t torso_end = 32;  // exclusive
  std::size_t legs_end = 56;
  std::size_t shoes_end = 62;
};

inline BandLayout band_layout(TopLength t) {
  BandLayout b;
  if (t == TopLength::long_top) b.torso_end = 36;
  return b;
}

inline constexpr std::size_t kRenderHeight = 64, kRenderWidth = 32;
inline constexpr int kFigureLeft = 10, kFigureWidth = 12;

/// Deterministic image of `spec` for one camera view.
inline Image render(const IdentitySpec& spec, std::uint64_t view_seed, const JitterOptions& jitter = {}) {
  Rng rng(view_seed);
  const std::size_t H = kRenderHeight, W = kRenderWidth;
  Image im(3, H, W);
  std::array<float, 3> bg = kPlainBackground;
  int shift = 0;
  double gain = 1.0;
  if (jitter.enabled) {
    shift = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * jitter.max_shift + 1))) - jitter.max_shift;
    gain = rng.uniform(1.0 - jitter.brightness, 1.0 + jitter.brightness);
    if (jitter.random_background) {
      for (auto& c : bg) c = static_cast<float>(rng.uniform(0.25, 0.65));
    }
  }
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < H * W; ++i) im.pixels[c * H * W + i] = bg[c];

  auto fill = [&](std::size_t y0, std::size_t y1, int x0, int x1, const std::array<float, 3>& rgb) {
    for (std::size_t y = y0; y < y1 && y < H; ++y)
      for (int x = std::max(0, x0 + shift); x < std::min<int>(static_cast<int>(W), x1 + shift); ++x)
        for (std::size_t c = 0; c < 3; ++c) im.at(c, y, static_cast<std::size_t>(x)) = rgb[c];
  };
  const auto b = band_layout(spec.top_len);
  const int L = kFigureLeft, R = kFigureLeft + kFigureWidth;
  fill(b.hair_begin, b.hair_end, L + 3, R - 3, kColorRgb[spec.hair]);
  fill(b.hair_end, b.face_end, L + 3, R - 3, kSkin);
  fill(b.face_end, b.torso_end, L, R, kColorRgb[spec.top]);
  fill(b.torso_end, b.legs_end, L + 1, R - 1, kColorRgb[spec.bottom]);
  fill(b.legs_end, b.shoes_end, L + 1, R - 1, kColorRgb[spec.shoe]);
  if (spec.bag == Bag::backpack) fill(13, 29, R, R + 3, kBagRgb);
  if (spec.bag == Bag::shoulder) fill(22, 29, L - 3, L, kBagRgb);

  if (jitter.enabled) {
    for (auto& v : im.pixels) {
      const double x = v * gain + jitter.noise_sigma * rng.normal();
      v = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
  }
  return im;
}

inline std::vector<RenderedView> render_views(const IdentitySpec& spec, std::size_t count, Rng& rng,
                                              const JitterOptions& jitter = {}) {
  if (count == 0) throw ConfigError("render_views: at least one view required");
  std::vector<RenderedView> out;
  for (std::size_t v = 0; v < count; ++v) {
    const auto seed = rng.next();
    out.push_back({spec.pid, render(spec, seed, jitter), seed});
  }
  return out;
}

inline constexpr std::size_t kTemplateCount = 4;

/// Caption of `spec` using template `which` (0..kTemplateCount-1).
inline std::string describe(const IdentitySpec& spec, std::size_t which) {
  const std::string hair = kColorNames[spec.hair], top = kColorNames[spec.top], bottom = kColorNames[spec.bottom],
                    shoe = kColorNames[spec.shoe], len = top_length_word(spec.top_len), bag = bag_words(spec.bag);
  const bool has_bag = spec.bag != Bag::none;
  std::ostringstream os;
  switch (which % kTemplateCount) {
    case 0:
      os << "person with " << hair << " hair, " << len << ' ' << top << " top, " << bottom << " pants and " << shoe
         << " shoes";
      if (has_bag) os << " carrying a " << bag;
      break;
    case 1:
      os << hair << " haired person in a " << len << ' ' << top << " top, " << bottom << " pants, " << shoe << " shoes";
      if (has_bag) os << " with a " << bag;
      break;
    case 2:
      os << "this pedestrian has " << hair << " hair, a " << len << ' ' << top << " top, " << bottom << " pants, "
         << shoe << " shoes";
      if (has_bag) os << " and a " << bag;
      break;
    default:
      os << len << ' ' << top << " top, " << bottom << " pants, " << shoe << " shoes and " << hair << " hair";
      if (has_bag) os << ", carries a " << bag;
      break;
  }
  return os.str();
}

inline std::string describe(const IdentitySpec& spec, Rng& rng) { return describe(spec, rng.below(kTemplateCount)); }

/// `count` captions of one image using distinct templates while they last.
inline std::vector<std::string> describe_many(const IdentitySpec& spec, std::size_t count, Rng& rng) {
  std::vector<std::string> out;
  auto order = rng.sample_without_replacement(kTemplateCount, kTemplateCount);
  for (std::size_t i = 0; i < count; ++i) out.push_back(describe(spec, order[i % kTemplateCount]));
  return out;
}

/// Every word that can occur in a caption.
inline std::vector<std::string> caption_words() {
  std::vector<std::string> corpus;
  IdentitySpec s;
  for (std::size_t c = 0; c < kPaletteSize; ++c) corpus.push_back(kColorNames[c]);
  for (auto t : {TopLength::short_top, TopLength::long_top})
    for (auto b : {Bag::none, Bag::backpack, Bag::shoulder}) {
      s.top_len = t;
      s.bag = b;
      for (std::size_t k = 0; k < kTemplateCount; ++k) corpus.push_back(describe(s, k));
    }
  return corpus;
}

// ---- PPM ---------------------------------------------------------------

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0));
}

/// Binary P6, maxval 255, values quantized to round(v * 255).
inline void write_ppm(const std::filesystem::path& path, const Image& im) {
  if (im.channels != 3) throw ContractError("write_ppm: PPM holds exactly 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image " + path.string());
  out << "P6\n" << im.width << ' ' << im.height << "\n255\n";
  std::vector<char> row(im.width * 3);
  for (std::size_t y = 0; y < im.height; ++y) {
    for (std::size_t x = 0; x < im.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) row[x * 3 + c] = static_cast<char>(to_byte(im.at(c, y, x)));
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("short write on image " + path.string());
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  if (token() != "P6") throw IoError(path.string() + " is not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw IoError("malformed PPM header in " + path.string());
  }
  if (maxval != 255 || w == 0 || h == 0) throw IoError("unsupported PPM header in " + path.string());
  Image im(3, h, w);
  std::vector<unsigned char> row(w * 3);
  for (std::size_t y = 0; y < h; ++y) {
    if (!in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()))) {
      throw IoError("truncated PPM data in " + path.string());
    }
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) im.at(c, y, x) = static_cast<float>(row[x * 3 + c]) / 255.0f;
  }
  return im;
}

// ---- dataset -------------------------------------------------------------

struct SplitRatios {
  double train = 0.75, val = 0.0, test = 0.25;
};

struct DatasetConfig {
  std::size_t identities = 32;
  std::size_t views_per_id = 4;
  std::size_t captions_per_view = 2;
  SplitRatios split;
  std::uint64_t seed = 0;
  JitterOptions jitter;
};

inline const std::array<const char*, 3> kSplitNames = {"train", "val", "test"};

/// Identity-disjoint split: ids are shuffled, the first round(train * n) go
/// to train, the next round(val * n) to val, the rest to test.
inline std::vector<std::string> assign_splits(std::size_t n, const SplitRatios& r, Rng& rng) {
  if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  const auto n_train = static_cast<std::size_t>(std::llround(r.train * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(r.val * static_cast<double>(n))));
  std::vector<std::string> split(n);
  for (std::size_t k = 0; k < n; ++k) split[order[k]] = k < n_train ? "train" : k < n_train + n_val ? "val" : "test";
  return split;
}

struct CaptionRow {
  std::string image_path;  // relative to the dataset root
  std::string caption;
  std::int64_t pid = 0;
  std::string split;
};

struct Dataset {
  struct Entry {
    std::string path;
    std::int64_t pid = 0;
    std::string split;
    Image image;
  };
  std::filesystem::path root;
  std::vector<Entry> images;
  std::vector<CaptionRow> captions;
  std::vector<std::size_t> caption_image;  // caption row -> index into images
  Vocabulary vocab;
  nlohmann::json manifest;

  std::vector<std::size_t> image_indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < images.size(); ++i)
      if (images[i].split == split) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> caption_indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < captions.size(); ++i)
      if (captions[i].split == split) out.push_back(i);
    return out;
  }
};

/// Generates and writes a dataset; returns the manifest.
inline nlohmann::json write_dataset(const std::filesystem::path& dir, const DatasetConfig& cfg) {
  if (cfg.identities < 2 || cfg.views_per_id == 0 || cfg.captions_per_view == 0) {
    throw ConfigError("dataset needs at least 2 identities, 1 view and 1 caption");
  }
  Rng root(cfg.seed);
  Rng id_rng = root.split("identities");
  Rng split_rng = root.split("splits");
  const auto specs = generate_identities(cfg.identities, id_rng);
  const auto splits = assign_splits(cfg.identities, cfg.split, split_rng);

  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());

  std::ofstream captions(dir / "captions.jsonl");
  if (!captions) throw IoError("cannot write " + (dir / "captions.jsonl").string());
  std::vector<std::string> corpus = caption_words();
  std::map<std::string, std::array<std::size_t, 3>> counts;  // ids, images, captions
  for (const auto* s : kSplitNames) counts[s] = {0, 0, 0};
  for (const auto& spec : specs) {
    const auto& split = splits[static_cast<std::size_t>(spec.pid)];
    counts[split][0] += 1;
    Rng view_rng = root.split("views/" + std::to_string(spec.pid));
    Rng cap_rng = root.split("captions/" + std::to_string(spec.pid));
    const auto views = render_views(spec, cfg.views_per_id, view_rng, cfg.jitter);
    for (std::size_t v = 0; v < views.size(); ++v) {
      const auto rel = "images/" + std::to_string(spec.pid) + "_" + std::to_string(v) + ".ppm";
      write_ppm(dir / rel, views[v].image);
      counts[split][1] += 1;
      for (const auto& text : describe_many(spec, cfg.captions_per_view, cap_rng)) {
        captions << nlohmann::json{{"image_path", rel}, {"caption", text}, {"pid", spec.pid}, {"split", split}}.dump()
                 << '\n';
        corpus.push_back(text);
        counts[split][2] += 1;
      }
    }
  }
  auto vocab = Vocabulary::build(corpus);
  vocab.save(dir / "vocab.txt");

  nlohmann::json identities = nlohmann::json::array();
  for (const auto& s : specs) {
    identities.push_back({{"pid", s.pid},
                          {"hair", kColorNames[s.hair]},
                          {"top", kColorNames[s.top]},
                          {"bottom", kColorNames[s.bottom]},
                          {"shoe", kColorNames[s.shoe]},
                          {"bag", s.bag == Bag::none ? "none" : bag_words(s.bag)},
                          {"top_len", top_length_word(s.top_len)},
                          {"split", splits[static_cast<std::size_t>(s.pid)]}});
  }
  nlohmann::json manifest = {{"version", 1},
                             {"seed", cfg.seed},
                             {"identities", cfg.identities},
                             {"views_per_id", cfg.views_per_id},
                             {"captions_per_view", cfg.captions_per_view},
                             {"image_height", kRenderHeight},
                             {"image_width", kRenderWidth},
                             {"jitter", cfg.jitter.enabled},
                             {"split_ratios", {{"train", cfg.split.train}, {"val", cfg.split.val}, {"test", cfg.split.test}}},
                             {"vocab_size", vocab.size()},
                             {"people", identities}};
  for (const auto& [name, c] : counts) manifest["splits"][name] = {{"identities", c[0]}, {"images", c[1]}, {"captions", c[2]}};
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw IoError("cannot write manifest in " + dir.string());
  mf << manifest.dump(2) << '\n';
  return manifest;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.root = dir;
  {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("no manifest.json in " + dir.string());
    ds.manifest = nlohmann::json::parse(mf);
  }
  ds.vocab = Vocabulary::load(dir / "vocab.txt");
  std::ifstream in(dir / "captions.jsonl");
  if (!in) throw IoError("no captions.jsonl in " + dir.string());
  std::map<std::string, std::size_t> by_path;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    CaptionRow row{j.at("image_path"), j.at("caption"), j.at("pid"), j.at("split")};
    auto it = by_path.find(row.image_path);
    if (it == by_path.end()) {
      it = by_path.emplace(row.image_path, ds.images.size()).first;
      ds.images.push_back({row.image_path, row.pid, row.split, read_ppm(dir / row.image_path)});
    } else if (ds.images[it->second].pid != row.pid) {
      throw IoError("image " + row.image_path + " listed with two identities");
    }
    ds.caption_image.push_back(it->second);
    ds.captions.push_back(std::move(row));
  }
  if (ds.captions.empty()) throw IoError("dataset " + dir.string() + " has no captions");
  return ds;
}

}  // namespace vfetps::synth
