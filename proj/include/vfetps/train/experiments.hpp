#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vfetps/core/gradcheck.hpp"
#include "vfetps/metrics.hpp"
#include "vfetps/train/trainer.hpp"

namespace vfetps {

// ---- gradient check of the three training losses ---------------------------

struct LossGradReport {
  std::string loss;
  GradCheckResult result;
};

/// Tiny shapes for the loss gradient check: B=4, C=4, d=8, 16x8 images with
/// 4-pixel patches, 6-word captions, one layer per tower.
inline TrainConfig gradcheck_config(TrainConfig cfg) {
  cfg.encoder.d = 8;
  cfg.encoder.d_out = 8;
  cfg.encoder.heads = 2;
  cfg.encoder.layers = 1;
  cfg.encoder.patch = 4;
  cfg.encoder.image_h = 16;
  cfg.encoder.image_w = 8;
  cfg.encoder.text_len = 6;
  cfg.encoder.vocab_size = 12;
  cfg.fusion_depth = 1;
  cfg.batch = 4;
  cfg.pairs = 4;
  cfg.id_classes = 2;
  cfg.precision = 64;
  return cfg;
}

/// Central-difference check of every enabled loss on a random batch drawn
/// from `seed`. Each loss is checked with respect to its feature inputs and
/// the parameters of its own head: global features for CMPM and the
/// calibration loss (plus the identity classifier in id_loss mode), encoder
/// token sequences and the TG-MIM head for the reconstruction loss. Head
/// parameters get N(0, jitter^2) added to their initial values first.
inline std::vector<LossGradReport> gradcheck_losses(const TrainConfig& base, std::uint64_t seed,
                                                    GradCheckOptions opts = {}, double jitter = 0.3,
                                                    double spread = 0.1) {
  auto cfg = gradcheck_config(base);
  cfg.seed = seed;
  VfeModel<double> model(cfg);
  Rng rng = Rng(seed).split("gradcheck");
  const auto& e = cfg.encoder;
  const std::size_t B = cfg.batch;

  auto random_leaf = [&](Shape shape) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.normal();
    return Tensor<double>(std::move(shape), std::move(v), true);
  };
  auto jittered = [&](const std::string& prefix) {
    std::vector<Tensor<double>> out;
    for (const auto& [name, t] : model.parameters().entries()) {
      if (name.rfind(prefix, 0) != 0) continue;
      auto h = t;
      for (auto& v : h.mutable_data()) v += jitter * rng.normal();
      out.push_back(h);
    }
    return out;
  };

  const std::vector<std::int64_t> pids = {0, 0, 1, 1};
  const std::vector<std::size_t> classes = {0, 0, 1, 1};
  // Global features scattered around one shared direction, like the features
  // of a freshly initialized encoder.
  auto clustered_leaf = [&](std::size_t rows, std::size_t cols) {
    std::vector<double> centre(cols), v(rows * cols);
    for (auto& x : centre) x = rng.normal();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] = centre[c] + spread * rng.normal();
    return Tensor<double>(Shape{rows, cols}, std::move(v), true);
  };
  auto image_globals = clustered_leaf(B, e.d_out);
  auto text_globals = clustered_leaf(B, e.d_out);

  std::vector<LossGradReport> out;
  std::function<Tensor<double>()> cmpm = [&] {
    return cmpm_loss(AlignmentBatch<double>{image_globals, text_globals, identity_labels(pids)}, cfg.tau, cfg.eps)
        .total;
  };
  out.push_back({"cmpm", finite_difference_check(cmpm, {image_globals, text_globals}, opts)});

  if (cfg.isgvfc) {
    const auto anchors = sample_pairs(pids, cfg.pairs, rng);
    std::vector<Tensor<double>> params = {image_globals};
    if (cfg.isgvfc_mode == CalibrationMode::id_loss)
      for (auto& t : jittered("isgvfc.")) params.push_back(t);
    std::function<Tensor<double>()> calib = [&] {
      switch (cfg.isgvfc_mode) {
        case CalibrationMode::id_loss: return id_loss(image_globals, classes, *model.id_classifier());
        case CalibrationMode::triplet: return triplet_loss(image_globals, pids, cfg.triplet_margin);
        default: {
          auto f = gather_rows(image_globals, anchors.indices);
          return isgvfc_loss(match_distribution(f, anchors.labels, cfg.tau), cfg.eps);
        }
      }
    };
    out.push_back({"isgvfc", finite_difference_check(calib, params, opts)});
  }

  if (cfg.tgmim_active()) {
    const bool guided = cfg.mim_variant == MimMode::text_guided;
    std::vector<Image> images;
    std::vector<PatchMask> masks;
    std::size_t total_masked = 0;
    for (std::size_t b = 0; b < B; ++b) {
      Image im(e.channels, e.image_h, e.image_w);
      for (auto& v : im.pixels) v = static_cast<float>(rng.uniform());
      images.push_back(std::move(im));
      auto m = sample_mask(e.patches(), cfg.mask_ratio, rng);
      if (m.masked_count() == 0) m.flags[0] = 1;
      total_masked += m.masked_count();
      masks.push_back(std::move(m));
    }
    // An odd number of masked patches in total, so no per-pixel sum of L1
    // signs over the batch cancels to an exact zero gradient.
    if (total_masked % 2 == 0) {
      auto& flags = masks[0].flags;
      auto it = std::find(flags.begin(), flags.end(), 0);
      if (it != flags.end()) *it = 1;
      else *std::find(flags.begin(), flags.end(), 1) = 0;
    }

    SequenceFeatures<double> visual;
    visual.batch = B;
    visual.length = e.patches() + 1;
    visual.tokens = random_leaf({B * visual.length, e.d});
    SequenceFeatures<double> text;
    text.batch = B;
    text.length = e.text_positions();
    text.tokens = random_leaf({B * text.length, e.d});
    text.key_keep.assign(B * text.length, 0);
    for (std::size_t b = 0; b < B; ++b) {
      const auto real = 3 + rng.below(text.length - 2);
      for (std::size_t i = 0; i < real; ++i) text.key_keep[b * text.length + i] = 1;
    }

    std::vector<Tensor<double>> params = {visual.tokens};
    if (guided) params.push_back(text.tokens);
    for (auto& t : jittered("tgmim.")) params.push_back(t);
    std::function<Tensor<double>()> mim = [&] {
      auto pred = guided ? model.tgmim()->forward(visual, &text, MimVariant::text_guided)
                         : model.tgmim()->forward(visual, nullptr, MimVariant::text_free);
      return tgmim_loss(pred, std::span<const Image>(images), std::span<const PatchMask>(masks), e.patch);
    };
    out.push_back({"tgmim", finite_difference_check(mim, params, opts)});
  }
  return out;
}

// ---- ablation runner --------------------------------------------------------

/// A configuration that differs from the base only in `overrides`.
struct Variant {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;
};

inline std::vector<std::string> ablation_preset_names() {
  return {"table5", "mask-sweep", "mim-variants", "calibration"};
}

inline std::vector<Variant> ablation_preset(const std::string& name) {
  if (name == "table5") {
    return {{"full", {{"tgmim", "true"}, {"isgvfc", "true"}}},
            {"tgmim-only", {{"tgmim", "true"}, {"isgvfc", "false"}}},
            {"isgvfc-only", {{"tgmim", "false"}, {"isgvfc", "true"}}},
            {"baseline", {{"tgmim", "false"}, {"isgvfc", "false"}}}};
  }
  if (name == "mask-sweep") {
    std::vector<Variant> v;
    for (int i = 1; i <= 9; ++i) {
      const std::string r = "0." + std::to_string(i);
      v.push_back({"mask=" + r, {{"mask_ratio", r}}});
    }
    return v;
  }
  if (name == "mim-variants") {
    return {{"text-guided", {{"tgmim", "true"}, {"mim_variant", "text_guided"}}},
            {"text-free", {{"tgmim", "true"}, {"mim_variant", "text_free"}}},
            {"no-mim", {{"tgmim", "false"}}}};
  }
  if (name == "calibration") {
    return {{"kl", {{"isgvfc", "true"}, {"isgvfc_mode", "kl"}}},
            {"id_loss", {{"isgvfc", "true"}, {"isgvfc_mode", "id_loss"}}},
            {"triplet", {{"isgvfc", "true"}, {"isgvfc_mode", "triplet"}}},
            {"none", {{"isgvfc", "false"}}}};
  }
  throw ConfigError("unknown ablation preset '" + name + "'");
}

inline TrainConfig apply_variant(TrainConfig cfg, const Variant& v) {
  for (const auto& [k, val] : v.overrides) cfg.set(k, val);
  return cfg;
}

struct ExperimentResult {
  MetricsReport report;
  std::vector<EpochRecord> log;
};

/// Trains `cfg` from scratch on the train split and reports metrics on
/// `eval_split`. avg_dist is filled for TG-MIM models at the training mask
/// ratio (NaN otherwise).
template <class T>
ExperimentResult run_experiment(TrainConfig cfg, const synth::Dataset& ds, const std::string& eval_split = "test",
                                const TrainHooks& hooks = {}) {
  const auto train = prepare_split(ds, "train", cfg.encoder.text_len);
  const auto eval = prepare_split(ds, eval_split, cfg.encoder.text_len);
  cfg = bind_config(cfg, ds, train);
  TrainingState<T> st(cfg);
  run_training(st, train, hooks);
  ExperimentResult r;
  r.report = evaluate(st.model, eval);
  r.report.avg_dist = std::numeric_limits<double>::quiet_NaN();
  if (st.model.tgmim() && cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
    r.report.avg_dist = reconstruction_avg_dist(st.model, eval, cfg.mask_ratio, cfg.seed);
  }
  for (const auto& rec : st.log) {
    r.report.loss_curve.push_back({rec.epoch, rec.mean.total, rec.mean.tgmim, rec.mean.isgvfc, rec.mean.cmpm});
  }
  r.log = st.log;
  return r;
}

struct AblationRow {
  std::string name;
  TrainConfig config;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricsReport> runs;
  MetricsReport mean;
  bool failed = false;
  std::string error;
};

inline MetricsReport mean_report(const std::vector<MetricsReport>& runs) {
  MetricsReport m;
  if (runs.empty()) return m;
  const double n = static_cast<double>(runs.size());
  for (const auto& r : runs) {
    m.rank1 += r.rank1 / n;
    m.rank5 += r.rank5 / n;
    m.rank10 += r.rank10 / n;
    m.map += r.map / n;
    m.silhouette += r.silhouette / n;
    m.avg_dist += r.avg_dist / n;
    m.chance_rank1 += r.chance_rank1 / n;
  }
  const auto epochs = runs.front().loss_curve.size();
  for (std::size_t e = 0; e < epochs; ++e) {
    LossCurvePoint p{runs.front().loss_curve[e].epoch, 0, 0, 0, 0};
    for (const auto& r : runs) {
      if (r.loss_curve.size() != epochs) continue;
      p.total += r.loss_curve[e].total / n;
      p.tgmim += r.loss_curve[e].tgmim / n;
      p.isgvfc += r.loss_curve[e].isgvfc / n;
      p.cmpm += r.loss_curve[e].cmpm / n;
    }
    m.loss_curve.push_back(p);
  }
  return m;
}

struct AblationTable {
  std::vector<AblationRow> rows;

  const AblationRow* find(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return &r;
    return nullptr;
  }

  std::string to_markdown() const {
    std::ostringstream os;
    os << "| variant | seeds | Rank-1 | Rank-5 | Rank-10 | mAP | silhouette | avgDist | chance R1 |\n"
       << "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
      os << "| " << r.name << " | " << r.runs.size() << " | ";
      if (r.failed) {
        os << "failed: " << r.error << " | | | | | | |\n";
        continue;
      }
      const auto& m = r.mean;
      os << std::fixed << std::setprecision(2) << m.rank1 << " | " << m.rank5 << " | " << m.rank10 << " | " << m.map
         << " | " << std::setprecision(4) << m.silhouette << " | ";
      if (std::isnan(m.avg_dist)) os << "n/a";
      else os << m.avg_dist;
      os << " | " << std::setprecision(2) << m.chance_rank1 << " |\n";
    }
    return os.str();
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "variant,seed,rank1,rank5,rank10,map,silhouette,avg_dist,chance_rank1,status\n";
    os << std::setprecision(10);
    for (const auto& r : rows) {
      if (r.failed) {
        os << r.name << ",,,,,,,,,failed\n";
        continue;
      }
      for (std::size_t i = 0; i < r.runs.size(); ++i) {
        const auto& m = r.runs[i];
        os << r.name << ',' << r.seeds[i] << ',' << m.rank1 << ',' << m.rank5 << ',' << m.rank10 << ',' << m.map
           << ',' << m.silhouette << ',' << m.avg_dist << ',' << m.chance_rank1 << ",ok\n";
      }
    }
    return os.str();
  }
};

struct AblationOptions {
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string eval_split = "test";
  std::function<void(const std::string&)> progress;
};

/// Trains every variant with every seed. The base configuration gets its own
/// row unless one of the variants resolves to exactly the base. A variant
/// whose training throws is marked failed and the run continues.
template <class T>
AblationTable run_ablation(const TrainConfig& base, const std::vector<Variant>& variants, const synth::Dataset& ds,
                           const AblationOptions& opts = {}) {
  struct Planned {
    std::string name;
    TrainConfig config;
    std::string error;
  };
  std::vector<Planned> plan;
  bool base_covered = false;
  for (const auto& v : variants) {
    try {
      auto cfg = apply_variant(base, v);
      base_covered = base_covered || cfg == base;
      plan.push_back({v.name, cfg, ""});
    } catch (const std::exception& e) {
      plan.push_back({v.name, base, e.what()});
    }
  }
  if (!base_covered) plan.insert(plan.begin(), Planned{"base", base, ""});

  AblationTable table;
  for (const auto& p : plan) {
    AblationRow row;
    row.name = p.name;
    row.config = p.config;
    if (!p.error.empty()) {
      row.failed = true;
      row.error = p.error;
      table.rows.push_back(std::move(row));
      continue;
    }
    for (auto seed : opts.seeds) {
      auto run_cfg = p.config;
      run_cfg.seed = seed;
      run_cfg.out.clear();
      if (opts.progress) opts.progress(p.name + " seed " + std::to_string(seed));
      try {
        run_cfg.validate();
        auto res = run_experiment<T>(run_cfg, ds, opts.eval_split, TrainHooks{nullptr, true});
        row.runs.push_back(res.report);
        row.seeds.push_back(seed);
      } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
        break;
      }
    }
    if (!row.failed) row.mean = mean_report(row.runs);
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace vfetps
