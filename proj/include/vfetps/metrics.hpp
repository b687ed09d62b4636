#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vfetps/core/errors.hpp"
#include "vfetps/model/image.hpp"

namespace vfetps {

/// Dense row-major score matrix (queries x gallery).
struct ScoreMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// Relevant gallery indices per query.
struct RetrievalGroundTruth {
  std::vector<std::vector<std::size_t>> relevant;

  static RetrievalGroundTruth from_identities(std::span<const std::int64_t> query_pids,
                                              std::span<const std::int64_t> gallery_pids) {
    RetrievalGroundTruth gt;
    gt.relevant.resize(query_pids.size());
    for (std::size_t q = 0; q < query_pids.size(); ++q)
      for (std::size_t g = 0; g < gallery_pids.size(); ++g)
        if (query_pids[q] == gallery_pids[g]) gt.relevant[q].push_back(g);
    return gt;
  }

  /// mean(|relevant| / G): expected Rank-1 of a random ranking.
  double chance_rank1(std::size_t gallery_size) const {
    double acc = 0;
    for (const auto& r : relevant) acc += static_cast<double>(r.size()) / static_cast<double>(gallery_size);
    return relevant.empty() ? 0.0 : acc / static_cast<double>(relevant.size());
  }
};

struct LossCurvePoint {
  std::size_t epoch = 0;
  double total = 0, tgmim = 0, isgvfc = 0, cmpm = 0;

  bool operator==(const LossCurvePoint&) const = default;
};

struct MetricsReport {
  double rank1 = 0, rank5 = 0, rank10 = 0, map = 0;  // percentages
  double silhouette = 0;
  double avg_dist = 0;
  double chance_rank1 = 0;  // percentage
  std::vector<LossCurvePoint> loss_curve;

  nlohmann::json to_json() const {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& p : loss_curve) {
      curve.push_back({{"epoch", p.epoch}, {"total", p.total}, {"tgmim", p.tgmim}, {"isgvfc", p.isgvfc}, {"cmpm", p.cmpm}});
    }
    return {{"rank1", rank1},       {"rank5", rank5},     {"rank10", rank10},
            {"map", map},           {"silhouette", silhouette}, {"avg_dist", avg_dist},
            {"chance_rank1", chance_rank1}, {"loss_curve", curve}};
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.rank1 = j.at("rank1");
    r.rank5 = j.at("rank5");
    r.rank10 = j.at("rank10");
    r.map = j.at("map");
    r.silhouette = j.at("silhouette");
    r.avg_dist = j.at("avg_dist").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("avg_dist").get<double>();
    r.chance_rank1 = j.value("chance_rank1", 0.0);
    if (j.contains("loss_curve")) {
      for (const auto& p : j["loss_curve"]) {
        r.loss_curve.push_back({p.at("epoch"), p.at("total"), p.at("tgmim"), p.at("isgvfc"), p.at("cmpm")});
      }
    }
    return r;
  }

  static std::string markdown_header() {
    return "| run | Rank-1 | Rank-5 | Rank-10 | mAP | silhouette | avgDist |\n"
           "|---|---|---|---|---|---|---|\n";
  }

  std::string markdown_row(const std::string& name) const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << "| " << name << " | " << rank1 << " | " << rank5 << " | " << rank10
       << " | " << map << " | " << std::setprecision(4) << silhouette << " | " << avg_dist << " |\n";
    return os.str();
  }

  std::string to_markdown(const std::string& name = "eval") const { return markdown_header() + markdown_row(name); }

  /// Field-wise equality; a NaN avg_dist (no reconstruction head) equals NaN.
  bool operator==(const MetricsReport& o) const {
    const bool dist_equal = avg_dist == o.avg_dist || (std::isnan(avg_dist) && std::isnan(o.avg_dist));
    return rank1 == o.rank1 && rank5 == o.rank5 && rank10 == o.rank10 && map == o.map && silhouette == o.silhouette &&
           dist_equal && chance_rank1 == o.chance_rank1 && loss_curve == o.loss_curve;
  }
};

namespace detail {

inline void check_retrieval_inputs(const ScoreMatrix& sim, const RetrievalGroundTruth& gt) {
  if (sim.cols == 0) throw ContractError("retrieval metric on an empty gallery");
  if (sim.values.size() != sim.rows * sim.cols) throw DimensionError("score matrix size mismatch");
  if (gt.relevant.size() != sim.rows) throw DimensionError("ground truth does not cover every query");
}

/// Gallery order for one query: descending score, ties by ascending index.
inline std::vector<std::size_t> ranking(const ScoreMatrix& sim, std::size_t q) {
  std::vector<std::size_t> order(sim.cols);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double* row = sim.values.data() + q * sim.cols;
  std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  return order;
}

}  // namespace detail

/// Percentage of queries with at least one relevant item in the top k.
inline double rank_k(const ScoreMatrix& sim, const RetrievalGroundTruth& gt, std::size_t k) {
  detail::check_retrieval_inputs(sim, gt);
  if (k == 0 || k > sim.cols) throw ContractError("rank_k: k must lie in [1, gallery size]");
  if (sim.rows == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < sim.rows; ++q) {
    std::vector<std::uint8_t> rel(sim.cols, 0);
    for (auto g : gt.relevant[q]) rel[g] = 1;
    const auto order = detail::ranking(sim, q);
    for (std::size_t i = 0; i < k; ++i) {
      if (rel[order[i]]) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(sim.rows);
}

/// Mean over queries of average precision (mean of precision at the rank of
/// each relevant item), as a percentage.
inline double mean_average_precision(const ScoreMatrix& sim, const RetrievalGroundTruth& gt) {
  detail::check_retrieval_inputs(sim, gt);
  if (sim.rows == 0) return 0.0;
  double total = 0;
  for (std::size_t q = 0; q < sim.rows; ++q) {
    if (gt.relevant[q].empty()) throw ContractError("query " + std::to_string(q) + " has no relevant gallery item");
    std::vector<std::uint8_t> rel(sim.cols, 0);
    for (auto g : gt.relevant[q]) rel[g] = 1;
    const auto order = detail::ranking(sim, q);
    std::size_t found = 0;
    double ap = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (!rel[order[i]]) continue;
      ++found;
      ap += static_cast<double>(found) / static_cast<double>(i + 1);
    }
    total += ap / static_cast<double>(found);
  }
  return 100.0 * total / static_cast<double>(sim.rows);
}

/// Mean silhouette coefficient with Euclidean distance over rows of
/// `features` (n x dim). Members of singleton classes score 0; a == b == 0
/// scores 0.
inline double silhouette(std::span<const double> features, std::size_t dim, std::span<const std::int64_t> labels) {
  const auto n = labels.size();
  if (dim == 0 || features.size() != n * dim) throw DimensionError("silhouette: feature matrix size mismatch");
  std::map<std::int64_t, std::size_t> class_size;
  for (auto l : labels) ++class_size[l];
  if (class_size.size() < 2) throw ContractError("silhouette is undefined for fewer than two classes");

  std::vector<std::int64_t> classes;
  for (const auto& [c, _] : class_size) classes.push_back(c);
  std::vector<std::size_t> class_of(n);
  for (std::size_t i = 0; i < n; ++i)
    class_of[i] = static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), labels[i]) - classes.begin());

  double total = 0;
  std::vector<double> sums(classes.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double acc = 0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double diff = features[i * dim + c] - features[j * dim + c];
        acc += diff * diff;
      }
      sums[class_of[j]] += std::sqrt(acc);
    }
    const auto own = class_of[i];
    const auto own_size = class_size[labels[i]];
    if (own_size < 2) continue;  // singleton: s = 0
    const double a = sums[own] / static_cast<double>(own_size - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (c == own) continue;
      b = std::min(b, sums[c] / static_cast<double>(class_size[classes[c]]));
    }
    const double denom = std::max(a, b);
    total += denom > 0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

/// One masked pixel and the visible pixel it is compared against.
struct AvgDistEntry {
  std::size_t y, x;                 // masked pixel
  std::size_t nearest_y, nearest_x; // closest visible pixel
  double difference;                // mean over channels of |pred - original(nearest)|
};

/// Per-pixel table behind avg_dist. Nearest is by Euclidean pixel distance to
/// any pixel of an unmasked patch; ties go to the smallest row, then column.
inline std::vector<AvgDistEntry> avg_dist_table(std::span<const double> predicted, const Image& original,
                                                const PatchMask& mask, std::size_t patch) {
  const auto grid = patch_grid(original.height, original.width, patch);
  if (mask.size() != grid.count()) throw ContractError("avg_dist: mask length does not match the patch grid");
  if (predicted.size() != original.pixels.size()) throw DimensionError("avg_dist: prediction size mismatch");
  const auto masked = mask.masked_count();
  if (masked == 0 || masked == grid.count()) {
    throw ContractError("avg_dist needs at least one masked and one visible patch");
  }
  std::vector<std::size_t> visible;
  for (std::size_t p = 0; p < grid.count(); ++p)
    if (!mask.masked(p)) visible.push_back(p);

  std::vector<AvgDistEntry> out;
  out.reserve(masked * patch * patch);
  const auto H = original.height, W = original.width, C = original.channels;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (!mask.masked((y / patch) * grid.cols + x / patch)) continue;
      // The closest point of an axis-aligned patch is the clamped coordinate;
      // compare candidates by (distance^2, row, column).
      std::size_t by = 0, bx = 0;
      long best = std::numeric_limits<long>::max();
      for (auto p : visible) {
        const std::size_t y0 = (p / grid.cols) * patch, x0 = (p % grid.cols) * patch;
        const std::size_t cy = std::clamp(y, y0, y0 + patch - 1);
        const std::size_t cx = std::clamp(x, x0, x0 + patch - 1);
        const long dy = static_cast<long>(cy) - static_cast<long>(y);
        const long dx = static_cast<long>(cx) - static_cast<long>(x);
        const long d2 = dy * dy + dx * dx;
        if (d2 < best || (d2 == best && (cy < by || (cy == by && cx < bx)))) {
          best = d2;
          by = cy;
          bx = cx;
        }
      }
      double diff = 0;
      for (std::size_t c = 0; c < C; ++c) {
        diff += std::abs(predicted[(c * H + y) * W + x] - static_cast<double>(original.at(c, by, bx)));
      }
      out.push_back({y, x, by, bx, diff / static_cast<double>(C)});
    }
  }
  return out;
}

/// Mean |predicted - nearest visible original pixel| over masked pixels.
inline double avg_dist(std::span<const double> predicted, const Image& original, const PatchMask& mask,
                       std::size_t patch) {
  const auto table = avg_dist_table(predicted, original, mask, patch);
  double acc = 0;
  for (const auto& e : table) acc += e.difference;
  return acc / static_cast<double>(table.size());
}

}  // namespace vfetps
