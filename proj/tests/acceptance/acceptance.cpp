// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero if any gated criterion fails. Criteria 4-7 share one set of
// desk-scale training runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "support/oracles.hpp"
#include "vfetps/vfetps.hpp"

namespace fs = std::filesystem;
using namespace vfetps;
using T64 = Tensor<double>;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

T64 normal_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, 1.0);
  return T64(std::move(shape), std::move(v));
}

std::vector<std::int64_t> random_pids(std::size_t n, Rng& rng) {
  std::vector<std::int64_t> p(n);
  const auto k = 1 + rng.below(std::max<std::size_t>(1, n / 2));
  for (auto& x : p) x = static_cast<std::int64_t>(rng.below(k));
  return p;
}

// ---- 1 ----------------------------------------------------------------------

Verdict gradient_fidelity() {
  const auto t0 = Clock::now();
  std::map<std::string, double> worst;
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    for (const auto& r : gradcheck_losses(TrainConfig::desk(), seed))
      worst[r.loss] = std::max(worst[r.loss], r.result.max_rel_error);
  const double secs = seconds_since(t0);
  Verdict v;
  for (const char* loss : {"cmpm", "isgvfc", "tgmim"}) {
    const bool present = worst.count(loss) != 0;
    v.pass = v.pass && present && worst[loss] <= 1e-4;
    v.detail += std::string(loss) + " " + (present ? fmt(worst[loss], 3) : "missing") + ", ";
  }
  v.pass = v.pass && secs < 60;
  v.detail += "max rel error over 5 seeds; " + fmt(secs, 3) + " s (limit 60)";
  return v;
}

// ---- 2 ----------------------------------------------------------------------

Verdict oracle_equivalence() {
  const auto t0 = Clock::now();
  Rng rng(20240501);
  std::map<std::string, double> err;
  std::map<std::string, std::size_t> mismatches;
  const auto track = [&](const std::string& what, double got, double want) {
    err[what] = std::max(err[what], std::abs(got - want));
  };
  for (int t = 0; t < 100; ++t) {
    // CMPM
    {
      const std::size_t B = 2 + rng.below(5), d = 2 + rng.below(7);
      const double tau = 0.05 + rng.uniform();
      const auto img = normal_tensor({B, d}, rng), txt = normal_tensor({B, d}, rng);
      const auto y = identity_labels(random_pids(B, rng));
      const auto l = cmpm_loss(AlignmentBatch<double>{img, txt, y}, tau);
      track("cmpm", l.total.item(), oracle::cmpm_total(img.values(), txt.values(), y, B, d, tau, 1e-8));
    }
    // IS-GVFC match probabilities and loss
    {
      const std::size_t C = 2 + rng.below(7), d = 2 + rng.below(7);
      const double tau = 0.05 + rng.uniform();
      const auto f = normal_tensor({C, d}, rng);
      const auto pids = random_pids(C, rng);
      const auto p = match_prob(f, tau).values();
      const auto want = oracle::match_prob(f.values(), f.values(), C, d, tau);
      for (std::size_t i = 0; i < p.size(); ++i) track("match_prob", p[i], want[i]);
      track("isgvfc", isgvfc_loss(match_distribution(f, identity_labels(pids), tau)).item(),
            oracle::isgvfc(f.values(), pids, d, tau, 1e-8));
    }
    // Rank-k and mAP on a coarse score grid so ties occur.
    {
      const std::size_t G = 2 + rng.below(9), Q = 1 + rng.below(6);
      std::vector<std::int64_t> gallery(G), queries(Q);
      for (auto& p : gallery) p = static_cast<std::int64_t>(rng.below(4));
      for (auto& p : queries) p = gallery[rng.below(G)];
      ScoreMatrix sim{Q, G, {}};
      std::vector<std::vector<double>> rows;
      const bool coarse = rng.below(2) == 0;
      for (std::size_t q = 0; q < Q; ++q) {
        std::vector<double> row(G);
        for (auto& s : row) s = coarse ? static_cast<double>(rng.below(4)) / 4.0 : rng.uniform(-1, 1);
        sim.values.insert(sim.values.end(), row.begin(), row.end());
        rows.push_back(std::move(row));
      }
      const auto gt = RetrievalGroundTruth::from_identities(queries, gallery);
      for (std::size_t k = 1; k <= G; ++k) mismatches["rank_k"] += rank_k(sim, gt, k) != oracle::rank_k(rows, gt.relevant, k);
      mismatches["map"] += mean_average_precision(sim, gt) != oracle::mean_average_precision(rows, gt.relevant);
    }
    // Silhouette
    {
      const std::size_t n = 4 + rng.below(17), d = 1 + rng.below(5);
      std::vector<double> f(n * d);
      for (auto& x : f) x = rng.normal(0.0, 1.0);
      std::vector<std::int64_t> l(n);
      for (auto& x : l) x = static_cast<std::int64_t>(rng.below(4));
      if (std::all_of(l.begin(), l.end(), [&](auto x) { return x == l[0]; })) l[0] += 1;
      track("silhouette", silhouette(f, d, l), oracle::silhouette(f, d, l));
    }
    // avgDist
    {
      Image im(3, 16, 16);
      for (auto& p : im.pixels) p = static_cast<float>(rng.uniform());
      PatchMask mask;
      do {
        mask = sample_mask(16, 0.1 + 0.8 * rng.uniform(), rng);
      } while (mask.masked_count() == 0 || mask.masked_count() == 16);
      std::vector<double> pred(im.pixels.size());
      for (auto& p : pred) p = rng.uniform();
      track("avg_dist", avg_dist(pred, im, mask, 4), oracle::avg_dist(pred, im, mask, 4));
    }
  }
  const double secs = seconds_since(t0);
  Verdict v;
  for (const auto& [what, e] : err) {
    v.pass = v.pass && e <= 1e-9;
    v.detail += what + " " + fmt(e, 2) + ", ";
  }
  for (const auto& [what, m] : mismatches) {
    v.pass = v.pass && m == 0;
    v.detail += what + " " + std::to_string(m) + " mismatches, ";
  }
  v.pass = v.pass && secs < 30;
  v.detail += "100 instances each; " + fmt(secs, 3) + " s (limit 30)";
  return v;
}

// ---- 3 ----------------------------------------------------------------------

Verdict structural_invariants(const synth::Dataset& ds) {
  const auto t0 = Clock::now();
  Rng rng(7);
  double softmax_err = 0, mca_err = 0, additivity_err = 0;
  bool shuffle_ok = true, cardinality_ok = true;
  for (int t = 0; t < 20; ++t) {
    const std::size_t C = 2 + rng.below(10);
    const auto p = match_prob(normal_tensor({C, 8}, rng), 0.02 + rng.uniform());
    for (std::size_t i = 0; i < C; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < C; ++j) s += p.at(i, j);
      softmax_err = std::max(softmax_err, std::abs(s - 1.0));
    }
  }
  for (int t = 0; t < 10; ++t) {
    const std::size_t B = 1 + rng.below(3), gh = 1 + rng.below(4), gw = 1 + rng.below(4), P = 1 + rng.below(4);
    const auto cells = normal_tensor({B * gh * gw, 3 * P * P}, rng);
    const auto img = pixel_shuffle(cells, B, gh, gw, 3, P);
    shuffle_ok = shuffle_ok && pixel_unshuffle(img, P).values() == cells.values();
    shuffle_ok = shuffle_ok && pixel_shuffle(pixel_unshuffle(img, P), B, gh, gw, 3, P).values() == img.values();
  }
  for (std::size_t N : {7u, 32u, 192u})
    for (double r = 0.0; r <= 1.0 + 1e-12; r += 0.05)
      cardinality_ok = cardinality_ok && sample_mask(N, std::min(r, 1.0), rng).masked_count() ==
                                             static_cast<std::size_t>(std::llround(std::min(r, 1.0) * N));
  {
    TgMimConfig hc;
    hc.d = 16;
    hc.heads = 4;
    hc.patch = 8;
    hc.grid_h = 8;
    hc.grid_w = 4;
    nn::ParameterStore<double> store;
    TgMimHead<double> head(store, hc, rng);
    for (int t = 0; t < 5; ++t) {
      const std::size_t N = 32, M = 3 + rng.below(10);
      const auto zv = normal_tensor({N, 16}, rng), zt = normal_tensor({M, 16}, rng);
      std::vector<std::size_t> perm(M);
      for (std::size_t i = 0; i < M; ++i) perm[i] = i;
      rng.shuffle(perm.begin(), perm.end());
      const auto a = head.mca(zv, zt, 1, N, M), b = head.mca(zv, gather_rows(zt, perm), 1, N, M);
      for (std::size_t i = 0; i < a.numel(); ++i) mca_err = std::max(mca_err, std::abs(a[i] - b[i]));
    }
  }
  {
    auto cfg = TrainConfig::desk();
    cfg.precision = 64;
    cfg.w_tgmim = 0.6;
    cfg.w_isgvfc = 1.7;
    const auto train = prepare_split(ds, "train", cfg.encoder.text_len);
    cfg = bind_config(cfg, ds, train);
    TrainingState<double> st(cfg);
    for (const auto& s : train_epoch(st, train).steps)
      additivity_err = std::max(additivity_err, std::abs(s.total - (0.6 * s.tgmim + 1.7 * s.isgvfc + s.cmpm)));
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = softmax_err <= 1e-9 && shuffle_ok && cardinality_ok && mca_err <= 1e-6 && additivity_err <= 1e-9 &&
           secs < 10;
  v.detail = "softmax row error " + fmt(softmax_err, 2) + ", pixel-shuffle round trip " +
             (shuffle_ok ? "exact" : "BROKEN") + ", mask cardinality " + (cardinality_ok ? "exact" : "WRONG") +
             ", MCA permutation error " + fmt(mca_err, 2) + ", additivity error " + fmt(additivity_err, 2) + "; " +
             fmt(secs, 3) + " s (limit 10)";
  return v;
}

// ---- shared training runs ---------------------------------------------------

const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

struct RunSet {
  AblationTable table;
  double seconds = 0;
  std::map<std::string, double> seconds_per_row;
};

std::vector<Variant> shared_variants() {
  auto v = ablation_preset("table5");
  v.push_back({"id_loss", {{"isgvfc_mode", "id_loss"}}});
  v.push_back({"triplet", {{"isgvfc_mode", "triplet"}}});
  for (const char* r : {"0.3", "0.7", "0.9"}) v.push_back({std::string("mask=") + r, {{"mask_ratio", r}}});
  return v;
}

RunSet train_shared(const synth::Dataset& ds) {
  RunSet rs;
  const auto t0 = Clock::now();
  auto cfg = TrainConfig::desk();
  const auto train = prepare_split(ds, "train", cfg.encoder.text_len);
  cfg = bind_config(cfg, ds, train);
  AblationOptions opts;
  opts.seeds = kSeeds;
  auto last = Clock::now();
  std::string current;
  opts.progress = [&](const std::string& what) {
    if (!current.empty()) rs.seconds_per_row[current] += seconds_since(last);
    current = what.substr(0, what.find(" seed "));
    last = Clock::now();
    std::cerr << "  training " << what << "\n";
  };
  rs.table = run_ablation<float>(cfg, shared_variants(), ds, opts);
  if (!current.empty()) rs.seconds_per_row[current] += seconds_since(last);
  rs.seconds = seconds_since(t0);
  return rs;
}

const AblationRow& row(const RunSet& rs, const std::string& name) {
  const auto* r = rs.table.find(name);
  if (!r) throw std::runtime_error("missing ablation row " + name);
  if (r->failed) throw std::runtime_error("ablation row " + name + " failed: " + r->error);
  return *r;
}

// ---- 4 ----------------------------------------------------------------------

Verdict learnability(const RunSet& rs) {
  const auto& full = row(rs, "full");
  Verdict v;
  for (std::size_t i = 0; i < full.runs.size(); ++i) {
    const auto& r = full.runs[i];
    const double first = r.loss_curve.front().total, last = r.loss_curve.back().total;
    const bool loss_ok = last <= 0.5 * first, rank_ok = r.rank1 >= 5.0 * r.chance_rank1;
    v.pass = v.pass && loss_ok && rank_ok && r.loss_curve.size() == 200;
    v.detail += "seed " + std::to_string(full.seeds[i]) + ": loss " + fmt(first) + " -> " + fmt(last) + ", Rank-1 " +
                fmt(r.rank1) + " vs 5x chance " + fmt(5.0 * r.chance_rank1) + "; ";
  }
  v.pass = v.pass && full.runs.size() == kSeeds.size();
  v.detail += "3 seeds " + fmt(rs.seconds_per_row.count("full") ? rs.seconds_per_row.at("full") : 0.0, 4) + " s";
  return v;
}

// ---- 5 ----------------------------------------------------------------------

Verdict table5_direction(const RunSet& rs) {
  const double full = row(rs, "full").mean.map, tg = row(rs, "tgmim-only").mean.map,
               is = row(rs, "isgvfc-only").mean.map, base = row(rs, "baseline").mean.map;
  Verdict v;
  v.pass = full >= tg && full >= is && tg >= base && is >= base && full - base >= 1.0;
  v.detail = "mean mAP full " + fmt(full) + ", tgmim-only " + fmt(tg) + ", isgvfc-only " + fmt(is) + ", baseline " +
             fmt(base) + ", full - baseline " + fmt(full - base);
  return v;
}

// ---- 6 ----------------------------------------------------------------------

Verdict silhouette_direction(const RunSet& rs, std::string& report_only) {
  const double kl = row(rs, "full").mean.silhouette, none = row(rs, "tgmim-only").mean.silhouette,
               id = row(rs, "id_loss").mean.silhouette, tri = row(rs, "triplet").mean.silhouette;
  Verdict v;
  v.pass = kl > none;
  const bool second = kl >= std::max(id, tri);
  v.detail = "mean silhouette kl " + fmt(kl) + " vs no calibration " + fmt(none) + "; id_loss " + fmt(id) +
             ", triplet " + fmt(tri) + " (kl >= both: " + (second ? "yes" : "no, reported only") + ")";
  report_only = std::string("calibration comparison (not gated): kl ") + fmt(kl) + ", id_loss " + fmt(id) +
                ", triplet " + fmt(tri) + ", none " + fmt(none) + " -> kl >= max(id_loss, triplet): " +
                (second ? "holds" : "does not hold");
  return v;
}

// ---- 7 ----------------------------------------------------------------------

Verdict avg_dist_direction(const RunSet& rs) {
  const std::vector<std::pair<double, std::string>> points = {
      {0.3, "mask=0.3"}, {0.5, "full"}, {0.7, "mask=0.7"}, {0.9, "mask=0.9"}};
  std::vector<double> means;
  Verdict v;
  v.detail = "mean avgDist";
  for (const auto& [ratio, name] : points) {
    means.push_back(row(rs, name).mean.avg_dist);
    v.detail += " " + fmt(ratio, 2) + ":" + fmt(means.back());
  }
  std::size_t inversions = 0;
  bool small = true;
  for (std::size_t i = 0; i + 1 < means.size(); ++i) {
    if (means[i + 1] >= means[i]) continue;
    ++inversions;
    small = small && (means[i] - means[i + 1]) <= 0.05 * means[i];
  }
  v.pass = std::all_of(means.begin(), means.end(), [](double m) { return std::isfinite(m); }) && inversions <= 1 && small;
  v.detail += "; adjacent inversions " + std::to_string(inversions);
  return v;
}

// ---- 8 ----------------------------------------------------------------------

Verdict reproducibility(const synth::Dataset& ds) {
  auto cfg = TrainConfig::desk();
  cfg.precision = 64;
  cfg.epochs = 3;
  cfg.seed = 11;
  const auto a = run_experiment<double>(cfg, ds, "test", TrainHooks{nullptr, true});
  const auto b = run_experiment<double>(cfg, ds, "test", TrainHooks{nullptr, true});
  std::string la, lb;
  for (const auto& r : a.log) la += r.to_json().dump() + "\n";
  for (const auto& r : b.log) lb += r.to_json().dump() + "\n";
  Verdict v;
  v.pass = la == lb && a.report == b.report && a.log.size() == 3;
  v.detail = std::string("64-bit loss logs ") + (la == lb ? "bit-identical" : "DIFFER") + " over " +
             std::to_string(a.log.size()) + " epochs (" + std::to_string(a.log.size() * a.log[0].steps.size()) +
             " steps), MetricsReports " + (a.report == b.report ? "identical" : "DIFFER");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"acceptance suite"};
  std::string out = (fs::temp_directory_path() / "vfetps_acceptance").string();
  std::vector<int> only;
  app.add_option("--out", out, "working directory for the dataset and ablation tables")->capture_default_str();
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const auto want = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };
  log_threshold() = LogLevel::warning;

  fs::create_directories(out);
  const auto ds_dir = fs::path(out) / "desk_dataset";
  synth::DatasetConfig dcfg;  // 32 identities x 4 views x 2 captions, seed 0
  synth::write_dataset(ds_dir, dcfg);
  const auto ds = synth::load_dataset(ds_dir);

  std::map<int, Verdict> verdicts;
  const auto guarded = [&](int c, const std::function<Verdict()>& fn) {
    if (!want(c)) return;
    try {
      verdicts[c] = fn();
    } catch (const std::exception& e) {
      verdicts[c] = {false, std::string("error: ") + e.what()};
    }
    const auto& v = verdicts[c];
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << c << ": " << v.detail << std::endl;
  };

  guarded(1, gradient_fidelity);
  guarded(2, oracle_equivalence);
  guarded(3, [&] { return structural_invariants(ds); });

  std::string calibration_note;
  if (want(4) || want(5) || want(6) || want(7)) {
    RunSet rs;
    try {
      rs = train_shared(ds);
    } catch (const std::exception& e) {
      std::cerr << "shared training failed: " << e.what() << "\n";
    }
    const auto md = rs.table.to_markdown();
    std::ofstream(fs::path(out) / "ablation.md") << md;
    std::ofstream(fs::path(out) / "ablation.csv") << rs.table.to_csv();
    std::cout << "shared runs: " << rs.table.rows.size() << " variants x " << kSeeds.size() << " seeds in "
              << fmt(rs.seconds / 60.0, 3) << " min\n"
              << md;
    guarded(4, [&] { return learnability(rs); });
    guarded(5, [&] { return table5_direction(rs); });
    guarded(6, [&] { return silhouette_direction(rs, calibration_note); });
    if (!calibration_note.empty()) std::cout << calibration_note << "\n";
    guarded(7, [&] { return avg_dist_direction(rs); });
  }
  guarded(8, [&] { return reproducibility(ds); });

  const auto passed = std::count_if(verdicts.begin(), verdicts.end(), [](const auto& kv) { return kv.second.pass; });
  std::cout << passed << "/" << verdicts.size() << " criteria passed\n";
  return passed == static_cast<long>(verdicts.size()) ? 0 : 1;
}
