#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "vfetps/core/rng.hpp"
#include "vfetps/synthdata.hpp"
#include "vfetps/train/config.hpp"
#include "vfetps/train/experiments.hpp"
#include "vfetps/train/trainer.hpp"

using namespace vfetps;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  return fs::temp_directory_path() / ("vfetps_trainer_" + std::to_string(::getpid()) + "_" + name);
}

class TinyDataset : public ::testing::Environment {
 public:
  void SetUp() override {
    synth::DatasetConfig cfg;
    cfg.identities = 6;
    cfg.views_per_id = 2;
    cfg.captions_per_view = 2;
    cfg.seed = 5;
    fs::remove_all(scratch("ds"));
    synth::write_dataset(scratch("ds"), cfg);
  }
  void TearDown() override { fs::remove_all(scratch("ds")); }
};

[[maybe_unused]] auto* const tiny_env = ::testing::AddGlobalTestEnvironment(new TinyDataset);

const synth::Dataset& tiny_dataset() {
  static const synth::Dataset ds = synth::load_dataset(scratch("ds"));
  return ds;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.encoder.d = 16;
  c.encoder.d_out = 16;
  c.encoder.layers = 1;
  c.encoder.heads = 2;
  c.encoder.text_len = 16;
  c.batch = 8;
  c.pairs = 4;
  c.per_identity = 2;
  c.epochs = 2;
  c.precision = 64;
  c.seed = 3;
  return c;
}

struct Bound {
  TrainConfig config;
  SplitData train, test;
};

Bound bind_tiny(TrainConfig cfg = tiny_config()) {
  const auto& ds = tiny_dataset();
  Bound b{cfg, prepare_split(ds, "train", cfg.encoder.text_len), prepare_split(ds, "test", cfg.encoder.text_len)};
  b.config = bind_config(cfg, ds, b.train);
  return b;
}

std::vector<std::string> log_lines(const std::vector<EpochRecord>& log) {
  std::vector<std::string> out;
  for (const auto& r : log) out.push_back(r.to_json().dump());
  return out;
}

std::vector<double> parameter_values(const VfeModel<double>& m) {
  std::vector<double> out;
  for (const auto& [name, t] : m.parameters().entries()) {
    const auto v = t.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

}  // namespace

TEST(IdentityBatches, EveryPairUsedOnceAndDeterministic) {
  Rng pick(1);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + pick.below(60), batch = 2 + pick.below(10), per = 1 + pick.below(4);
    std::vector<std::int64_t> pids(n);
    for (auto& p : pids) p = static_cast<std::int64_t>(pick.below(1 + n / 3));
    Rng a(t), b(t);
    const auto batches = identity_batches(pids, batch, per, a);
    EXPECT_EQ(batches, identity_batches(pids, batch, per, b));
    std::vector<int> used(n, 0);
    for (std::size_t k = 0; k < batches.size(); ++k) {
      const auto& bt = batches[k];
      EXPECT_GE(bt.size(), 2u);
      EXPECT_LE(bt.size(), k + 1 == batches.size() ? batch + 1 : batch);
      for (auto i : bt) ++used[i];
    }
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(used[i], 1) << "pair " << i << " instance " << t;
  }
}

TEST(IdentityBatches, IdentitiesContributeConsecutivePairs) {
  const std::vector<std::int64_t> pids{0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2};
  Rng rng(4);
  const auto batches = identity_batches(pids, 4, 2, rng);
  for (const auto& b : batches) {
    ASSERT_EQ(b.size(), 4u);
    EXPECT_EQ(pids[b[0]], pids[b[1]]);
    EXPECT_EQ(pids[b[2]], pids[b[3]]);
  }
}

TEST(TrainConfig, TextRoundTrip) {
  auto c = TrainConfig::desk();
  c.set("lr", "0.00123");
  c.set("isgvfc_mode", "triplet");
  c.set("mim_variant", "text_free");
  c.set("tgmim", "off");
  c.set("dataset", "/data/x");
  c.set("seed", "99");
  EXPECT_EQ(TrainConfig::from_text(c.to_text()), c);
  EXPECT_EQ(TrainConfig::from_text(c.to_text()).lr, 0.00123);
}

TEST(TrainConfig, TextSkipsCommentsAndRejectsBadLines) {
  const auto c = TrainConfig::from_text("# comment\n\n  batch = 12 \r\npairs=6\n");
  EXPECT_EQ(c.batch, 12u);
  EXPECT_EQ(c.pairs, 6u);
  EXPECT_THROW(TrainConfig::from_text("batch 12\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("nope=1\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("batch=-3\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("lr=fast\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("tgmim=maybe\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("isgvfc_mode=svm\n"), ConfigError);
}

TEST(TrainConfig, ValidationRejectsInvalidFields) {
  const auto bad = [](const std::string& text) { return TrainConfig::from_text(text); };
  EXPECT_THROW(bad("cmpm=false").validate(), ConfigError);
  EXPECT_THROW(bad("batch=1\npairs=1").validate(), ConfigError);
  EXPECT_THROW(bad("epochs=0").validate(), ConfigError);
  EXPECT_THROW(bad("pairs=64").validate(), ConfigError);
  EXPECT_THROW(bad("mask_ratio=1.5").validate(), ConfigError);
  EXPECT_THROW(bad("tau=0").validate(), ConfigError);
  EXPECT_THROW(bad("precision=16").validate(), ConfigError);
  EXPECT_NO_THROW(TrainConfig::desk().validate());
}

TEST(TrainConfig, PaperScaleValuesAccepted) {
  const auto p = TrainConfig::paper();
  EXPECT_NO_THROW(p.validate());
  EXPECT_EQ(p.batch, 100u);
  EXPECT_EQ(p.lr, 1e-5);
  EXPECT_EQ(p.epochs, 60u);
  EXPECT_EQ(p.encoder.text_len, 77u);
  EXPECT_EQ(p.encoder.patches(), 192u);
}

TEST(TrainConfig, SeedEnvironmentOverridesFileValue) {
  auto c = TrainConfig::from_text("seed=5\n");
  ::setenv("VFE_SEED", "7", 1);
  c.apply_environment();
  ::unsetenv("VFE_SEED");
  EXPECT_EQ(c.seed, 7u);
  c.apply_environment();
  EXPECT_EQ(c.seed, 7u);
}

TEST(Training, OneEpochTinyRunLogsOneEntry) {
  auto b = bind_tiny();
  b.config.epochs = 1;
  b.config.out = scratch("one_epoch").string();
  TrainingState<double> st(b.config);
  run_training(st, b.train, TrainHooks{nullptr, true});
  EXPECT_EQ(st.log.size(), 1u);
  EXPECT_EQ(st.log[0].epoch, 1u);
  std::ifstream log(fs::path(b.config.out) / "loss_log.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("epoch").get<std::size_t>(), 1u);
    EXPECT_TRUE(std::isfinite(j.at("total").get<double>()));
    ++lines;
  }
  EXPECT_EQ(lines, 1u);
  EXPECT_TRUE(fs::exists(fs::path(b.config.out) / "final.vftc"));
  fs::remove_all(b.config.out);
}

TEST(Training, TotalIsSumOfWeightedTermsAtEveryStep) {
  for (auto mode : {"kl", "id_loss", "triplet"}) {
    auto cfg = tiny_config();
    cfg.set("isgvfc_mode", mode);
    cfg.w_tgmim = 0.7;
    cfg.w_isgvfc = 1.3;
    auto b = bind_tiny(cfg);
    TrainingState<double> st(b.config);
    const auto rec = train_epoch(st, b.train);
    ASSERT_FALSE(rec.steps.empty());
    for (const auto& s : rec.steps) {
      EXPECT_NEAR(s.total, 0.7 * s.tgmim + 1.3 * s.isgvfc + s.cmpm, 1e-9) << mode;
      EXPECT_NEAR(s.cmpm, s.i2t + s.t2i, 1e-9) << mode;
      EXPECT_GT(s.tgmim, 0.0);
    }
  }
}

TEST(Training, SameSeedGivesIdenticalLogAndReports) {
  auto b = bind_tiny();
  TrainingState<double> a(b.config), c(b.config);
  run_training(a, b.train, TrainHooks{nullptr, true});
  run_training(c, b.train, TrainHooks{nullptr, true});
  EXPECT_EQ(log_lines(a.log), log_lines(c.log));
  EXPECT_EQ(evaluate(a.model, b.test), evaluate(c.model, b.test));

  auto other = b.config;
  other.seed = 4;
  TrainingState<double> d(other);
  run_training(d, b.train, TrainHooks{nullptr, true});
  EXPECT_NE(log_lines(a.log), log_lines(d.log));
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  auto b = bind_tiny();
  b.config.epochs = 3;
  TrainingState<double> full(b.config);
  run_training(full, b.train, TrainHooks{nullptr, true});

  auto first = b.config;
  first.epochs = 2;
  TrainingState<double> part(first);
  run_training(part, b.train, TrainHooks{nullptr, true});
  const auto ck = scratch("resume.vftc");
  save_checkpoint(ck, part);
  auto resumed = load_training_state<double>(ck);
  fs::remove(ck);
  resumed.config.epochs = 3;
  run_training(resumed, b.train, TrainHooks{nullptr, true});

  EXPECT_EQ(resumed.epoch, 3u);
  EXPECT_EQ(log_lines(resumed.log), log_lines(full.log));
  EXPECT_EQ(parameter_values(resumed.model), parameter_values(full.model));
}

TEST(Training, NonFiniteLossAbortsWithPreFailureCheckpoint) {
  auto b = bind_tiny();
  b.config.out = scratch("abort").string();
  TrainingState<double> st(b.config);
  TrainHooks hooks{[&](const EpochRecord&) {
                     for (const auto& [name, t] : st.model.parameters().entries()) {
                       if (name.rfind("image.", 0) != 0) continue;
                       auto handle = t;
                       handle.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
                       break;
                     }
                   },
                   true};
  EXPECT_THROW(run_training(st, b.train, hooks), TrainingAbortError);
  EXPECT_EQ(st.epoch, 1u);
  const auto saved = fs::path(b.config.out) / "abort.vftc";
  ASSERT_TRUE(fs::exists(saved));
  const auto back = load_training_state<double>(saved);
  EXPECT_EQ(back.epoch, 1u);
  EXPECT_EQ(log_lines(back.log), log_lines(st.log));
  const auto got = parameter_values(back.model), expected = parameter_values(st.model);
  ASSERT_EQ(got.size(), expected.size());
  EXPECT_TRUE(std::isnan(got[0]));
  EXPECT_EQ(std::memcmp(got.data(), expected.data(), got.size() * sizeof(double)), 0);
  fs::remove_all(b.config.out);
}

TEST(Training, EmptyTrainingSplitIsConfigError) {
  auto b = bind_tiny();
  TrainingState<double> st(b.config);
  EXPECT_THROW(run_training(st, SplitData{}, TrainHooks{nullptr, true}), ConfigError);
}

TEST(Checkpoint, PrecisionMismatchIsVersionError) {
  auto b = bind_tiny();
  TrainingState<double> st(b.config);
  const auto ck = scratch("precision.vftc");
  save_checkpoint(ck, st);
  EXPECT_EQ(checkpoint_precision(ck), 64);
  EXPECT_THROW(read_checkpoint<float>(ck), VersionError);
  fs::remove(ck);
}

TEST(Evaluate, NeverReadsAuxiliaryHeads) {
  auto cfg = tiny_config();
  cfg.set("isgvfc_mode", "id_loss");
  auto b = bind_tiny(cfg);
  TrainingState<double> st(b.config);
  train_epoch(st, b.train);
  ASSERT_NE(st.model.tgmim(), nullptr);
  ASSERT_NE(st.model.id_classifier(), nullptr);
  st.model.reset_reads();
  const auto r1 = evaluate(st.model, b.test);
  EXPECT_EQ(st.model.reads("tgmim."), 0u);
  EXPECT_EQ(st.model.reads("isgvfc."), 0u);
  EXPECT_GT(st.model.reads("image."), 0u);
  EXPECT_GT(st.model.reads("text."), 0u);
  EXPECT_EQ(evaluate(st.model, b.test), r1);
}

TEST(Evaluate, ChanceMatchesSplitComposition) {
  auto b = bind_tiny();
  TrainingState<double> st(b.config);
  const auto r = evaluate(st.model, b.test);
  std::map<std::int64_t, std::size_t> per_pid;
  for (auto p : b.test.image_pids) ++per_pid[p];
  double chance = 0;
  for (auto p : b.test.caption_pids) chance += static_cast<double>(per_pid[p]) / b.test.images.size();
  EXPECT_NEAR(r.chance_rank1, 100.0 * chance / b.test.captions.size(), 1e-9);
  EXPECT_THROW(evaluate(st.model, SplitData{}), ContractError);
}

TEST(Ablation, TableShapes) {
  auto b = bind_tiny();
  b.config.epochs = 1;
  AblationOptions opts;
  opts.seeds = {1};
  const auto& ds = tiny_dataset();

  const auto table5 = run_ablation<double>(b.config, ablation_preset("table5"), ds, opts);
  ASSERT_EQ(table5.rows.size(), 4u);
  EXPECT_EQ(table5.rows[0].name, "full");

  const auto sweep = run_ablation<double>(b.config, ablation_preset("mask-sweep"), ds, opts);
  EXPECT_EQ(sweep.rows.size(), 9u);

  const auto base_only = run_ablation<double>(b.config, {}, ds, opts);
  ASSERT_EQ(base_only.rows.size(), 1u);
  EXPECT_EQ(base_only.rows[0].name, "base");
  EXPECT_FALSE(base_only.rows[0].failed);

  const auto md = table5.to_markdown();
  EXPECT_EQ(std::count(md.begin(), md.end(), '\n'), 2 + 4);
}

TEST(Ablation, FailingVariantIsMarkedAndRunContinues) {
  auto b = bind_tiny();
  b.config.epochs = 1;
  AblationOptions opts;
  opts.seeds = {1};
  const std::vector<Variant> variants{{"broken", {{"batch", "1"}}}, {"nomim", {{"tgmim", "false"}}}};
  const auto t = run_ablation<double>(b.config, variants, tiny_dataset(), opts);
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_FALSE(t.find("base")->failed);
  EXPECT_TRUE(t.find("broken")->failed);
  EXPECT_FALSE(t.find("nomim")->failed);
  EXPECT_NE(t.to_csv().find("broken,,,,,,,,,failed"), std::string::npos);
}

TEST(Gradcheck, RowPerEnabledLossWithinTolerance) {
  const auto full = gradcheck_losses(TrainConfig::desk(), 1);
  ASSERT_EQ(full.size(), 3u);
  for (const auto& r : full) EXPECT_LE(r.result.max_rel_error, 1e-4) << r.loss;

  auto cmpm_only = TrainConfig::desk();
  cmpm_only.tgmim = false;
  cmpm_only.isgvfc = false;
  EXPECT_EQ(gradcheck_losses(cmpm_only, 1).size(), 1u);
}

TEST(Gradcheck, CorruptedGradientIsDetected) {
  GradCheckOptions opts;
  opts.corrupt_analytic = 0.01;
  for (const auto& r : gradcheck_losses(TrainConfig::desk(), 1, opts)) EXPECT_GT(r.result.max_rel_error, 1e-4) << r.loss;
}
