// vfetps: dataset generation, training, evaluation, ablations, gradient checks
// and feature export for the desk-scale text-based person search model.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vfetps/vfetps.hpp"

namespace fs = std::filesystem;
using namespace vfetps;

namespace {

// Exit codes: 0 ok, 1 check failed / training aborted, 2 bad configuration,
// 3 I/O, 4 version mismatch, 5 anything else.
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitVersion = 4;
constexpr int kExitOther = 5;

/// Command-line view of TrainConfig: a --config file plus one flag per field.
struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "key=value config file (flags override it)");
    for (const auto& [key, value] : TrainConfig::desk().to_map()) {
      std::string names = "--" + key;
      if (key.find('_') != std::string::npos) {
        auto dashed = key;
        for (auto& ch : dashed) ch = ch == '_' ? '-' : ch;
        names += ",--" + dashed;
      }
      options[key] = app->add_option(names, values[key], "config field (default " + (value.empty() ? "unset" : value) + ")");
    }
  }

  bool given(const std::string& key) const { return options.at(key)->count() > 0; }

  /// desk defaults < config file < VFE_SEED < explicit flags.
  TrainConfig resolve() const {
    auto cfg = file.empty() ? TrainConfig::desk() : TrainConfig::load(file);
    cfg.apply_environment();
    for (const auto& [key, opt] : options)
      if (opt->count() > 0) cfg.set(key, values.at(key));
    return cfg;
  }
};

std::string format_report(const MetricsReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << "Rank-1 " << r.rank1 << "  Rank-5 " << r.rank5 << "  Rank-10 " << r.rank10
     << "  mAP " << r.map << "  chance " << r.chance_rank1 << std::setprecision(4) << "  silhouette " << r.silhouette;
  if (!std::isnan(r.avg_dist)) os << "  avgDist " << r.avg_dist;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write on " + path.string());
}

// ---- gen-data -------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  synth::DatasetConfig cfg;
  bool no_jitter = false;
};

int run_gen_data(const GenDataArgs& a) {
  auto cfg = a.cfg;
  if (a.no_jitter) cfg.jitter = synth::JitterOptions::off();
  cfg.split.test = 1.0 - cfg.split.train - cfg.split.val;
  const auto manifest = synth::write_dataset(a.out, cfg);
  std::cout << "wrote " << manifest.at("splits").dump() << " to " << a.out << "\n";
  return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  ConfigFlags flags;
  std::string resume;
};

template <class T>
int train_with(TrainingState<T> st, const synth::Dataset& ds) {
  const auto train = prepare_split(ds, "train", st.config.encoder.text_len);
  if (!st.config.out.empty()) {
    fs::create_directories(st.config.out);
    write_text(fs::path(st.config.out) / "config.txt", st.config.to_text());
  }
  run_training(st, train);
  const auto& last = st.log.back().mean;
  std::cout << "trained " << st.epoch << " epochs, final total loss " << last.total << "\n";
  return 0;
}

int run_train(const TrainArgs& a) {
  if (!a.resume.empty()) {
    const int precision = checkpoint_precision(a.resume);
    auto resume = [&]<class T>(TrainingState<T> st) {
      for (const auto& [key, opt] : a.flags.options) {
        if (opt->count() == 0) continue;
        if (key != "epochs" && key != "out" && key != "dataset") {
          throw ConfigError("--" + key + " cannot change when resuming; only epochs, out and dataset may");
        }
        st.config.set(key, a.flags.values.at(key));
      }
      st.config.validate();
      if (st.epoch >= st.config.epochs) log_warning("checkpoint already reached the requested epoch count");
      if (st.config.dataset.empty()) throw ConfigError("no dataset: pass --dataset");
      const auto ds = synth::load_dataset(st.config.dataset);
      return train_with(std::move(st), ds);
    };
    return precision == 64 ? resume(load_training_state<double>(a.resume))
                           : resume(load_training_state<float>(a.resume));
  }
  auto cfg = a.flags.resolve();
  if (cfg.dataset.empty()) throw ConfigError("no dataset: pass --dataset or set dataset= in the config file");
  const auto ds = synth::load_dataset(cfg.dataset);
  const auto train = prepare_split(ds, "train", cfg.encoder.text_len);
  cfg = bind_config(cfg, ds, train);
  if (cfg.precision == 64) return train_with(TrainingState<double>(cfg), ds);
  return train_with(TrainingState<float>(cfg), ds);
}

// ---- evaluate -------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, dataset, split = "test", json;
  bool avg_dist = false;
};

template <class T>
MetricsReport evaluate_checkpoint(const EvalArgs& a) {
  const auto ck = read_checkpoint<T>(a.checkpoint);
  VfeModel<T> model(ck.config);
  restore_parameters(ck, model);
  const auto dataset = a.dataset.empty() ? ck.config.dataset : a.dataset;
  if (dataset.empty()) throw ConfigError("no dataset: pass --dataset");
  const auto ds = synth::load_dataset(dataset);
  if (ds.vocab.size() != ck.config.encoder.vocab_size) {
    throw VersionError("dataset vocabulary has " + std::to_string(ds.vocab.size()) + " tokens, checkpoint expects " +
                       std::to_string(ck.config.encoder.vocab_size));
  }
  const auto split = prepare_split(ds, a.split, ck.config.encoder.text_len);
  auto report = evaluate(model, split);
  report.avg_dist = std::numeric_limits<double>::quiet_NaN();
  if (a.avg_dist) report.avg_dist = reconstruction_avg_dist(model, split, ck.config.mask_ratio, ck.config.seed);
  std::istringstream lines(ck.log);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const auto rec = EpochRecord::from_json(nlohmann::json::parse(line));
    report.loss_curve.push_back({rec.epoch, rec.mean.total, rec.mean.tgmim, rec.mean.isgvfc, rec.mean.cmpm});
  }
  return report;
}

int run_evaluate(const EvalArgs& a) {
  const auto report = checkpoint_precision(a.checkpoint) == 64 ? evaluate_checkpoint<double>(a)
                                                               : evaluate_checkpoint<float>(a);
  std::cout << a.split << ": " << format_report(report) << "\n";
  if (!a.json.empty()) write_text(a.json, report.to_json().dump(2) + "\n");
  return 0;
}

// ---- ablate ---------------------------------------------------------------

struct AblateArgs {
  ConfigFlags flags;
  std::string preset;
  std::vector<std::string> variants;  // name:key=value,key=value
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string split = "test";
  std::string out;
};

Variant parse_variant(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos || colon == 0) throw ConfigError("variant '" + text + "' must look like name:key=value,...");
  Variant v{text.substr(0, colon), {}};
  std::stringstream rest(text.substr(colon + 1));
  std::string item;
  while (std::getline(rest, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("variant override '" + item + "' has no '='");
    v.overrides.emplace_back(item.substr(0, eq), item.substr(eq + 1));
  }
  return v;
}

int run_ablate(const AblateArgs& a) {
  auto cfg = a.flags.resolve();
  if (cfg.dataset.empty()) throw ConfigError("no dataset: pass --dataset or set dataset= in the config file");
  std::vector<Variant> variants;
  if (!a.preset.empty()) variants = ablation_preset(a.preset);
  for (const auto& v : a.variants) variants.push_back(parse_variant(v));
  const auto ds = synth::load_dataset(cfg.dataset);
  const auto train = prepare_split(ds, "train", cfg.encoder.text_len);
  cfg = bind_config(cfg, ds, train);
  AblationOptions opts;
  opts.seeds = a.seeds;
  opts.eval_split = a.split;
  opts.progress = [](const std::string& what) { log_info("training " + what); };
  const auto table = cfg.precision == 64 ? run_ablation<double>(cfg, variants, ds, opts)
                                         : run_ablation<float>(cfg, variants, ds, opts);
  const auto md = table.to_markdown();
  std::cout << md;
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "ablation.md", md);
    write_text(fs::path(a.out) / "ablation.csv", table.to_csv());
  }
  for (const auto& row : table.rows)
    if (row.failed) return kExitCheckFailed;
  return 0;
}

// ---- gradcheck ------------------------------------------------------------

struct GradcheckArgs {
  ConfigFlags flags;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  double tolerance = 1e-4;
  double step = 1e-5;
  double corrupt = 0.0;
};

int run_gradcheck(const GradcheckArgs& a) {
  const auto cfg = a.flags.resolve();
  GradCheckOptions opts;
  opts.step = a.step;
  opts.corrupt_analytic = a.corrupt;
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  for (auto seed : a.seeds) {
    for (const auto& r : gradcheck_losses(cfg, seed, opts)) {
      if (!worst.count(r.loss)) order.push_back(r.loss);
      worst[r.loss] = std::max(worst[r.loss], r.result.max_rel_error);
      std::cout << "seed " << seed << "  " << std::left << std::setw(7) << r.loss << " max rel error "
                << std::scientific << std::setprecision(3) << r.result.max_rel_error << " over "
                << r.result.coordinates << " coordinates\n"
                << std::defaultfloat;
    }
  }
  bool ok = true;
  for (const auto& loss : order) {
    const bool pass = worst[loss] <= a.tolerance;
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << loss << " " << std::scientific << std::setprecision(3) << worst[loss]
              << " (tolerance " << a.tolerance << ")\n"
              << std::defaultfloat;
  }
  return ok ? 0 : kExitCheckFailed;
}

// ---- dump-features --------------------------------------------------------

struct DumpArgs {
  std::string checkpoint, dataset, split = "test", out;
};

template <class T>
void dump_features(const DumpArgs& a) {
  const auto ck = read_checkpoint<T>(a.checkpoint);
  VfeModel<T> model(ck.config);
  restore_parameters(ck, model);
  const auto dataset = a.dataset.empty() ? ck.config.dataset : a.dataset;
  if (dataset.empty()) throw ConfigError("no dataset: pass --dataset");
  const auto ds = synth::load_dataset(dataset);
  const auto split = prepare_split(ds, a.split, ck.config.encoder.text_len);
  const auto img = model.embed_images(split.images);
  const auto txt = model.embed_texts(split.captions);
  FeatureDump dump;
  dump.dim = img.dim(1);
  dump.count = img.dim(0) + txt.dim(0);
  for (auto v : img.data()) dump.values.push_back(static_cast<float>(v));
  for (auto v : txt.data()) dump.values.push_back(static_cast<float>(v));
  for (std::size_t i = 0; i < split.images.size(); ++i) dump.records.push_back({i, split.image_pids[i], "image"});
  for (std::size_t i = 0; i < split.captions.size(); ++i)
    dump.records.push_back({split.images.size() + i, split.caption_pids[i], "text"});
  write_feature_dump(a.out, dump);
  std::cout << "wrote " << dump.count << " x " << dump.dim << " features to " << a.out << " and "
            << feature_sidecar_path(a.out).string() << "\n";
}

int run_dump(const DumpArgs& a) {
  if (checkpoint_precision(a.checkpoint) == 64) dump_features<double>(a);
  else dump_features<float>(a);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"vfetps: text-based person search with visual feature enhancement, desk scale"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "only print warnings and results");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "render a synthetic identity dataset");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--identities", gen.cfg.identities, "number of identities")->capture_default_str();
  gen_cmd->add_option("--views", gen.cfg.views_per_id, "images per identity")->capture_default_str();
  gen_cmd->add_option("--captions", gen.cfg.captions_per_view, "captions per image")->capture_default_str();
  gen_cmd->add_option("--train-ratio", gen.cfg.split.train, "fraction of identities in train")->capture_default_str();
  gen_cmd->add_option("--val-ratio", gen.cfg.split.val, "fraction of identities in val")->capture_default_str();
  gen_cmd->add_option("--seed", gen.cfg.seed, "generator seed")->capture_default_str();
  gen_cmd->add_flag("--no-jitter", gen.no_jitter, "render every view of an identity identically");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a model; writes loss_log.jsonl and final.vftc under --out");
  train.flags.attach(train_cmd);
  train_cmd->add_option("--resume", train.resume, "continue from a checkpoint");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "text-to-image retrieval metrics of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--dataset", eval.dataset, "dataset directory (default: the one used in training)");
  eval_cmd->add_option("--split", eval.split, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--json", eval.json, "also write the MetricsReport as JSON");
  eval_cmd->add_flag("--avg-dist", eval.avg_dist, "also measure reconstruction avgDist (TG-MIM models)");

  AblateArgs ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "train variants over shared seeds and tabulate their metrics");
  ablate.flags.attach(ablate_cmd);
  ablate_cmd->add_option("--preset", ablate.preset, "table5, mask-sweep, mim-variants or calibration")
      ->check(CLI::IsMember(ablation_preset_names()));
  ablate_cmd->add_option("--variant", ablate.variants, "extra variant name:key=value,key=value (repeatable)");
  ablate_cmd->add_option("--seeds", ablate.seeds, "training seeds")->delimiter(',')->capture_default_str();
  ablate_cmd->add_option("--split", ablate.split, "evaluation split")->capture_default_str();
  ablate_cmd->add_option("--table-dir", ablate.out, "write ablation.md and ablation.csv here");

  GradcheckArgs grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "central-difference check of the enabled losses at 64-bit");
  grad.flags.attach(grad_cmd);
  grad_cmd->add_option("--seeds", grad.seeds, "check seeds")->delimiter(',')->capture_default_str();
  grad_cmd->add_option("--tolerance", grad.tolerance, "maximum relative error")->capture_default_str();
  grad_cmd->add_option("--step", grad.step, "finite difference step")->capture_default_str();
  grad_cmd->add_option("--corrupt-gradient", grad.corrupt, "add this to every analytic gradient (self-test)")
      ->group("");

  DumpArgs dump;
  auto* dump_cmd = app.add_subcommand("dump-features", "export global image and text features of a split");
  dump_cmd->add_option("--checkpoint", dump.checkpoint, "checkpoint file")->required();
  dump_cmd->add_option("--dataset", dump.dataset, "dataset directory (default: the one used in training)");
  dump_cmd->add_option("--split", dump.split, "train, val or test")->capture_default_str();
  dump_cmd->add_option("--out", dump.out, "output .vfet file; the sidecar gets a .jsonl extension")->required();

  CLI11_PARSE(app, argc, argv);
  if (quiet) log_threshold() = LogLevel::warning;

  try {
    if (gen_cmd->parsed()) return run_gen_data(gen);
    if (train_cmd->parsed()) return run_train(train);
    if (eval_cmd->parsed()) return run_evaluate(eval);
    if (ablate_cmd->parsed()) return run_ablate(ablate);
    if (grad_cmd->parsed()) return run_gradcheck(grad);
    if (dump_cmd->parsed()) return run_dump(dump);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const VersionError& e) {
    std::cerr << "version error: " << e.what() << "\n";
    return kExitVersion;
  } catch (const TrainingAbortError& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}
