#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vfetps/core/errors.hpp"
#include "vfetps/core/log.hpp"
#include "vfetps/core/rng.hpp"
#include "vfetps/metrics.hpp"
#include "vfetps/model/alignment.hpp"
#include "vfetps/model/isgvfc.hpp"
#include "vfetps/model/tgmim.hpp"
#include "vfetps/nn/adam.hpp"
#include "vfetps/synthdata.hpp"
#include "vfetps/train/config.hpp"
#include "vfetps/train/model.hpp"

namespace vfetps {

/// One split of a dataset, tokenized and indexed for training or evaluation.
struct SplitData {
  std::string name;
  std::vector<Image> images;
  std::vector<std::int64_t> image_pids;
  std::vector<TokenSequence> captions;
  std::vector<std::int64_t> caption_pids;
  std::vector<std::size_t> caption_image;  // caption -> index into images
  std::vector<std::size_t> caption_class;  // dense identity class of each caption, 0..classes-1
  std::size_t classes = 0;

  bool empty() const { return captions.empty(); }
};

inline SplitData prepare_split(const synth::Dataset& ds, const std::string& split, std::size_t text_len) {
  SplitData out;
  out.name = split;
  std::map<std::size_t, std::size_t> image_slot;
  for (auto i : ds.image_indices(split)) {
    image_slot[i] = out.images.size();
    out.images.push_back(ds.images[i].image);
    out.image_pids.push_back(ds.images[i].pid);
  }
  std::map<std::int64_t, std::size_t> classes;
  for (auto pid : out.image_pids) classes.emplace(pid, 0);
  std::size_t k = 0;
  for (auto& [pid, c] : classes) c = k++;
  out.classes = classes.size();
  for (auto c : ds.caption_indices(split)) {
    const auto& row = ds.captions[c];
    out.captions.push_back(tokenize(row.caption, ds.vocab, text_len));
    out.caption_pids.push_back(row.pid);
    out.caption_image.push_back(image_slot.at(ds.caption_image[c]));
    out.caption_class.push_back(classes.at(row.pid));
  }
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  LossBreakdown mean;
  std::vector<LossBreakdown> steps;

  nlohmann::json to_json() const {
    auto lb = [](const LossBreakdown& b) {
      return nlohmann::json{{"tgmim", b.tgmim}, {"isgvfc", b.isgvfc}, {"cmpm", b.cmpm},
                            {"i2t", b.i2t},     {"t2i", b.t2i},       {"total", b.total}};
    };
    auto j = lb(mean);
    j["epoch"] = epoch;
    j["steps"] = nlohmann::json::array();
    for (const auto& s : steps) j["steps"].push_back(lb(s));
    return j;
  }

  static EpochRecord from_json(const nlohmann::json& j) {
    auto lb = [](const nlohmann::json& o) {
      return LossBreakdown{o.at("tgmim"), o.at("isgvfc"), o.at("cmpm"), o.at("i2t"), o.at("t2i"), o.at("total")};
    };
    EpochRecord r;
    r.epoch = j.at("epoch");
    r.mean = lb(j);
    for (const auto& s : j.at("steps")) r.steps.push_back(lb(s));
    return r;
  }
};

/// Identity-aware batches over caption indices: identities are visited in a
/// shuffled order and each contributes up to `per_identity` of its not yet
/// used pairs, until every pair of the epoch has been used once. A trailing
/// batch of one pair is merged into the previous batch.
inline std::vector<std::vector<std::size_t>> identity_batches(std::span<const std::int64_t> pair_pids,
                                                              std::size_t batch, std::size_t per_identity, Rng& rng) {
  std::map<std::int64_t, std::vector<std::size_t>> queues;
  for (std::size_t i = 0; i < pair_pids.size(); ++i) queues[pair_pids[i]].push_back(i);
  std::vector<std::int64_t> ids;
  for (auto& [pid, q] : queues) {
    rng.shuffle(q.begin(), q.end());
    std::reverse(q.begin(), q.end());  // pop_back takes the shuffled front
    ids.push_back(pid);
  }
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  while (!ids.empty()) {
    rng.shuffle(ids.begin(), ids.end());
    std::vector<std::int64_t> still;
    for (auto pid : ids) {
      auto& q = queues[pid];
      for (std::size_t t = 0; t < per_identity && !q.empty(); ++t) {
        if (cur.size() == batch) {
          batches.push_back(std::move(cur));
          cur.clear();
        }
        cur.push_back(q.back());
        q.pop_back();
      }
      if (!q.empty()) still.push_back(pid);
    }
    ids = std::move(still);
  }
  if (cur.size() == 1 && !batches.empty()) batches.back().push_back(cur[0]);
  else if (!cur.empty()) batches.push_back(std::move(cur));
  return batches;
}

template <class T>
struct TrainingState {
  TrainConfig config;
  VfeModel<T> model;
  nn::Adam<T> optimizer;
  Rng rng;
  std::size_t epoch = 0;
  std::vector<EpochRecord> log;

  explicit TrainingState(const TrainConfig& cfg)
      : config(cfg),
        model(cfg),
        optimizer(model.parameters().tensors(), nn::AdamOptions{cfg.lr, 0.9, 0.999, 1e-8}),
        rng(Rng(cfg.seed).split("train")) {}
};

/// Fills the dataset-dependent config fields (vocabulary size, identity
/// classes) and validates.
inline TrainConfig bind_config(TrainConfig cfg, const synth::Dataset& ds, const SplitData& train) {
  cfg.encoder.vocab_size = ds.vocab.size();
  cfg.id_classes = train.classes;
  if (ds.images.empty()) throw ConfigError("dataset has no images");
  cfg.encoder.image_h = ds.images[0].image.height;
  cfg.encoder.image_w = ds.images[0].image.width;
  cfg.validate();
  return cfg;
}

/// One optimization step on the given caption indices of `data`.
template <class T>
LossBreakdown train_step(TrainingState<T>& st, const SplitData& data, std::span<const std::size_t> pairs) {
  const auto& cfg = st.config;
  auto& model = st.model;
  const auto B = pairs.size();
  std::vector<Image> images;
  std::vector<TokenSequence> seqs;
  std::vector<std::int64_t> pids;
  std::vector<std::size_t> classes;
  images.reserve(B);
  for (auto c : pairs) {
    images.push_back(data.images[data.caption_image[c]]);
    seqs.push_back(data.captions[c]);
    pids.push_back(data.caption_pids[c]);
    classes.push_back(data.caption_class[c]);
  }
  auto visual = model.image().forward(images);
  auto text = model.text().forward(seqs);

  LossTerms<T> terms;
  terms.w_tgmim = cfg.w_tgmim;
  terms.w_isgvfc = cfg.w_isgvfc;
  terms.w_cmpm = cfg.w_cmpm;
  LossBreakdown out;

  auto cm = cmpm_loss(AlignmentBatch<T>{visual.globals, text.globals, identity_labels(pids)}, cfg.tau, cfg.eps);
  terms.cmpm = cm.total;
  out.i2t = static_cast<double>(cm.i2t.item());
  out.t2i = static_cast<double>(cm.t2i.item());

  if (cfg.isgvfc) {
    switch (cfg.isgvfc_mode) {
      case CalibrationMode::kl: {
        const auto set = sample_pairs(pids, std::min(cfg.pairs, B), st.rng);
        auto f = gather_rows(visual.globals, set.indices);
        terms.isgvfc = isgvfc_loss(match_distribution(f, set.labels, cfg.tau), cfg.eps);
        break;
      }
      case CalibrationMode::id_loss:
        terms.isgvfc = id_loss(visual.globals, classes, *model.id_classifier());
        break;
      case CalibrationMode::triplet:
        terms.isgvfc = triplet_loss(visual.globals, pids, cfg.triplet_margin);
        break;
    }
  }

  if (cfg.tgmim_active()) {
    const auto N = cfg.encoder.patches();
    std::vector<PatchMask> masks;
    masks.reserve(B);
    for (std::size_t b = 0; b < B; ++b) masks.push_back(sample_mask(N, cfg.mask_ratio, st.rng));
    auto masked = model.image().forward(images, masks);
    const bool guided = cfg.mim_variant == MimMode::text_guided;
    auto predicted = model.tgmim()->forward(masked, guided ? &text : nullptr,
                                            guided ? MimVariant::text_guided : MimVariant::text_free);
    terms.tgmim = tgmim_loss(predicted, std::span<const Image>(images), std::span<const PatchMask>(masks),
                             cfg.encoder.patch);
  }

  auto total = total_loss(terms);
  out.cmpm = static_cast<double>(terms.cmpm.item());
  if (terms.isgvfc.defined()) out.isgvfc = static_cast<double>(terms.isgvfc.item());
  if (terms.tgmim.defined()) out.tgmim = static_cast<double>(terms.tgmim.item());
  out.total = static_cast<double>(total.item());

  backward(total);
  st.optimizer.step();
  model.parameters().zero_grad();
  return out;
}

template <class T>
EpochRecord train_epoch(TrainingState<T>& st, const SplitData& data) {
  const auto batches = identity_batches(data.caption_pids, st.config.batch, st.config.per_identity, st.rng);
  EpochRecord rec;
  rec.epoch = st.epoch + 1;
  for (const auto& b : batches) rec.steps.push_back(train_step(st, data, b));
  const double n = static_cast<double>(rec.steps.size());
  for (const auto& s : rec.steps) {
    rec.mean.tgmim += s.tgmim / n;
    rec.mean.isgvfc += s.isgvfc / n;
    rec.mean.cmpm += s.cmpm / n;
    rec.mean.i2t += s.i2t / n;
    rec.mean.t2i += s.t2i / n;
    rec.mean.total += s.total / n;
  }
  st.epoch += 1;
  st.log.push_back(rec);
  return rec;
}

template <class T>
CheckpointData<T> make_checkpoint(const TrainingState<T>& st) {
  CheckpointData<T> ck;
  ck.config = st.config;
  ck.epoch = st.epoch;
  ck.rng_state = st.rng.state();
  ck.adam_steps = st.optimizer.steps();
  const auto& entries = st.model.parameters().entries();
  const auto& opt = st.optimizer;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = entries[i];
    ck.tensors.push_back({name, t.shape(), t.values(), opt.first_moments()[i], opt.second_moments()[i]});
  }
  for (const auto& r : st.log) ck.log += r.to_json().dump() + "\n";
  return ck;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const TrainingState<T>& st) {
  write_checkpoint(path, make_checkpoint(st));
}

template <class T>
TrainingState<T> load_training_state(const std::filesystem::path& path) {
  auto ck = read_checkpoint<T>(path);
  TrainingState<T> st(ck.config);
  restore_parameters(ck, st.model, &st.optimizer);
  st.rng.set_state(ck.rng_state);
  st.epoch = ck.epoch;
  std::istringstream lines(ck.log);
  std::string line;
  while (std::getline(lines, line))
    if (!line.empty()) st.log.push_back(EpochRecord::from_json(nlohmann::json::parse(line)));
  return st;
}

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  bool quiet = false;
};

/// Runs epochs until `config.epochs`. With an output directory, appends one
/// JSON line per epoch to loss_log.jsonl and writes final.vftc. A non-finite
/// loss writes abort.vftc (the state before the failing step) and rethrows.
template <class T>
void run_training(TrainingState<T>& st, const SplitData& train, const TrainHooks& hooks = {}) {
  if (train.empty()) throw ConfigError("training split is empty");
  const std::filesystem::path out = st.config.out;
  std::ofstream log_file;
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    log_file.open(out / "loss_log.jsonl", st.epoch == 0 ? std::ios::trunc : std::ios::app);
    if (!log_file) throw IoError("cannot write loss log in " + out.string());
  }
  while (st.epoch < st.config.epochs) {
    const auto before = make_checkpoint(st);
    EpochRecord rec;
    try {
      rec = train_epoch(st, train);
    } catch (const TrainingAbortError& e) {
      if (!out.empty()) write_checkpoint(out / "abort.vftc", before);
      log_warning(std::string("training aborted: ") + e.what());
      throw;
    }
    if (log_file.is_open()) {
      auto j = rec.to_json();
      j.erase("steps");
      log_file << j.dump() << '\n' << std::flush;
    }
    if (!hooks.quiet && (rec.epoch == 1 || rec.epoch % 10 == 0 || rec.epoch == st.config.epochs)) {
      std::ostringstream os;
      os << "epoch " << rec.epoch << " total " << rec.mean.total << " cmpm " << rec.mean.cmpm << " isgvfc "
         << rec.mean.isgvfc << " tgmim " << rec.mean.tgmim;
      log_info(os.str());
    }
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  if (!out.empty()) save_checkpoint(out / "final.vftc", st);
}

/// Retrieval metrics of one split: every caption queries the split's image
/// gallery. Only the two encoders run.
template <class T>
MetricsReport evaluate(const VfeModel<T>& model, const SplitData& split) {
  if (split.empty() || split.images.empty()) throw ContractError("evaluate: split '" + split.name + "' is empty");
  const auto img = model.embed_images(split.images);
  const auto txt = model.embed_texts(split.captions);
  const auto sim = similarity_matrix(txt, img);
  const auto gt = RetrievalGroundTruth::from_identities(split.caption_pids, split.image_pids);
  const auto G = split.images.size();
  MetricsReport r;
  r.rank1 = rank_k(sim, gt, 1);
  r.rank5 = rank_k(sim, gt, std::min<std::size_t>(5, G));
  r.rank10 = rank_k(sim, gt, std::min<std::size_t>(10, G));
  r.map = mean_average_precision(sim, gt);
  r.chance_rank1 = 100.0 * gt.chance_rank1(G);
  std::vector<double> feats(img.data().begin(), img.data().end());
  std::set<std::int64_t> distinct(split.image_pids.begin(), split.image_pids.end());
  r.silhouette = distinct.size() >= 2 ? silhouette(feats, img.dim(1), split.image_pids) : 0.0;
  return r;
}

/// Mean avgDist of the TG-MIM reconstruction over the images of a split,
/// each masked at `ratio` with a mask drawn from `seed` and, for the
/// text-guided variant, guided by the image's first caption.
template <class T>
double reconstruction_avg_dist(const VfeModel<T>& model, const SplitData& split, double ratio, std::uint64_t seed) {
  const auto* head = model.tgmim();
  if (!head) throw ContractError("avg_dist needs a model trained with TG-MIM");
  const auto& cfg = model.config();
  const auto N = cfg.encoder.patches();
  Rng rng = Rng(seed).split("avg_dist");
  std::vector<const TokenSequence*> first_caption(split.images.size(), nullptr);
  for (std::size_t c = 0; c < split.captions.size(); ++c)
    if (!first_caption[split.caption_image[c]]) first_caption[split.caption_image[c]] = &split.captions[c];
  NoGradGuard guard;
  double total = 0;
  std::size_t count = 0;
  const bool guided = cfg.mim_variant == MimMode::text_guided;
  for (std::size_t i = 0; i < split.images.size(); ++i) {
    auto mask = sample_mask(N, ratio, rng);
    if (mask.masked_count() == 0 || mask.masked_count() == N) continue;
    ReconstructionOutput<T> rec;
    mim_variant_loss(model.image(), &model.text(), *head, split.images[i], first_caption[i], mask,
                     guided ? MimVariant::text_guided : MimVariant::text_free, &rec);
    std::vector<double> pred(rec.predicted.data().begin(), rec.predicted.data().end());
    total += avg_dist(pred, split.images[i], mask, cfg.encoder.patch);
    ++count;
  }
  if (count == 0) throw ContractError("avg_dist: ratio leaves no image with both masked and visible patches");
  return total / static_cast<double>(count);
}

}  // namespace vfetps
