#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vfetps/core/binary_io.hpp"
#include "vfetps/core/errors.hpp"
#include "vfetps/core/ops.hpp"
#include "vfetps/metrics.hpp"
#include "vfetps/model/isgvfc.hpp"

// Cross-modal projection matching between global image and text features,
// the summed training objective, and the inference similarity path.

namespace vfetps {

template <class T>
struct AlignmentBatch {
  Tensor<T> image_globals;            // [B, d_out]
  Tensor<T> text_globals;             // [B, d_out]
  std::vector<std::uint8_t> labels;   // [B, B], y_ij = 1 iff image i matches caption j
};

/// One matching direction: p = row softmax of cos / tau from anchors to
/// candidates, L_i = (1/B) sum_j p_ij log(p_ij / (q_ij + eps)), result =
/// (1/B) sum_i L_i.
template <class T>
Tensor<T> cmpm_direction(const Tensor<T>& anchors, const Tensor<T>& candidates, std::span<const std::uint8_t> labels,
                         double tau, double eps = 1e-8) {
  if (anchors.shape() != candidates.shape() || anchors.rank() != 2) {
    throw DimensionError("cmpm: anchor " + shape_str(anchors.shape()) + " and candidate " +
                         shape_str(candidates.shape()) + " shapes differ");
  }
  const auto B = anchors.dim(0);
  auto logits = match_logits(anchors, candidates, tau);
  const auto q = match_targets(labels, B);
  std::vector<T> log_q(B * B);
  for (std::size_t i = 0; i < log_q.size(); ++i) log_q[i] = static_cast<T>(std::log(q[i] + eps));
  Tensor<T> lq(Shape{B, B}, std::move(log_q));
  auto kl = mul(softmax(logits), sub(log_softmax(logits), lq));
  return scale(sum(kl), T(1) / static_cast<T>(B * B));
}

template <class T>
struct CmpmLoss {
  Tensor<T> total, i2t, t2i;
};

template <class T>
CmpmLoss<T> cmpm_loss(const AlignmentBatch<T>& batch, double tau, double eps = 1e-8) {
  const auto B = batch.image_globals.dim(0);
  if (batch.labels.size() != B * B) throw DimensionError("cmpm: label matrix must be B x B");
  std::vector<std::uint8_t> transposed(B * B);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j) transposed[j * B + i] = batch.labels[i * B + j];
  CmpmLoss<T> out;
  out.i2t = cmpm_direction(batch.image_globals, batch.text_globals, batch.labels, tau, eps);
  out.t2i = cmpm_direction(batch.text_globals, batch.image_globals, transposed, tau, eps);
  out.total = add(out.i2t, out.t2i);
  return out;
}

/// Scalar values of every loss term of one step.
struct LossBreakdown {
  double tgmim = 0, isgvfc = 0, cmpm = 0, i2t = 0, t2i = 0, total = 0;
};

/// Loss terms entering the objective; undefined tensors are disabled terms.
template <class T>
struct LossTerms {
  Tensor<T> tgmim, isgvfc, cmpm;
  double w_tgmim = 1.0, w_isgvfc = 1.0, w_cmpm = 1.0;
};

/// Weighted sum of the enabled terms (unit weights by default). A non-finite
/// term aborts with TrainingAbortError naming it.
template <class T>
Tensor<T> total_loss(const LossTerms<T>& terms) {
  Tensor<T> acc;
  auto fold = [&](const Tensor<T>& t, double w, const char* name) {
    if (!t.defined()) return;
    if (!std::isfinite(static_cast<double>(t.item()))) {
      throw TrainingAbortError(name, std::string("loss term ") + name + " is not finite");
    }
    auto term = w == 1.0 ? t : scale(t, static_cast<T>(w));
    acc = acc.defined() ? add(acc, term) : term;
  };
  fold(terms.tgmim, terms.w_tgmim, "tgmim");
  fold(terms.isgvfc, terms.w_isgvfc, "isgvfc");
  fold(terms.cmpm, terms.w_cmpm, "cmpm");
  return acc.defined() ? acc : Tensor<T>::scalar(T(0));
}

/// Cosine similarity of every query row against every gallery row.
template <class T>
ScoreMatrix similarity_matrix(const Tensor<T>& queries, const Tensor<T>& gallery) {
  if (queries.rank() != 2 || gallery.rank() != 2 || queries.dim(1) != gallery.dim(1)) {
    throw DimensionError("similarity_matrix: feature widths differ " + shape_str(queries.shape()) + " vs " +
                         shape_str(gallery.shape()));
  }
  NoGradGuard guard;
  auto sim = cosine_similarity(queries, gallery);
  ScoreMatrix out{queries.dim(0), gallery.dim(0), {}};
  out.values.assign(sim.data().begin(), sim.data().end());
  return out;
}

// Feature dump: "VFET" | u32 version | u32 count | u32 dim | count*dim f32,
// plus a JSONL sidecar with {index, person_id, modality} per row.

inline constexpr std::uint32_t kFeatureDumpVersion = 1;

struct FeatureRecord {
  std::size_t index = 0;
  std::int64_t person_id = 0;
  std::string modality;  // "image" or "text"
};

struct FeatureDump {
  std::size_t count = 0, dim = 0;
  std::vector<float> values;
  std::vector<FeatureRecord> records;
};

inline std::filesystem::path feature_sidecar_path(const std::filesystem::path& bin) {
  auto p = bin;
  p.replace_extension(".jsonl");
  return p;
}

inline void write_feature_dump(const std::filesystem::path& path, const FeatureDump& dump) {
  if (dump.values.size() != dump.count * dump.dim || dump.records.size() != dump.count) {
    throw DimensionError("feature dump: values/records do not match count x dim");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write feature dump " + path.string());
  binio::write_magic(out, "VFET");
  binio::write_u32(out, kFeatureDumpVersion);
  binio::write_u32(out, static_cast<std::uint32_t>(dump.count));
  binio::write_u32(out, static_cast<std::uint32_t>(dump.dim));
  for (float v : dump.values) binio::write_f32(out, v);
  std::ofstream side(feature_sidecar_path(path));
  if (!side) throw IoError("cannot write feature sidecar for " + path.string());
  for (const auto& r : dump.records) {
    side << nlohmann::json{{"index", r.index}, {"person_id", r.person_id}, {"modality", r.modality}}.dump() << '\n';
  }
}

inline FeatureDump read_feature_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature dump " + path.string());
  binio::expect_magic(in, "VFET", path.string());
  const auto version = binio::read_u32(in);
  if (version != kFeatureDumpVersion) throw VersionError("unsupported feature dump version " + std::to_string(version));
  FeatureDump d;
  d.count = binio::read_u32(in);
  d.dim = binio::read_u32(in);
  d.values.resize(d.count * d.dim);
  for (auto& v : d.values) v = binio::read_f32(in);
  std::ifstream side(feature_sidecar_path(path));
  if (!side) throw IoError("missing feature sidecar for " + path.string());
  std::string line;
  while (std::getline(side, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    d.records.push_back({j.at("index").get<std::size_t>(), j.at("person_id").get<std::int64_t>(),
                         j.at("modality").get<std::string>()});
  }
  if (d.records.size() != d.count) throw VersionError("feature sidecar row count does not match dump header");
  return d;
}

}  // namespace vfetps
