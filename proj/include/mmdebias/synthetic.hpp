#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mmdebias/cf_text.hpp"
#include "mmdebias/core.hpp"
#include "mmdebias/datasets.hpp"
#include "mmdebias/errors.hpp"
#include "mmdebias/io.hpp"

namespace mmdebias {

// Corpus with planted shortcuts. Each sample carries semantic tokens that
// truly indicate the class and spurious tokens whose alignment with the label
// is controlled by rho: P(aligned) = (1 + rho) / 2. Train data uses rho_train;
// validation and test use rho_test, so rho_train=0.8 with rho_test=-0.8 turns
// a helpful shortcut into a harmful one at evaluation time.
struct SyntheticSpec {
  std::size_t k = 2;
  std::size_t n_train = 2000;
  std::size_t n_valid = 500;
  std::size_t n_test = 500;
  std::size_t text_semantic_slots = 2;
  std::size_t text_spurious_slots = 1;
  std::size_t image_semantic_slots = 2;
  std::size_t image_spurious_slots = 1;
  double rho_train = 0.8;
  double rho_test = -0.8;
  double label_noise = 0.1;  // chance a semantic slot draws a wrong class
  double bias_strength = 1.0;
  std::uint64_t seed = 17;

  void validate() const {
    if (k < 2) throw SpecError("synthetic spec: k must be at least 2");
    if (n_train == 0 || n_valid == 0 || n_test == 0)
      throw SpecError("synthetic spec: empty split");
    if (text_semantic_slots + image_semantic_slots == 0)
      throw SpecError("synthetic spec: no semantic slots");
    if (rho_train < -1.0 || rho_train > 1.0 || rho_test < -1.0 || rho_test > 1.0)
      throw SpecError("synthetic spec: correlation outside [-1, 1]");
    if (label_noise < 0.0 || label_noise >= 1.0)
      throw SpecError("synthetic spec: label noise outside [0, 1)");
  }
};

// Ground-truth token assignment for one sample, split by modality and by
// semantic versus spurious role. The image modality is abstract: tokens stand
// in for detected visual features.
struct SyntheticFeatures {
  std::vector<std::string> text_sem;
  std::vector<std::string> text_spu;
  std::vector<std::string> img_sem;
  std::vector<std::string> img_spu;
};

class SyntheticFeatureTable {
public:
  void put(const std::string& id, SyntheticFeatures f) { rows_[id] = std::move(f); }
  const SyntheticFeatures* find(const std::string& id) const {
    auto it = rows_.find(id);
    return it == rows_.end() ? nullptr : &it->second;
  }
  const std::map<std::string, SyntheticFeatures>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

private:
  std::map<std::string, SyntheticFeatures> rows_;
};

// Parameters of the closed-form oracle predictor: a logistic model whose
// logit for class c counts the class-c tokens the view exposes.
// bias_strength scales only the spurious terms, so setting it to zero makes
// spurious-only views carry no evidence at all.
struct SyntheticModelParams {
  double w_sem_text = 1.2;
  double w_spu_text = 1.0;
  double w_sem_img = 1.2;
  double w_spu_img = 1.0;
  double bias_strength = 1.0;
  std::vector<double> prior_logits;  // length k; zeros mean uniform priors
};

struct SyntheticDataset {
  DatasetManifest manifest;
  SyntheticFeatureTable features;
  std::vector<SemanticAnnotation> annotations;  // text semantic phrases per sample
  SyntheticModelParams oracle_params;
};

namespace detail {

// Deterministic across standard libraries: draws use raw engine output only.
inline double unit_double(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(rng() % n);
}
inline bool bernoulli(std::mt19937_64& rng, double p) { return unit_double(rng) < p; }

// True class with probability 1 - noise, otherwise uniform over the others.
inline std::size_t noisy_class(std::mt19937_64& rng, std::size_t y, std::size_t k, double noise) {
  if (!bernoulli(rng, noise)) return y;
  std::size_t pick = uniform_index(rng, k - 1);
  return pick < y ? pick : pick + 1;
}

// Class y with probability (1 + rho) / 2, otherwise uniform over the others.
inline std::size_t correlated_class(std::mt19937_64& rng, std::size_t y, std::size_t k,
                                    double rho) {
  if (bernoulli(rng, (1.0 + rho) / 2.0)) return y;
  std::size_t pick = uniform_index(rng, k - 1);
  return pick < y ? pick : pick + 1;
}

inline std::string synth_token(const char* prefix, std::size_t slot, std::size_t cls) {
  return std::string(prefix) + std::to_string(slot) + "c" + std::to_string(cls);
}

}  // namespace detail

inline std::vector<std::string> synthetic_class_labels(std::size_t k) {
  std::vector<std::string> labels;
  labels.reserve(k);
  for (std::size_t c = 0; c < k; ++c) labels.push_back("class" + std::to_string(c));
  return labels;
}

// Token vocabulary implied by a spec: every (prefix, slot, class) combination.
inline std::vector<std::string> synthetic_vocabulary(const SyntheticSpec& spec) {
  std::vector<std::string> v;
  auto emit = [&](const char* prefix, std::size_t slots) {
    for (std::size_t j = 0; j < slots; ++j)
      for (std::size_t c = 0; c < spec.k; ++c) v.push_back(detail::synth_token(prefix, j, c));
  };
  emit("ts", spec.text_semantic_slots);
  emit("tu", spec.text_spurious_slots);
  emit("is", spec.image_semantic_slots);
  emit("iu", spec.image_spurious_slots);
  return v;
}

inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);

  SyntheticDataset out{DatasetManifest("synthetic", ClassSpace(synthetic_class_labels(spec.k))),
                       {}, {}, {}};
  out.oracle_params.bias_strength = spec.bias_strength;
  out.oracle_params.prior_logits.assign(spec.k, 0.0);

  struct SplitPlan {
    Split split;
    const char* tag;
    std::size_t n;
    double rho;
  };
  const SplitPlan plans[] = {
      {Split::Train, "train", spec.n_train, spec.rho_train},
      {Split::Valid, "valid", spec.n_valid, spec.rho_test},
      {Split::Test, "test", spec.n_test, spec.rho_test},
  };

  for (const auto& plan : plans) {
    for (std::size_t i = 0; i < plan.n; ++i) {
      std::size_t y = i % spec.k;  // balanced classes
      std::string id = std::string(plan.tag) + "-" + std::to_string(i);

      SyntheticFeatures feats;
      for (std::size_t j = 0; j < spec.text_semantic_slots; ++j)
        feats.text_sem.push_back(detail::synth_token(
            "ts", j, detail::noisy_class(rng, y, spec.k, spec.label_noise)));
      for (std::size_t j = 0; j < spec.text_spurious_slots; ++j)
        feats.text_spu.push_back(detail::synth_token(
            "tu", j, detail::correlated_class(rng, y, spec.k, plan.rho)));
      for (std::size_t j = 0; j < spec.image_semantic_slots; ++j)
        feats.img_sem.push_back(detail::synth_token(
            "is", j, detail::noisy_class(rng, y, spec.k, spec.label_noise)));
      for (std::size_t j = 0; j < spec.image_spurious_slots; ++j)
        feats.img_spu.push_back(detail::synth_token(
            "iu", j, detail::correlated_class(rng, y, spec.k, plan.rho)));

      std::string text;
      for (const auto& t : feats.text_sem) {
        if (!text.empty()) text += ' ';
        text += t;
      }
      for (const auto& t : feats.text_spu) {
        if (!text.empty()) text += ' ';
        text += t;
      }

      SemanticAnnotation ann;
      ann.sample_id = id;
      ann.semantic_phrases = feats.text_sem;
      ann.context_phrases = feats.text_spu;
      out.annotations.push_back(std::move(ann));

      Sample s;
      s.id = id;
      s.text = std::move(text);
      s.label = y;
      out.manifest.add(std::move(s), plan.split);
      out.features.put(id, std::move(feats));
    }
  }
  return out;
}

inline void write_feature_table(const std::filesystem::path& path,
                                const SyntheticFeatureTable& table) {
  json header;
  header["schema"] = "synthetic-features/1";
  std::vector<json> rows;
  rows.reserve(table.size());
  for (const auto& [id, f] : table.rows()) {
    json j;
    j["sample_id"] = id;
    j["text_sem"] = f.text_sem;
    j["text_spu"] = f.text_spu;
    j["img_sem"] = f.img_sem;
    j["img_spu"] = f.img_spu;
    rows.push_back(std::move(j));
  }
  write_line_records(path, header, rows);
}

inline SyntheticFeatureTable read_feature_table(const std::filesystem::path& path) {
  LineRecordFile f = read_line_records(path, "synthetic-features");
  SyntheticFeatureTable table;
  for (const auto& j : f.records) {
    const std::string where = path.string();
    SyntheticFeatures feats;
    std::string id = require_field<std::string>(j, "sample_id", where);
    feats.text_sem = require_field<std::vector<std::string>>(j, "text_sem", where);
    feats.text_spu = require_field<std::vector<std::string>>(j, "text_spu", where);
    feats.img_sem = require_field<std::vector<std::string>>(j, "img_sem", where);
    feats.img_spu = require_field<std::vector<std::string>>(j, "img_spu", where);
    table.put(id, std::move(feats));
  }
  return table;
}

inline void write_model_params(const std::filesystem::path& path,
                               const SyntheticModelParams& p) {
  json j;
  j["schema"] = "synthetic-model/1";
  j["w_sem_text"] = p.w_sem_text;
  j["w_spu_text"] = p.w_spu_text;
  j["w_sem_img"] = p.w_sem_img;
  j["w_spu_img"] = p.w_spu_img;
  j["bias_strength"] = p.bias_strength;
  j["prior_logits"] = p.prior_logits;
  write_text_file(path, j.dump(2) + "\n");
}

inline SyntheticModelParams read_model_params(const std::filesystem::path& path) {
  json j = parse_json(read_text_file(path), path.string());
  if (j.value("schema", std::string()) != "synthetic-model/1")
    throw SchemaError(path.string() + ": not a synthetic model parameter file");
  SyntheticModelParams p;
  p.w_sem_text = require_field<double>(j, "w_sem_text", path.string());
  p.w_spu_text = require_field<double>(j, "w_spu_text", path.string());
  p.w_sem_img = require_field<double>(j, "w_sem_img", path.string());
  p.w_spu_img = require_field<double>(j, "w_spu_img", path.string());
  p.bias_strength = require_field<double>(j, "bias_strength", path.string());
  p.prior_logits = require_field<std::vector<double>>(j, "prior_logits", path.string());
  return p;
}

}  // namespace mmdebias
