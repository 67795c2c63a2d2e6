#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mmdebias/categorize.hpp"
#include "mmdebias/cf_text.hpp"
#include "mmdebias/core.hpp"
#include "mmdebias/errors.hpp"
#include "mmdebias/io.hpp"
#include "mmdebias/mediation.hpp"

namespace mmdebias {

enum class Split { Train, Valid, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  throw ConfigError("bad split");
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "valid" || s == "val" || s == "dev") return Split::Valid;
  if (s == "test") return Split::Test;
  throw ParseError("unknown split name: " + s);
}

class DatasetManifest {
public:
  DatasetManifest(std::string name, ClassSpace class_space)
      : name_(std::move(name)), class_space_(std::move(class_space)) {}

  void add(Sample sample, Split split) {
    if (index_.count(sample.id)) throw DataError("duplicate sample id: " + sample.id);
    if (sample.label && *sample.label >= class_space_.k())
      throw DataError("label out of range for sample " + sample.id);
    if (sample.text.empty() && !sample.image_path)
      throw DataError("sample " + sample.id + " has no modality present");
    index_[sample.id] = records_.size();
    records_.push_back(std::move(sample));
    splits_.push_back(split);
  }

  const std::string& name() const { return name_; }
  const ClassSpace& class_space() const { return class_space_; }
  const std::vector<Sample>& records() const { return records_; }
  Split split_of(std::size_t i) const { return splits_.at(i); }

  const Sample* find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &records_[it->second];
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records_.size(); ++i)
      if (splits_[i] == s) out.push_back(i);
    return out;
  }

private:
  std::string name_;
  ClassSpace class_space_;
  std::vector<Sample> records_;
  std::vector<Split> splits_;
  std::map<std::string, std::size_t> index_;
};

struct IngestResult {
  DatasetManifest manifest;
  std::map<std::size_t, std::uint64_t> class_counts;  // over all splits
  std::vector<std::string> warnings;
};

// Reads a manifest file: a header {"schema","name","labels"} followed by one
// sample per line. Labels may be given by name or index. Image paths resolve
// relative to the manifest's directory; a missing image file downgrades the
// sample to text-only with a warning.
inline IngestResult ingest(const std::filesystem::path& path) {
  LineRecordFile f = read_line_records(path, "manifest");
  std::string name = f.header.value("name", path.stem().string());
  auto labels = require_field<std::vector<std::string>>(f.header, "labels", path.string());
  IngestResult out{DatasetManifest(name, ClassSpace(labels)), {}, {}};
  const ClassSpace& cs = out.manifest.class_space();
  std::filesystem::path base = path.parent_path();

  for (std::size_t i = 0; i < f.records.size(); ++i) {
    const json& j = f.records[i];
    std::string where = path.string() + " record " + std::to_string(i + 1);
    Sample s;
    s.id = require_field<std::string>(j, "id", where);
    s.text = j.value("text", std::string());
    if (j.contains("image_path") && !j["image_path"].is_null()) {
      std::string rel = require_field<std::string>(j, "image_path", where);
      if (!rel.empty()) {
        std::filesystem::path img = base / rel;
        if (std::filesystem::exists(img)) {
          s.image_path = img.string();
        } else {
          out.warnings.push_back(where + ": image file missing, treating modality as absent: " +
                                 img.string());
        }
      }
    }
    if (j.contains("label") && !j["label"].is_null()) {
      if (j["label"].is_string()) {
        auto idx = cs.index_of(j["label"].get<std::string>());
        if (!idx)
          throw DataError(where + ": unknown label '" + j["label"].get<std::string>() + "'");
        s.label = *idx;
      } else if (j["label"].is_number_unsigned() || j["label"].is_number_integer()) {
        long long v = j["label"].get<long long>();
        if (v < 0 || static_cast<std::size_t>(v) >= cs.k())
          throw DataError(where + ": label index out of range");
        s.label = static_cast<std::size_t>(v);
      } else {
        throw DataError(where + ": bad label type");
      }
    }
    Split split = Split::Train;
    if (j.contains("split")) split = split_from_name(j["split"].get<std::string>());
    if (s.label) ++out.class_counts[*s.label];
    out.manifest.add(std::move(s), split);
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  json header;
  header["schema"] = "manifest/1";
  header["name"] = m.name();
  header["labels"] = m.class_space().labels();
  std::vector<json> rows;
  rows.reserve(m.records().size());
  for (std::size_t i = 0; i < m.records().size(); ++i) {
    const Sample& s = m.records()[i];
    json j;
    j["id"] = s.id;
    j["text"] = s.text;
    if (s.image_path) j["image_path"] = *s.image_path;
    if (s.label) j["label"] = m.class_space().label(*s.label);
    j["split"] = split_name(m.split_of(i));
    rows.push_back(std::move(j));
  }
  write_line_records(path, header, rows);
}

// Annotation files: {"sample_id","semantic_phrases","context_phrases"} lines.
inline void write_annotations(const std::filesystem::path& path,
                              const std::vector<SemanticAnnotation>& anns) {
  json header;
  header["schema"] = "annotations/1";
  std::vector<json> rows;
  rows.reserve(anns.size());
  for (const auto& a : anns) {
    json j;
    j["sample_id"] = a.sample_id;
    j["semantic_phrases"] = a.semantic_phrases;
    j["context_phrases"] = a.context_phrases;
    rows.push_back(std::move(j));
  }
  write_line_records(path, header, rows);
}

inline std::map<std::string, SemanticAnnotation> read_annotations(
    const std::filesystem::path& path) {
  LineRecordFile f = read_line_records(path, "annotations");
  std::map<std::string, SemanticAnnotation> out;
  for (const auto& j : f.records) {
    SemanticAnnotation a;
    a.sample_id = require_field<std::string>(j, "sample_id", path.string());
    a.semantic_phrases =
        require_field<std::vector<std::string>>(j, "semantic_phrases", path.string());
    if (j.contains("context_phrases"))
      a.context_phrases = j["context_phrases"].get<std::vector<std::string>>();
    out[a.sample_id] = std::move(a);
  }
  return out;
}

enum class ReversePolicy { LeastLikely, SeededUniform };

// Intentionally wrong target for a spurious-only view. Binary tasks force the
// opposite class. With more classes, LeastLikely takes the class the model
// already finds least plausible (maximum contrast); SeededUniform draws any
// non-gold class deterministically from (seed, salt).
inline std::size_t reversed_label(std::size_t y, std::size_t k,
                                  const std::optional<ProbVector>& p0,
                                  ReversePolicy policy = ReversePolicy::LeastLikely,
                                  std::uint64_t seed = 0, std::uint64_t salt = 0) {
  if (k < 2) throw UnsupportedError("reversed_label: need at least 2 classes");
  if (y >= k) throw IndexError("reversed_label: label out of range");
  if (k == 2) return 1 - y;
  if (policy == ReversePolicy::LeastLikely) {
    if (!p0) throw ConfigError("reversed_label: LeastLikely policy needs p0");
    if (p0->k() != k) throw ShapeError("reversed_label: p0 length mismatch");
    std::size_t best = y == 0 ? 1 : 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (c == y) continue;
      if (p0->scores[c] < p0->scores[best]) best = c;
    }
    return best;
  }
  std::uint64_t r = fnv1a64(&salt, sizeof salt, derive_seed(seed, "reversed-label"));
  std::size_t pick = static_cast<std::size_t>(r % (k - 1));
  return pick < y ? pick : pick + 1;
}

struct EmittedRecord {
  std::string sample_id;
  Variant text_variant = Variant::Original;
  Variant image_variant = Variant::Original;
  std::string text;       // resolved text for this view; empty when masked
  std::string image_ref;  // resolved image path; empty when masked or absent
  std::size_t target = 0;
};

struct EmittedTrainingSet {
  std::string role;  // "ge" | "ide" | "tde"
  std::string source_fingerprint;
  std::vector<EmittedRecord> records;
};

struct RouterTarget {
  std::string sample_id;
  int category = 0;  // 0..3
};

struct RouterTrainingSet {
  std::string source_fingerprint;
  std::vector<RouterTarget> records;
};

struct EmitConfig {
  ReversePolicy policy = ReversePolicy::LeastLikely;
  std::uint64_t seed = 0;
  std::string mask_token = "[MASK]";
};

// What emission may draw on to realize counterfactual views.
struct CounterfactualAssets {
  const std::map<std::string, SemanticAnnotation>* annotations = nullptr;
  // p0 per sample, needed for the LeastLikely reversed label when K > 2
  const std::map<std::string, ScenarioOutputs>* scenarios = nullptr;
  // synthetic data derives image counterfactuals from the feature table, so
  // they are always available; file-backed data must list them explicitly
  bool image_cf_always_available = false;
  std::map<std::string, std::string> image_cf_paths;
};

struct EmittedTrainingSets {
  EmittedTrainingSet ge{"ge", "", {}};
  EmittedTrainingSet ide{"ide", "", {}};
  EmittedTrainingSet tde{"tde", "", {}};
  RouterTrainingSet router;
  std::vector<std::string> skipped;  // "sample: reason" entries
};

// Builds the four supervision sets from a categorized training split.
// GE holds every labeled train sample unchanged (Exclude included). IDE adds
// (image counterfactual, reversed label) for categories 1 and 3; TDE adds
// (text counterfactual, reversed label) for categories 2 and 3. The router
// set pairs each sample with its category, Exclude dropped. Pure function of
// its inputs: re-running emits identical records.
inline EmittedTrainingSets emit_training_sets(const DatasetManifest& manifest,
                                              const std::vector<CategorizationRecord>& cats,
                                              const CounterfactualAssets& assets,
                                              const EmitConfig& cfg = {}) {
  EmittedTrainingSets out;
  std::size_t k = manifest.class_space().k();

  for (std::size_t i : manifest.indices(Split::Train)) {
    const Sample& s = manifest.records()[i];
    if (!s.label) {
      out.skipped.push_back(s.id + ": unlabeled, excluded from supervision");
      continue;
    }
    EmittedRecord r;
    r.sample_id = s.id;
    r.text = s.text;
    r.image_ref = s.image_path.value_or("");
    r.target = *s.label;
    out.ge.records.push_back(r);
  }

  for (const auto& c : cats) {
    const Sample* s = manifest.find(c.sample_id);
    if (!s) {
      out.skipped.push_back(c.sample_id + ": categorized but absent from manifest");
      continue;
    }
    if (!s->label) {
      out.skipped.push_back(c.sample_id + ": categorized but unlabeled");
      continue;
    }
    if (c.category == DebiasCategory::Exclude) continue;
    int cat = category_int(c.category);
    out.router.records.push_back({s->id, cat});
    if (cat == 0) continue;

    std::optional<ProbVector> p0;
    if (assets.scenarios) {
      auto it = assets.scenarios->find(s->id);
      if (it != assets.scenarios->end()) p0 = it->second.p_full;
    }
    std::size_t y_hat;
    try {
      y_hat = reversed_label(*s->label, k, p0, cfg.policy, cfg.seed, fnv1a64(s->id));
    } catch (const ConfigError&) {
      out.skipped.push_back(s->id + ": reversed label needs p0, scenario output missing");
      continue;
    }

    if (cat == 1 || cat == 3) {
      std::string cf_path;
      bool available = assets.image_cf_always_available;
      if (!available) {
        auto it = assets.image_cf_paths.find(s->id);
        if (it != assets.image_cf_paths.end()) {
          cf_path = it->second;
          available = true;
        }
      }
      if (!available) {
        out.skipped.push_back(s->id + ": image counterfactual missing");
      } else {
        EmittedRecord r;
        r.sample_id = s->id;
        r.text_variant = Variant::Original;
        r.image_variant = Variant::SpuriousOnly;
        r.text = s->text;
        r.image_ref = cf_path;
        r.target = y_hat;
        out.ide.records.push_back(r);
      }
    }
    if (cat == 2 || cat == 3) {
      const SemanticAnnotation* ann = nullptr;
      if (assets.annotations) {
        auto it = assets.annotations->find(s->id);
        if (it != assets.annotations->end()) ann = &it->second;
      }
      if (!ann) {
        out.skipped.push_back(s->id + ": text counterfactual missing (no annotation)");
      } else {
        EmittedRecord r;
        r.sample_id = s->id;
        r.text_variant = Variant::SpuriousOnly;
        r.image_variant = Variant::Original;
        r.text = apply_mask(s->text, *ann, cfg.mask_token);
        r.image_ref = s->image_path.value_or("");
        r.target = y_hat;
        out.tde.records.push_back(r);
      }
    }
  }

  // counterfactual additions come after the shared originals
  out.ide.records.insert(out.ide.records.begin(), out.ge.records.begin(), out.ge.records.end());
  out.tde.records.insert(out.tde.records.begin(), out.ge.records.begin(), out.ge.records.end());
  return out;
}

inline void write_training_set(const std::filesystem::path& path, const EmittedTrainingSet& set) {
  json header;
  header["schema"] = "training-set/1";
  header["role"] = set.role;
  header["fingerprint"] = set.source_fingerprint;
  std::vector<json> rows;
  rows.reserve(set.records.size());
  for (const auto& r : set.records) {
    json j;
    j["sample_id"] = r.sample_id;
    json view;
    view["text_variant"] = std::string(1, variant_code(r.text_variant));
    view["image_variant"] = std::string(1, variant_code(r.image_variant));
    view["text"] = r.text;
    view["image_path"] = r.image_ref;
    j["view"] = view;
    j["target"] = r.target;
    j["role"] = set.role;
    rows.push_back(std::move(j));
  }
  write_line_records(path, header, rows);
}

inline EmittedTrainingSet read_training_set(const std::filesystem::path& path) {
  LineRecordFile f = read_line_records(path, "training-set");
  EmittedTrainingSet set;
  set.role = require_field<std::string>(f.header, "role", path.string());
  set.source_fingerprint = f.header.value("fingerprint", std::string());
  for (const auto& j : f.records) {
    const std::string where = path.string();
    EmittedRecord r;
    r.sample_id = require_field<std::string>(j, "sample_id", where);
    if (!j.contains("view")) throw ParseError(where + ": missing view");
    const json& v = j["view"];
    r.text_variant = variant_from_code(require_field<std::string>(v, "text_variant", where));
    r.image_variant = variant_from_code(require_field<std::string>(v, "image_variant", where));
    r.text = v.value("text", std::string());
    r.image_ref = v.value("image_path", std::string());
    r.target = require_field<std::size_t>(j, "target", where);
    set.records.push_back(std::move(r));
  }
  return set;
}

inline void write_router_set(const std::filesystem::path& path, const RouterTrainingSet& set) {
  json header;
  header["schema"] = "router-set/1";
  header["fingerprint"] = set.source_fingerprint;
  std::vector<json> rows;
  rows.reserve(set.records.size());
  for (const auto& r : set.records) {
    json j;
    j["sample_id"] = r.sample_id;
    j["category"] = r.category;
    rows.push_back(std::move(j));
  }
  write_line_records(path, header, rows);
}

inline RouterTrainingSet read_router_set(const std::filesystem::path& path) {
  LineRecordFile f = read_line_records(path, "router-set");
  RouterTrainingSet set;
  set.source_fingerprint = f.header.value("fingerprint", std::string());
  for (const auto& j : f.records) {
    RouterTarget t;
    t.sample_id = require_field<std::string>(j, "sample_id", path.string());
    t.category = require_field<int>(j, "category", path.string());
    if (t.category < 0 || t.category > 3)
      throw ParseError(path.string() + ": router category out of range");
    set.records.push_back(std::move(t));
  }
  return set;
}

}  // namespace mmdebias
