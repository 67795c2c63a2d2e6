#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmdebias/core.hpp"
#include "mmdebias/errors.hpp"
#include "mmdebias/io.hpp"
#include "mmdebias/mediation.hpp"

namespace mmdebias {

// Which context a sample's prediction leans on too hard. Values 0..3 are the
// router classes; Exclude marks samples no expert should train on.
enum class DebiasCategory : int {
  NoDebias = 0,
  ImageDebias = 1,
  TextDebias = 2,
  BothDebias = 3,
  Exclude = 4
};

inline int category_int(DebiasCategory c) { return static_cast<int>(c); }

inline DebiasCategory category_from_int(int v) {
  if (v < 0 || v > 4) throw ParseError("bad category value: " + std::to_string(v));
  return static_cast<DebiasCategory>(v);
}

inline const char* category_name(DebiasCategory c) {
  switch (c) {
    case DebiasCategory::NoDebias: return "no-debias";
    case DebiasCategory::ImageDebias: return "image-debias";
    case DebiasCategory::TextDebias: return "text-debias";
    case DebiasCategory::BothDebias: return "both-debias";
    case DebiasCategory::Exclude: return "exclude";
  }
  throw ConfigError("bad category");
}

// Decision rule over the truth-class probabilities of the three scenarios.
// p0 = full input, pt = text context only, pi = image context only, all for
// the gold class. Strict inequalities with margin epsilon; the five branches
// are mutually exclusive for any epsilon >= 0.
inline DebiasCategory categorize(double p0, double pt, double pi, double epsilon) {
  auto check01 = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0))
      throw DomainError(std::string("categorize: ") + name + " outside [0,1]");
  };
  check01(p0, "p0");
  check01(pt, "pt");
  check01(pi, "pi");
  if (!(epsilon >= 0.0)) throw DomainError("categorize: epsilon must be non-negative");

  if (pt > p0 + epsilon && pi > p0 + epsilon) return DebiasCategory::NoDebias;
  if (pi + epsilon < p0 && p0 < pt - epsilon) return DebiasCategory::ImageDebias;
  if (pt + epsilon < p0 && p0 < pi - epsilon) return DebiasCategory::TextDebias;
  if (pt + epsilon < p0 && pi + epsilon < p0) return DebiasCategory::BothDebias;
  return DebiasCategory::Exclude;
}

struct CategorizationRecord {
  std::string sample_id;
  double p0_y = 0.0;
  double pt_y = 0.0;
  double pi_y = 0.0;
  double epsilon = 0.0;
  DebiasCategory category = DebiasCategory::Exclude;
};

struct CategorizationSummary {
  std::map<int, std::uint64_t> counts;       // by category value, present only if nonzero
  std::vector<std::string> skipped;          // samples lacking scenario outputs or labels
  std::uint64_t total = 0;

  double fraction(DebiasCategory c) const {
    auto it = counts.find(category_int(c));
    if (it == counts.end() || total == 0) return 0.0;
    return static_cast<double>(it->second) / static_cast<double>(total);
  }
};

struct CategorizedDataset {
  std::vector<CategorizationRecord> records;
  CategorizationSummary summary;
};

struct LabeledScenario {
  std::string sample_id;
  std::optional<ScenarioOutputs> scenario;
  std::optional<std::size_t> label;
};

// Categorizes every labeled sample with complete scenario outputs. Samples
// missing either are reported in the summary and skipped; the run continues.
inline CategorizedDataset categorize_dataset(const std::vector<LabeledScenario>& rows,
                                             double epsilon) {
  CategorizedDataset out;
  for (const auto& row : rows) {
    if (!row.scenario || !row.scenario->complete() || !row.label) {
      out.summary.skipped.push_back(row.sample_id);
      continue;
    }
    const ScenarioOutputs& s = *row.scenario;
    std::size_t y = *row.label;
    if (y >= s.k()) throw IndexError("categorize_dataset: label out of range for " + row.sample_id);
    CategorizationRecord rec;
    rec.sample_id = row.sample_id;
    rec.p0_y = s.p_full.scores[y];
    rec.pt_y = s.p_text_only.scores[y];
    rec.pi_y = s.p_image_only.scores[y];
    rec.epsilon = epsilon;
    rec.category = categorize(rec.p0_y, rec.pt_y, rec.pi_y, epsilon);
    out.records.push_back(rec);
    ++out.summary.total;
    ++out.summary.counts[category_int(rec.category)];
  }
  return out;
}

inline void write_categorization(const std::filesystem::path& path,
                                 const std::vector<CategorizationRecord>& records,
                                 const std::string& source_fingerprint) {
  json header;
  header["schema"] = "categorization/1";
  header["fingerprint"] = source_fingerprint;
  std::vector<json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    json j;
    j["sample_id"] = r.sample_id;
    j["p0_y"] = r.p0_y;
    j["pt_y"] = r.pt_y;
    j["pi_y"] = r.pi_y;
    j["epsilon"] = r.epsilon;
    j["category"] = category_int(r.category);
    rows.push_back(std::move(j));
  }
  write_line_records(path, header, rows);
}

inline std::vector<CategorizationRecord> read_categorization(const std::filesystem::path& path) {
  LineRecordFile f = read_line_records(path, "categorization");
  std::vector<CategorizationRecord> out;
  out.reserve(f.records.size());
  for (const auto& j : f.records) {
    CategorizationRecord r;
    const std::string where = path.string();
    r.sample_id = require_field<std::string>(j, "sample_id", where);
    r.p0_y = require_field<double>(j, "p0_y", where);
    r.pt_y = require_field<double>(j, "pt_y", where);
    r.pi_y = require_field<double>(j, "pi_y", where);
    r.epsilon = require_field<double>(j, "epsilon", where);
    r.category = category_from_int(require_field<int>(j, "category", where));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace mmdebias
