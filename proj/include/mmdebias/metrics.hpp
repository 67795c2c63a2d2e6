#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mmdebias/errors.hpp"

namespace mmdebias {

// Percentages are reported at two decimals with half-up rounding.
inline double percent_2dp(double fraction) {
  if (!std::isfinite(fraction)) throw NumericError("percent_2dp: non-finite input");
  return std::floor(fraction * 100.0 * 100.0 + 0.5) / 100.0;
}

inline std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", percent_2dp(fraction));
  return buf;
}

// Row = true class, column = predicted class.
class ConfusionMatrix {
public:
  explicit ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0) {
    if (k < 2) throw ConfigError("confusion matrix needs k >= 2");
  }

  void add(std::size_t truth, std::size_t predicted, std::uint64_t n = 1) {
    if (truth >= k_ || predicted >= k_) throw IndexError("confusion matrix index out of range");
    counts_[truth * k_ + predicted] += n;
  }

  std::uint64_t at(std::size_t truth, std::size_t predicted) const {
    if (truth >= k_ || predicted >= k_) throw IndexError("confusion matrix index out of range");
    return counts_[truth * k_ + predicted];
  }

  std::size_t k() const { return k_; }

  std::uint64_t row_sum(std::size_t r) const {
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < k_; ++c) s += at(r, c);
    return s;
  }
  std::uint64_t col_sum(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t r = 0; r < k_; ++r) s += at(r, c);
    return s;
  }
  std::uint64_t diagonal() const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < k_; ++i) s += at(i, i);
    return s;
  }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }

private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion_from(const std::vector<std::size_t>& truths,
                                      const std::vector<std::size_t>& predictions,
                                      std::size_t k) {
  if (truths.size() != predictions.size())
    throw ShapeError("confusion_from: truth/prediction length mismatch");
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < truths.size(); ++i) cm.add(truths[i], predictions[i]);
  return cm;
}

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t support = 0;
};

struct ClassificationReport {
  std::vector<ClassMetrics> per_class;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double weighted_f1 = 0.0;
  std::uint64_t total = 0;
};

// A zero denominator yields 0 for that statistic rather than NaN.
inline double safe_ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

inline double f_beta(double precision, double recall, double beta) {
  if (!(beta > 0.0)) throw DomainError("f_beta: beta must be positive");
  if (precision < 0.0 || precision > 1.0 || recall < 0.0 || recall > 1.0)
    throw DomainError("f_beta: precision/recall outside [0,1]");
  double b2 = beta * beta;
  double den = b2 * precision + recall;
  if (den == 0.0) return 0.0;
  return (1.0 + b2) * precision * recall / den;
}

inline ClassificationReport classification_report(const ConfusionMatrix& cm) {
  std::uint64_t total = cm.total();
  if (total == 0) throw EmptyEvaluationError("classification_report: empty confusion matrix");
  ClassificationReport rep;
  rep.total = total;
  rep.accuracy = safe_ratio(cm.diagonal(), total);
  double weighted = 0.0;
  for (std::size_t c = 0; c < cm.k(); ++c) {
    ClassMetrics m;
    m.support = cm.row_sum(c);
    m.precision = safe_ratio(cm.at(c, c), cm.col_sum(c));
    m.recall = safe_ratio(cm.at(c, c), m.support);
    m.f1 = f_beta(m.precision, m.recall, 1.0);
    rep.macro_f1 += m.f1;
    weighted += m.f1 * static_cast<double>(m.support);
    rep.per_class.push_back(m);
  }
  rep.macro_f1 /= static_cast<double>(cm.k());
  rep.weighted_f1 = weighted / static_cast<double>(total);
  return rep;
}

// lift = P(feature | label) / P(feature) computed from incidence counts.
inline double lift_ratio(std::uint64_t joint, std::uint64_t feature_count,
                         std::uint64_t label_count, std::uint64_t total) {
  if (feature_count == 0 || label_count == 0 || total == 0)
    throw DomainError("lift_ratio: zero denominator");
  if (joint > feature_count || joint > label_count || feature_count > total ||
      label_count > total)
    throw DomainError("lift_ratio: inconsistent counts");
  double p_feature_given_label =
      static_cast<double>(joint) / static_cast<double>(label_count);
  double p_feature = static_cast<double>(feature_count) / static_cast<double>(total);
  return p_feature_given_label / p_feature;
}

struct LiftEntry {
  std::string feature;
  std::size_t label = 0;
  double lift = 0.0;
  std::uint64_t joint = 0;
  std::uint64_t feature_count = 0;
};

// Feeds one sample at a time; duplicate features within a sample count once.
class LiftAccumulator {
public:
  explicit LiftAccumulator(std::size_t k) : k_(k), label_counts_(k, 0) {
    if (k < 2) throw ConfigError("lift accumulator needs k >= 2");
  }

  void add_sample(std::size_t label, const std::set<std::string>& features) {
    if (label >= k_) throw IndexError("lift: label out of range");
    ++total_;
    ++label_counts_[label];
    for (const auto& f : features) {
      auto& row = feature_counts_[f];
      if (row.per_label.empty()) row.per_label.assign(k_, 0);
      ++row.count;
      ++row.per_label[label];
    }
  }

  // Entries with feature support below min_support are dropped. Sorted by
  // descending lift, then feature name, then label for a stable order.
  std::vector<LiftEntry> build(std::uint64_t min_support = 5) const {
    if (total_ == 0) throw DataError("lift: empty corpus");
    std::vector<LiftEntry> out;
    for (const auto& [feature, row] : feature_counts_) {
      if (row.count < min_support) continue;
      for (std::size_t label = 0; label < k_; ++label) {
        if (label_counts_[label] == 0) continue;
        LiftEntry e;
        e.feature = feature;
        e.label = label;
        e.joint = row.per_label[label];
        e.feature_count = row.count;
        e.lift = lift_ratio(std::max<std::uint64_t>(e.joint, 0), row.count,
                            label_counts_[label], total_);
        out.push_back(e);
      }
    }
    std::sort(out.begin(), out.end(), [](const LiftEntry& a, const LiftEntry& b) {
      if (a.lift != b.lift) return a.lift > b.lift;
      if (a.feature != b.feature) return a.feature < b.feature;
      return a.label < b.label;
    });
    return out;
  }

  std::uint64_t total() const { return total_; }

private:
  struct FeatureRow {
    std::uint64_t count = 0;
    std::vector<std::uint64_t> per_label;
  };
  std::size_t k_;
  std::uint64_t total_ = 0;
  std::vector<std::uint64_t> label_counts_;
  std::map<std::string, FeatureRow> feature_counts_;
};

enum class MetricKind { Accuracy, MacroF1, WeightedF1, PositiveF1 };

inline MetricKind metric_from_name(const std::string& name) {
  if (name == "accuracy" || name == "acc") return MetricKind::Accuracy;
  if (name == "macro-f1") return MetricKind::MacroF1;
  if (name == "weighted-f1") return MetricKind::WeightedF1;
  if (name == "positive-f1" || name == "binary-f1") return MetricKind::PositiveF1;
  throw ConfigError("unknown metric name: " + name);
}

inline const char* metric_name(MetricKind m) {
  switch (m) {
    case MetricKind::Accuracy: return "accuracy";
    case MetricKind::MacroF1: return "macro-f1";
    case MetricKind::WeightedF1: return "weighted-f1";
    case MetricKind::PositiveF1: return "positive-f1";
  }
  throw ConfigError("bad metric kind");
}

// PositiveF1 scores class index 1, the conventional positive class.
inline double evaluate_metric(const std::vector<std::size_t>& truths,
                              const std::vector<std::size_t>& predictions, std::size_t k,
                              MetricKind kind) {
  ClassificationReport rep = classification_report(confusion_from(truths, predictions, k));
  switch (kind) {
    case MetricKind::Accuracy: return rep.accuracy;
    case MetricKind::MacroF1: return rep.macro_f1;
    case MetricKind::WeightedF1: return rep.weighted_f1;
    case MetricKind::PositiveF1: return rep.per_class.at(1).f1;
  }
  throw ConfigError("bad metric kind");
}

struct CategoryError {
  std::uint64_t n = 0;
  std::uint64_t errors = 0;
  double rate() const { return safe_ratio(errors, n); }
};

// Error rate per category. Categories with no samples are absent from the
// result rather than reported as zero.
inline std::map<int, CategoryError> per_category_error(
    const std::vector<std::pair<int, bool>>& category_and_correct) {
  std::map<int, CategoryError> out;
  for (const auto& [category, correct] : category_and_correct) {
    auto& e = out[category];
    ++e.n;
    if (!correct) ++e.errors;
  }
  return out;
}

// Thread-safe counter of backend calls, keyed by stage or method name.
class CallLedger {
public:
  void increment(const std::string& key, std::uint64_t n = 1) {
    std::lock_guard<std::mutex> lock(mu_);
    counts_[key] += n;
  }
  std::uint64_t count(const std::string& key) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = counts_.find(key);
    return it == counts_.end() ? 0 : it->second;
  }
  std::map<std::string, std::uint64_t> snapshot() const {
    std::lock_guard<std::mutex> lock(mu_);
    return counts_;
  }

private:
  mutable std::mutex mu_;
  std::map<std::string, std::uint64_t> counts_;
};

// Verifies the per-sample call budget for a finished cold-cache run:
// base and mctd cost one call per sample, mid and mrid cost three (the full
// scenario probe), mme-jd costs between one and three expert calls.
inline bool overhead_check(const CallLedger& ledger, const std::string& method,
                           std::uint64_t n_samples) {
  std::uint64_t c = ledger.count(method);
  if (method == "base" || method == "mctd") return c == n_samples;
  if (method == "mid" || method == "mrid") return c == 3 * n_samples;
  if (method == "mme-jd") return c >= n_samples && c <= 3 * n_samples;
  throw ConfigError("overhead_check: unknown method '" + method + "'");
}

}  // namespace mmdebias
