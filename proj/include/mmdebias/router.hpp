#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmdebias/core.hpp"
#include "mmdebias/errors.hpp"
#include "mmdebias/io.hpp"
#include "mmdebias/mediation.hpp"
#include "mmdebias/metrics.hpp"

namespace mmdebias {

// Cheap per-sample statistics that do not require another backend call.
struct ViewStats {
  double text_tokens = 0.0;      // whitespace token count of the original text
  double masked_fraction = 0.0;  // fraction of tokens masked in the counterfactual
  double mask_coverage = 0.0;    // mean alpha of the image mask, 0 when unknown
};

struct RouterFeatures {
  std::vector<double> v;
  std::string schema_id;
};

inline std::string router_feature_schema(std::size_t k) {
  return "router-features/1:k=" + std::to_string(k);
}

// Feature layout, with K the class count:
//   [0,K)    p0        full-input probabilities
//   [K,2K)   pt        text-context-only probabilities
//   [2K,3K)  pi        image-context-only probabilities
//   [3K,4K)  p0 - pt
//   [4K,5K)  p0 - pi
//   [5K]     log(1 + text token count)
//   [5K+1]   masked token fraction
//   [5K+2]   image mask coverage
// Dimension 5K + 3 (13 for binary tasks).
inline RouterFeatures featurize(const ScenarioOutputs& s, const ViewStats& stats) {
  check_scenario(s);
  std::size_t k = s.k();
  RouterFeatures f;
  f.schema_id = router_feature_schema(k);
  f.v.reserve(5 * k + 3);
  for (double x : s.p_full.scores) f.v.push_back(x);
  for (double x : s.p_text_only.scores) f.v.push_back(x);
  for (double x : s.p_image_only.scores) f.v.push_back(x);
  for (std::size_t i = 0; i < k; ++i)
    f.v.push_back(s.p_full.scores[i] - s.p_text_only.scores[i]);
  for (std::size_t i = 0; i < k; ++i)
    f.v.push_back(s.p_full.scores[i] - s.p_image_only.scores[i]);
  f.v.push_back(std::log1p(std::max(0.0, stats.text_tokens)));
  f.v.push_back(stats.masked_fraction);
  f.v.push_back(stats.mask_coverage);
  check_finite(f.v, "featurize");
  return f;
}

// Multinomial logistic regression over the four debias categories.
struct RouterModel {
  std::string schema_id;
  std::size_t dim = 0;
  std::vector<double> weights;  // 4 rows of (dim + 1), bias last
  std::uint64_t seed = 0;
  std::size_t epochs_trained = 0;
  std::size_t best_epoch = 0;
  double selection_score = 0.0;
  bool degenerate = false;

  static constexpr std::size_t kCategories = 4;

  std::vector<double> scores(const RouterFeatures& f) const {
    if (f.schema_id != schema_id)
      throw SchemaError("router: feature schema '" + f.schema_id + "' does not match model '" +
                        schema_id + "'");
    if (f.v.size() != dim) throw ShapeError("router: feature dimension mismatch");
    std::vector<double> out(kCategories, 0.0);
    for (std::size_t c = 0; c < kCategories; ++c) {
      const double* row = weights.data() + c * (dim + 1);
      double z = row[dim];
      for (std::size_t j = 0; j < dim; ++j) z += row[j] * f.v[j];
      out[c] = z;
    }
    return out;
  }
};

// Lowest index wins ties, so the zero model routes everything to category 0.
inline int route(const RouterModel& model, const RouterFeatures& f) {
  std::vector<double> s = model.scores(f);
  std::size_t best = 0;
  for (std::size_t c = 1; c < s.size(); ++c)
    if (s[c] > s[best]) best = c;
  return static_cast<int>(best);
}

struct RouterTrainConfig {
  std::size_t epochs = 300;
  double learning_rate = 0.5;
  std::uint64_t seed = 0;        // recorded; training is deterministic
  bool class_weighted = false;   // scale gradients inversely to class frequency
};

struct RouterEvaluation {
  ConfusionMatrix confusion{RouterModel::kCategories};
  std::vector<double> f_half;  // F-0.5 per category
  double mean_f_half_debias = 0.0;  // mean over categories 1..3
};

namespace detail {

inline RouterEvaluation evaluate_routing(const std::vector<int>& predicted,
                                         const std::vector<int>& truth) {
  RouterEvaluation ev;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    ev.confusion.add(static_cast<std::size_t>(truth[i]),
                     static_cast<std::size_t>(predicted[i]));
  if (ev.confusion.total() == 0) throw EmptyEvaluationError("router evaluation: no samples");
  for (std::size_t c = 0; c < RouterModel::kCategories; ++c) {
    double precision = safe_ratio(ev.confusion.at(c, c), ev.confusion.col_sum(c));
    double recall = safe_ratio(ev.confusion.at(c, c), ev.confusion.row_sum(c));
    ev.f_half.push_back(f_beta(precision, recall, 0.5));
  }
  ev.mean_f_half_debias = (ev.f_half[1] + ev.f_half[2] + ev.f_half[3]) / 3.0;
  return ev;
}

}  // namespace detail

struct RouterTrainResult {
  RouterModel model;
  std::vector<double> losses;  // mean cross entropy per epoch
  std::vector<std::string> warnings;
};

// Full-batch gradient descent with model selection: after each epoch the
// candidate weights are scored on the validation pairs by mean F-0.5 over the
// three debias categories, and the best-scoring epoch's weights are kept.
// Without validation data the training pairs themselves are scored. Training
// order is fixed and initialization is zero, so a rerun with the same inputs
// reproduces the weights bit for bit.
inline RouterTrainResult train_router(const std::vector<RouterFeatures>& features,
                                      const std::vector<int>& labels,
                                      const std::vector<RouterFeatures>& valid_features,
                                      const std::vector<int>& valid_labels,
                                      const RouterTrainConfig& cfg = {}) {
  if (features.empty()) throw DataError("train_router: empty training set");
  if (features.size() != labels.size())
    throw ShapeError("train_router: feature/label count mismatch");
  if (valid_features.size() != valid_labels.size())
    throw ShapeError("train_router: validation feature/label count mismatch");

  const std::string schema = features[0].schema_id;
  std::size_t dim = features[0].v.size();
  for (const auto& f : features)
    if (f.schema_id != schema || f.v.size() != dim)
      throw SchemaError("train_router: inconsistent feature schema");
  for (const auto& f : valid_features)
    if (f.schema_id != schema || f.v.size() != dim)
      throw SchemaError("train_router: validation feature schema mismatch");

  constexpr std::size_t kC = RouterModel::kCategories;
  std::vector<std::uint64_t> class_counts(kC, 0);
  for (int y : labels) {
    if (y < 0 || y >= static_cast<int>(kC)) throw DataError("train_router: label out of range");
    ++class_counts[static_cast<std::size_t>(y)];
  }
  for (int y : valid_labels)
    if (y < 0 || y >= static_cast<int>(kC))
      throw DataError("train_router: validation label out of range");

  RouterTrainResult res;
  res.model.schema_id = schema;
  res.model.dim = dim;
  res.model.seed = cfg.seed;
  res.model.weights.assign(kC * (dim + 1), 0.0);

  std::size_t distinct = 0;
  for (auto c : class_counts)
    if (c > 0) ++distinct;
  if (distinct < 2) {
    std::size_t only = 0;
    for (std::size_t c = 0; c < kC; ++c)
      if (class_counts[c] > 0) only = c;
    res.model.weights[only * (dim + 1) + dim] = 1.0;
    res.model.degenerate = true;
    res.warnings.push_back("train_router: single-class training set, degenerate model");
    return res;
  }

  std::vector<double> sample_weight(labels.size(), 1.0);
  if (cfg.class_weighted) {
    double total = static_cast<double>(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto y = static_cast<std::size_t>(labels[i]);
      sample_weight[i] = total / (static_cast<double>(kC) *
                                  static_cast<double>(std::max<std::uint64_t>(1, class_counts[y])));
    }
  }

  const std::vector<RouterFeatures>& sel_features =
      valid_features.empty() ? features : valid_features;
  const std::vector<int>& sel_labels = valid_labels.empty() ? labels : valid_labels;

  auto selection_score = [&](const RouterModel& m) {
    std::vector<int> pred;
    pred.reserve(sel_features.size());
    for (const auto& f : sel_features) pred.push_back(route(m, f));
    return detail::evaluate_routing(pred, sel_labels).mean_f_half_debias;
  };

  std::vector<double> best_weights = res.model.weights;
  double best_score = selection_score(res.model);
  std::size_t best_epoch = 0;

  std::size_t n = features.size();
  std::size_t stride = dim + 1;
  std::vector<double> grad(res.model.weights.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    double weight_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<double>& x = features[i].v;
      std::vector<double> z(kC, 0.0);
      for (std::size_t c = 0; c < kC; ++c) {
        const double* row = res.model.weights.data() + c * stride;
        double acc = row[dim];
        for (std::size_t j = 0; j < dim; ++j) acc += row[j] * x[j];
        z[c] = acc;
      }
      ProbVector p = normalize(ProbVector(std::move(z), false));
      auto y = static_cast<std::size_t>(labels[i]);
      double wi = sample_weight[i];
      weight_sum += wi;
      loss += -wi * std::log(std::max(p.scores[y], 1e-300));
      for (std::size_t c = 0; c < kC; ++c) {
        double coeff = wi * (p.scores[c] - (c == y ? 1.0 : 0.0));
        double* g = grad.data() + c * stride;
        for (std::size_t j = 0; j < dim; ++j) g[j] += coeff * x[j];
        g[dim] += coeff;
      }
    }
    double scale = cfg.learning_rate / weight_sum;
    for (std::size_t j = 0; j < res.model.weights.size(); ++j)
      res.model.weights[j] -= scale * grad[j];
    res.losses.push_back(loss / weight_sum);

    double score = selection_score(res.model);
    if (score > best_score) {
      best_score = score;
      best_weights = res.model.weights;
      best_epoch = epoch;
    }
  }

  res.model.weights = std::move(best_weights);
  res.model.epochs_trained = cfg.epochs;
  res.model.best_epoch = best_epoch;
  res.model.selection_score = best_score;
  return res;
}

inline RouterEvaluation evaluate_router(const RouterModel& model,
                                        const std::vector<RouterFeatures>& features,
                                        const std::vector<int>& labels) {
  if (features.size() != labels.size())
    throw ShapeError("evaluate_router: feature/label count mismatch");
  std::vector<int> pred;
  pred.reserve(features.size());
  for (const auto& f : features) pred.push_back(route(model, f));
  return detail::evaluate_routing(pred, labels);
}

inline void save_router(const std::filesystem::path& path, const RouterModel& m) {
  json j;
  j["schema"] = "router-model/1";
  j["feature_schema"] = m.schema_id;
  j["dim"] = m.dim;
  j["weights"] = m.weights;
  json meta;
  meta["seed"] = m.seed;
  meta["epochs_trained"] = m.epochs_trained;
  meta["best_epoch"] = m.best_epoch;
  meta["selection_score"] = m.selection_score;
  meta["degenerate"] = m.degenerate;
  j["metadata"] = meta;
  write_text_file(path, j.dump(2) + "\n");
}

inline RouterModel load_router(const std::filesystem::path& path) {
  json j = parse_json(read_text_file(path), path.string());
  if (j.value("schema", std::string()) != "router-model/1")
    throw SchemaError(path.string() + ": not a router model file");
  RouterModel m;
  m.schema_id = require_field<std::string>(j, "feature_schema", path.string());
  m.dim = require_field<std::size_t>(j, "dim", path.string());
  m.weights = require_field<std::vector<double>>(j, "weights", path.string());
  if (m.weights.size() != RouterModel::kCategories * (m.dim + 1))
    throw SchemaError(path.string() + ": weight count mismatch");
  if (j.contains("metadata")) {
    const json& meta = j["metadata"];
    m.seed = meta.value("seed", 0ull);
    m.epochs_trained = meta.value("epochs_trained", std::size_t{0});
    m.best_epoch = meta.value("best_epoch", std::size_t{0});
    m.selection_score = meta.value("selection_score", 0.0);
    m.degenerate = meta.value("degenerate", false);
  }
  return m;
}

}  // namespace mmdebias
