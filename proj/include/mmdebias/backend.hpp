#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <utility>
#include <vector>

#include "mmdebias/core.hpp"
#include "mmdebias/datasets.hpp"
#include "mmdebias/errors.hpp"
#include "mmdebias/io.hpp"
#include "mmdebias/metrics.hpp"
#include "mmdebias/synthetic.hpp"

namespace mmdebias {

// A prediction source. predict must be deterministic: two calls on the same
// view return identical vectors. Implementations are safe for concurrent
// calls.
class Predictor {
public:
  virtual ~Predictor() = default;
  virtual const std::string& id() const = 0;
  virtual const ClassSpace& class_space() const = 0;
  virtual ProbVector predict(const SampleView& view) const = 0;
};

inline const std::string& view_text(const SampleView& view) {
  static const std::string empty;
  switch (view.text_variant) {
    case Variant::Original: return view.base ? view.base->text : empty;
    case Variant::SpuriousOnly: return view.spurious_text;
    case Variant::Masked: return empty;
  }
  return empty;
}

namespace detail {

inline std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Parses the synthetic token syntax "<prefix><slot>c<class>" with prefix in
// {ts, tu, is, iu}. Returns false for anything else (mask tokens, real words).
struct SynthToken {
  char modality = 0;  // 't' or 'i'
  bool semantic = false;
  std::size_t cls = 0;
};

inline bool parse_synth_token(const std::string& tok, SynthToken& out) {
  if (tok.size() < 4) return false;
  char m = tok[0], r = tok[1];
  if ((m != 't' && m != 'i') || (r != 's' && r != 'u')) return false;
  std::size_t i = 2;
  std::size_t digits = 0;
  while (i < tok.size() && tok[i] >= '0' && tok[i] <= '9') {
    ++i;
    ++digits;
  }
  if (digits == 0 || i >= tok.size() || tok[i] != 'c') return false;
  ++i;
  if (i >= tok.size()) return false;
  std::size_t cls = 0;
  for (; i < tok.size(); ++i) {
    if (tok[i] < '0' || tok[i] > '9') return false;
    cls = cls * 10 + static_cast<std::size_t>(tok[i] - '0');
  }
  out.modality = m;
  out.semantic = (r == 's');
  out.cls = cls;
  return true;
}

}  // namespace detail

// Closed-form logistic oracle over planted tokens. The logit of class c sums
// the class-c token counts the view exposes, weighted per modality and role;
// spurious terms are additionally scaled by bias_strength. Because the text
// is re-parsed from the view, masked counterfactual text genuinely removes
// the semantic evidence.
class SyntheticModel : public Predictor {
public:
  SyntheticModel(ClassSpace cs, SyntheticFeatureTable table, SyntheticModelParams params)
      : class_space_(std::move(cs)), table_(std::move(table)), params_(std::move(params)) {
    if (params_.prior_logits.empty()) params_.prior_logits.assign(class_space_.k(), 0.0);
    if (params_.prior_logits.size() != class_space_.k())
      throw ConfigError("synthetic model: prior length mismatch");
    std::string sig = std::to_string(params_.w_sem_text) + "," + std::to_string(params_.w_spu_text) +
                      "," + std::to_string(params_.w_sem_img) + "," +
                      std::to_string(params_.w_spu_img) + "," + std::to_string(params_.bias_strength);
    id_ = "synthetic-oracle:" + hex64(fnv1a64(sig));
  }

  const std::string& id() const override { return id_; }
  const ClassSpace& class_space() const override { return class_space_; }

  ProbVector predict(const SampleView& view) const override {
    std::size_t k = class_space_.k();
    std::vector<double> logits = params_.prior_logits;

    for (const auto& tok : detail::split_tokens(view_text(view))) {
      detail::SynthToken st;
      if (!detail::parse_synth_token(tok, st) || st.modality != 't') continue;
      if (st.cls >= k) continue;
      logits[st.cls] += st.semantic ? params_.w_sem_text
                                    : params_.bias_strength * params_.w_spu_text;
    }

    if (view.image_variant != Variant::Masked && view.base) {
      const SyntheticFeatures* f = table_.find(view.base->id);
      if (f) {
        if (view.image_variant == Variant::Original)
          for (const auto& tok : f->img_sem) {
            detail::SynthToken st;
            if (detail::parse_synth_token(tok, st) && st.cls < k)
              logits[st.cls] += params_.w_sem_img;
          }
        for (const auto& tok : f->img_spu) {
          detail::SynthToken st;
          if (detail::parse_synth_token(tok, st) && st.cls < k)
            logits[st.cls] += params_.bias_strength * params_.w_spu_img;
        }
      }
    }
    return normalize(ProbVector(std::move(logits), false));
  }

private:
  ClassSpace class_space_;
  SyntheticFeatureTable table_;
  SyntheticModelParams params_;
  std::string id_;
};

// Linear softmax classifier over a bag-of-tokens view encoding. Stands in for
// the paper-scale fine-tuned experts; the training losses are exercised for
// real, just on a model small enough for tests.
class ToyExpert : public Predictor {
public:
  ToyExpert(std::string role, ClassSpace cs, std::vector<std::string> vocab,
            std::shared_ptr<const SyntheticFeatureTable> table)
      : role_(std::move(role)),
        class_space_(std::move(cs)),
        vocab_(std::move(vocab)),
        table_(std::move(table)),
        weights_(class_space_.k() * (vocab_.size() + 1), 0.0) {
    for (std::size_t i = 0; i < vocab_.size(); ++i) vocab_index_[vocab_[i]] = i;
    refresh_id();
  }

  const std::string& id() const override { return id_; }
  const ClassSpace& class_space() const override { return class_space_; }
  const std::string& role() const { return role_; }
  const std::vector<std::string>& vocab() const { return vocab_; }
  std::vector<double>& weights() { return weights_; }
  const std::vector<double>& weights() const { return weights_; }
  void refresh_id() {
    id_ = "toy:" + role_ + ":" +
          hex64(fnv1a64(weights_.data(), weights_.size() * sizeof(double)));
  }

  // Bag of token counts plus a trailing constant 1 for the bias column.
  std::vector<double> featurize(const std::string& text, const std::string& sample_id,
                                Variant image_variant) const {
    std::vector<double> x(vocab_.size() + 1, 0.0);
    x.back() = 1.0;
    for (const auto& tok : detail::split_tokens(text)) {
      auto it = vocab_index_.find(tok);
      if (it != vocab_index_.end()) x[it->second] += 1.0;
    }
    if (image_variant != Variant::Masked && table_) {
      const SyntheticFeatures* f = table_->find(sample_id);
      if (f) {
        if (image_variant == Variant::Original)
          for (const auto& tok : f->img_sem) {
            auto it = vocab_index_.find(tok);
            if (it != vocab_index_.end()) x[it->second] += 1.0;
          }
        for (const auto& tok : f->img_spu) {
          auto it = vocab_index_.find(tok);
          if (it != vocab_index_.end()) x[it->second] += 1.0;
        }
      }
    }
    return x;
  }

  ProbVector predict_features(const std::vector<double>& x) const {
    std::size_t k = class_space_.k();
    std::size_t d = vocab_.size() + 1;
    if (x.size() != d) throw ShapeError("toy expert: feature length mismatch");
    std::vector<double> logits(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
      const double* row = weights_.data() + c * d;
      double z = 0.0;
      for (std::size_t j = 0; j < d; ++j) z += row[j] * x[j];
      logits[c] = z;
    }
    return normalize(ProbVector(std::move(logits), false));
  }

  ProbVector predict(const SampleView& view) const override {
    return predict_features(featurize(view_text(view), view.sample_id(), view.image_variant));
  }

private:
  std::string role_;
  ClassSpace class_space_;
  std::vector<std::string> vocab_;
  std::map<std::string, std::size_t> vocab_index_;
  std::shared_ptr<const SyntheticFeatureTable> table_;
  std::vector<double> weights_;
  std::string id_;
};

struct ExpertTrainConfig {
  std::size_t epochs = 200;
  double learning_rate = 0.5;
  std::uint64_t seed = 0;  // recorded; training itself is deterministic
};

struct ExpertTrainResult {
  std::shared_ptr<ToyExpert> expert;
  std::vector<double> losses;  // mean cross entropy per epoch
  std::vector<std::string> warnings;
};

inline std::vector<std::string> expert_vocabulary(const EmittedTrainingSet& set,
                                                  const SyntheticFeatureTable& table) {
  std::set<std::string> tokens;
  for (const auto& r : set.records)
    for (const auto& t : detail::split_tokens(r.text)) tokens.insert(t);
  for (const auto& [id, f] : table.rows()) {
    for (const auto& t : f.img_sem) tokens.insert(t);
    for (const auto& t : f.img_spu) tokens.insert(t);
  }
  return std::vector<std::string>(tokens.begin(), tokens.end());
}

// Full-batch gradient descent on mean cross entropy. Deterministic: zero
// initialization, fixed order, no sampling. Zero epochs leaves the uniform
// predictor. A debias role without any counterfactual records trains on the
// originals alone and reports the fallback.
inline ExpertTrainResult train_toy_expert(const std::string& role, const EmittedTrainingSet& set,
                                          const ClassSpace& cs,
                                          std::shared_ptr<const SyntheticFeatureTable> table,
                                          const ExpertTrainConfig& cfg = {}) {
  if (set.records.empty()) throw DataError("train_toy_expert: empty training set");
  ExpertTrainResult res;
  if (role != "ge") {
    bool has_cf = false;
    for (const auto& r : set.records)
      if (r.text_variant != Variant::Original || r.image_variant != Variant::Original) {
        has_cf = true;
        break;
      }
    if (!has_cf)
      res.warnings.push_back("role '" + role +
                             "' has no counterfactual records; behaves like the general expert");
  }

  auto expert = std::make_shared<ToyExpert>(
      role, cs, expert_vocabulary(set, table ? *table : SyntheticFeatureTable()), table);
  std::size_t k = cs.k();
  std::size_t d = expert->vocab().size() + 1;
  std::size_t n = set.records.size();

  std::vector<std::vector<double>> xs;
  xs.reserve(n);
  for (const auto& r : set.records) {
    if (r.target >= k) throw DataError("train_toy_expert: target out of range");
    xs.push_back(expert->featurize(r.text, r.sample_id, r.image_variant));
  }

  std::vector<double>& w = expert->weights();
  std::vector<double> grad(w.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<double>& x = xs[i];
      std::vector<double> logits(k, 0.0);
      for (std::size_t c = 0; c < k; ++c) {
        const double* row = w.data() + c * d;
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) z += row[j] * x[j];
        logits[c] = z;
      }
      ProbVector p = normalize(ProbVector(std::move(logits), false));
      std::size_t y = set.records[i].target;
      loss += -std::log(std::max(p.scores[y], 1e-300));
      for (std::size_t c = 0; c < k; ++c) {
        double coeff = p.scores[c] - (c == y ? 1.0 : 0.0);
        double* g = grad.data() + c * d;
        for (std::size_t j = 0; j < d; ++j) g[j] += coeff * x[j];
      }
    }
    double scale = cfg.learning_rate / static_cast<double>(n);
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= scale * grad[j];
    res.losses.push_back(loss / static_cast<double>(n));
  }
  expert->refresh_id();
  res.expert = std::move(expert);
  return res;
}

inline void save_toy_expert(const std::filesystem::path& path, const ToyExpert& e) {
  json j;
  j["schema"] = "toy-expert/1";
  j["role"] = e.role();
  j["labels"] = e.class_space().labels();
  j["vocab"] = e.vocab();
  j["weights"] = e.weights();
  write_text_file(path, j.dump() + "\n");
}

inline std::shared_ptr<ToyExpert> load_toy_expert(
    const std::filesystem::path& path, std::shared_ptr<const SyntheticFeatureTable> table) {
  json j = parse_json(read_text_file(path), path.string());
  if (j.value("schema", std::string()) != "toy-expert/1")
    throw SchemaError(path.string() + ": not a toy expert file");
  auto labels = require_field<std::vector<std::string>>(j, "labels", path.string());
  auto vocab = require_field<std::vector<std::string>>(j, "vocab", path.string());
  auto weights = require_field<std::vector<double>>(j, "weights", path.string());
  auto expert = std::make_shared<ToyExpert>(require_field<std::string>(j, "role", path.string()),
                                            ClassSpace(labels), vocab, std::move(table));
  if (weights.size() != expert->weights().size())
    throw SchemaError(path.string() + ": weight count mismatch");
  expert->weights() = weights;
  expert->refresh_id();
  return expert;
}

struct CacheKey {
  std::string predictor_id;
  std::string sample_id;
  std::string view_fingerprint;
  std::string prompt_version;

  std::string composed() const {
    return predictor_id + "\x1f" + sample_id + "\x1f" + view_fingerprint + "\x1f" +
           prompt_version;
  }
};

// Append-only prediction store. Entries are written as they arrive, so an
// interrupted run keeps everything it already paid for. Concurrent readers
// share the map; writers serialize.
class PredictionCache {
public:
  explicit PredictionCache(std::filesystem::path path) : path_(std::move(path)) {
    namespace fs = std::filesystem;
    if (fs::exists(path_)) {
      LineRecordFile f = read_line_records(path_, "prediction-cache");
      for (const auto& j : f.records) {
        CacheKey key;
        key.predictor_id = require_field<std::string>(j, "predictor", path_.string());
        key.sample_id = require_field<std::string>(j, "sample", path_.string());
        key.view_fingerprint = require_field<std::string>(j, "view", path_.string());
        key.prompt_version = require_field<std::string>(j, "prompt", path_.string());
        ProbVector p(require_field<std::vector<double>>(j, "scores", path_.string()),
                     j.value("normalized", true));
        entries_[key.composed()] = std::move(p);
      }
    } else {
      if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
      std::ofstream out(path_, std::ios::binary | std::ios::trunc);
      json header;
      header["schema"] = "prediction-cache/1";
      out << header.dump() << "\n";
    }
    appender_.open(path_, std::ios::binary | std::ios::app);
    if (!appender_) throw DataError("cannot open cache for append: " + path_.string());
  }

  std::optional<ProbVector> get(const CacheKey& key) const {
    std::shared_lock lock(mu_);
    auto it = entries_.find(key.composed());
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const CacheKey& key, const ProbVector& value) {
    std::unique_lock lock(mu_);
    std::string composed = key.composed();
    if (entries_.count(composed)) return;
    entries_[composed] = value;
    json j;
    j["key"] = hex64(fnv1a64(composed));
    j["predictor"] = key.predictor_id;
    j["sample"] = key.sample_id;
    j["view"] = key.view_fingerprint;
    j["prompt"] = key.prompt_version;
    j["scores"] = value.scores;
    j["normalized"] = value.normalized;
    appender_ << j.dump() << "\n";
    appender_.flush();
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return entries_.size();
  }

private:
  std::filesystem::path path_;
  mutable std::shared_mutex mu_;
  std::map<std::string, ProbVector> entries_;
  std::ofstream appender_;
};

// Cache-aware prediction. The ledger counts only fresh backend work, keyed by
// the stage or method name the caller is accounting under.
inline ProbVector cached_predict(const Predictor& predictor, const SampleView& view,
                                 PredictionCache* cache, CallLedger* ledger,
                                 const std::string& ledger_key,
                                 const std::string& prompt_version = "v1") {
  CacheKey key{predictor.id(), view.sample_id(), view.fingerprint(), prompt_version};
  if (cache) {
    if (auto hit = cache->get(key)) return *hit;
  }
  ProbVector fresh = predictor.predict(view);
  if (ledger) ledger->increment(ledger_key);
  if (cache) cache->put(key, fresh);
  return fresh;
}

}  // namespace mmdebias
