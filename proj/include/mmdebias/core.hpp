#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmdebias/errors.hpp"

namespace mmdebias {

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// Stable sub-seed derivation so independent stages never share an RNG stream.
inline std::uint64_t derive_seed(std::uint64_t base, const std::string& tag) {
  std::uint64_t h = fnv1a64(tag);
  return fnv1a64(&base, sizeof(base), h);
}

// Ordered set of class names. The order comes from the dataset manifest and is
// never sorted; class indices must stay stable across cached predictions.
class ClassSpace {
public:
  explicit ClassSpace(std::vector<std::string> labels) : labels_(std::move(labels)) {
    if (labels_.size() < 2) throw ConfigError("class space needs at least 2 labels");
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (labels_[i].empty()) throw ConfigError("empty class label");
      for (std::size_t j = i + 1; j < labels_.size(); ++j)
        if (labels_[i] == labels_[j]) throw ConfigError("duplicate class label: " + labels_[i]);
    }
  }
  std::size_t k() const { return labels_.size(); }
  const std::vector<std::string>& labels() const { return labels_; }
  const std::string& label(std::size_t i) const {
    if (i >= labels_.size()) throw IndexError("class index out of range");
    return labels_[i];
  }
  std::optional<std::size_t> index_of(const std::string& label) const {
    for (std::size_t i = 0; i < labels_.size(); ++i)
      if (labels_[i] == label) return i;
    return std::nullopt;
  }

private:
  std::vector<std::string> labels_;
};

// Length-K score vector. normalized=true marks a probability distribution;
// normalized=false carries raw scores, which may be negative after correction.
struct ProbVector {
  std::vector<double> scores;
  bool normalized = false;

  ProbVector() = default;
  explicit ProbVector(std::vector<double> s, bool is_normalized = false)
      : scores(std::move(s)), normalized(is_normalized) {}
  std::size_t k() const { return scores.size(); }
};

inline void check_finite(const std::vector<double>& v, const char* where) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(where) + ": non-finite value");
}

// Softmax over raw scores. Distributions pass through unchanged, so applying
// this twice equals applying it once.
inline ProbVector normalize(const ProbVector& p) {
  if (p.scores.empty()) throw ShapeError("normalize: empty score vector");
  check_finite(p.scores, "normalize");
  if (p.normalized) return p;
  double mx = *std::max_element(p.scores.begin(), p.scores.end());
  std::vector<double> out(p.scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.scores.size(); ++i) {
    out[i] = std::exp(p.scores[i] - mx);
    sum += out[i];
  }
  if (!(sum > 0.0) || !std::isfinite(sum)) throw NumericError("normalize: degenerate sum");
  for (double& x : out) x /= sum;
  return ProbVector(std::move(out), true);
}

// Index of the maximal score; ties resolve to the lowest index.
inline std::size_t arg_top(const ProbVector& p) {
  if (p.scores.empty()) throw ShapeError("arg_top: empty score vector");
  check_finite(p.scores, "arg_top");
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.scores.size(); ++i)
    if (p.scores[i] > p.scores[best]) best = i;
  return best;
}

struct Sample {
  std::string id;
  std::string text;                       // may be empty for image-only samples
  std::optional<std::string> image_path;  // absent when the modality is missing
  std::optional<std::size_t> label;
};

// One modality realization per channel. Masked is the fully blanked
// placeholder input; SpuriousOnly swaps in the counterfactual asset with the
// semantic content removed.
enum class Variant { Original, SpuriousOnly, Masked };

inline char variant_code(Variant v) {
  switch (v) {
    case Variant::Original: return 'O';
    case Variant::SpuriousOnly: return 'S';
    case Variant::Masked: return 'M';
  }
  throw ConfigError("variant_code: bad variant");
}

inline Variant variant_from_code(const std::string& c) {
  if (c == "O" || c == "original") return Variant::Original;
  if (c == "S" || c == "spurious") return Variant::SpuriousOnly;
  if (c == "M" || c == "masked") return Variant::Masked;
  throw ParseError("unknown variant code: " + c);
}

// A read-only way of looking at a sample. Construction never mutates the
// underlying Sample; counterfactual content rides along as resolved fields.
struct SampleView {
  const Sample* base = nullptr;
  Variant text_variant = Variant::Original;
  Variant image_variant = Variant::Original;
  std::string spurious_text;         // set when text_variant == SpuriousOnly
  std::string spurious_image_path;   // set when image_variant == SpuriousOnly
  double image_mask_coverage = 0.0;  // mean mask alpha, when known

  const std::string& sample_id() const {
    static const std::string empty;
    return base ? base->id : empty;
  }

  // Content identity for cache keys: variants plus counterfactual payloads.
  std::string fingerprint() const {
    std::string s;
    s += "t=";
    s += variant_code(text_variant);
    s += ";i=";
    s += variant_code(image_variant);
    if (text_variant == Variant::SpuriousOnly) s += ";st=" + hex64(fnv1a64(spurious_text));
    if (image_variant == Variant::SpuriousOnly) s += ";si=" + hex64(fnv1a64(spurious_image_path));
    return s;
  }
};

inline SampleView original_view(const Sample& s) {
  SampleView v;
  v.base = &s;
  return v;
}

}  // namespace mmdebias
