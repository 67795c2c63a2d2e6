#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmdebias/core.hpp"
#include "mmdebias/errors.hpp"

namespace mmdebias {

// The three probe outputs per sample: the full input, the text context with
// the image blanked, and the image context with the text blanked. All three
// share one class space.
struct ScenarioOutputs {
  ProbVector p_full;        // both modalities intact
  ProbVector p_text_only;   // spurious text, image masked
  ProbVector p_image_only;  // spurious image, text masked

  std::size_t k() const { return p_full.k(); }
  bool complete() const {
    return p_full.k() > 0 && p_full.k() == p_text_only.k() && p_full.k() == p_image_only.k();
  }
};

inline void check_scenario(const ScenarioOutputs& s) {
  if (!s.complete()) throw ShapeError("scenario outputs incomplete or length-mismatched");
}

// Correction strengths. alpha scales the image-context term, beta the text
// context term. per_category carries the strengths used when a router picks
// a debias category; keys must stay within {1, 2, 3}.
struct WeightSet {
  double alpha = 0.0;
  double beta = 0.0;
  double lower = 0.0;
  double upper = 1.0;
  std::map<int, std::pair<double, double>> per_category;

  void validate() const {
    if (!(lower < upper)) throw ConfigError("weight bounds: lower must be below upper");
    auto in_bounds = [&](double v) { return v >= lower && v <= upper; };
    if (!in_bounds(alpha) || !in_bounds(beta))
      throw ConfigError("weight outside configured bounds");
    for (const auto& [c, ab] : per_category) {
      if (c < 1 || c > 3) throw ConfigError("per-category weight key must be 1, 2 or 3");
      if (!in_bounds(ab.first) || !in_bounds(ab.second))
        throw ConfigError("per-category weight outside configured bounds");
    }
  }
};

// Elementwise difference of two score vectors over the same class space.
inline std::vector<double> diff_effect(const ProbVector& a, const ProbVector& b) {
  if (a.k() == 0 || a.k() != b.k()) throw ShapeError("diff_effect: length mismatch");
  check_finite(a.scores, "diff_effect");
  check_finite(b.scores, "diff_effect");
  std::vector<double> out(a.k());
  for (std::size_t i = 0; i < a.k(); ++i) out[i] = a.scores[i] - b.scores[i];
  return out;
}

// Total, direct and mediated effect of the input against a reference input.
// total = direct + mediated holds by construction.
struct EffectTriple {
  std::vector<double> total;
  std::vector<double> direct;
  std::vector<double> mediated;
};

// factual: outputs under the real input. reference: outputs under the blanked
// input. direct_arm: outputs when only the direct path carries the real input
// while the mediator stays at its reference value.
inline EffectTriple effect_triple(const ProbVector& factual, const ProbVector& direct_arm,
                                  const ProbVector& reference) {
  EffectTriple e;
  e.total = diff_effect(factual, reference);
  e.direct = diff_effect(direct_arm, reference);
  e.mediated.resize(e.total.size());
  for (std::size_t i = 0; i < e.total.size(); ++i) e.mediated[i] = e.total[i] - e.direct[i];
  return e;
}

// Subtracts the single-context predictions from the full prediction:
//   corrected = p_full - alpha * p_image_only - beta * p_text_only
// The result is a raw score vector; it is not renormalized here because
// decisions take an argmax and renormalizing would not change it.
inline ProbVector mid_correct(const ScenarioOutputs& s, const WeightSet& w) {
  check_scenario(s);
  std::vector<double> out(s.k());
  for (std::size_t i = 0; i < s.k(); ++i)
    out[i] = s.p_full.scores[i] - w.alpha * s.p_image_only.scores[i] -
             w.beta * s.p_text_only.scores[i];
  check_finite(out, "mid_correct");
  return ProbVector(std::move(out), false);
}

inline std::pair<double, double> category_weights(const WeightSet& w, int category) {
  auto it = w.per_category.find(category);
  if (it == w.per_category.end())
    throw ConfigError("missing per-category weights for category " +
                      std::to_string(category));
  return it->second;
}

// Routed correction: each category removes only the context it distrusts.
//   c=0: p_full unchanged          c=1: subtract alpha_1 * image context
//   c=2: subtract beta_2 * text    c=3: subtract both with category-3 weights
inline ProbVector mrid_correct(const ScenarioOutputs& s, int category, const WeightSet& w) {
  check_scenario(s);
  if (category < 0 || category > 3)
    throw RoutingError("mrid_correct: category out of range: " + std::to_string(category));
  if (category == 0) return s.p_full;
  std::vector<double> out(s.p_full.scores);
  if (category == 1) {
    double a1 = category_weights(w, 1).first;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= a1 * s.p_image_only.scores[i];
  } else if (category == 2) {
    double b2 = category_weights(w, 2).second;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b2 * s.p_text_only.scores[i];
  } else {
    auto [a3, b3] = category_weights(w, 3);
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] -= a3 * s.p_image_only.scores[i] + b3 * s.p_text_only.scores[i];
  }
  check_finite(out, "mrid_correct");
  return ProbVector(std::move(out), false);
}

// Routed expert combination. Unlike the correction above, expert outputs are
// added: the general expert is always present and the debias experts join in
// for their categories.
//   c=0: p_ge                        c=1: p_ge + alpha_1 * p_ide
//   c=2: p_ge + beta_2 * p_tde       c=3: p_ge + alpha_3*p_ide + beta_3*p_tde
inline ProbVector moe_combine(const ProbVector& p_ge, const std::optional<ProbVector>& p_ide,
                              const std::optional<ProbVector>& p_tde, int category,
                              const WeightSet& w) {
  if (p_ge.k() == 0) throw ShapeError("moe_combine: empty general expert output");
  if (category < 0 || category > 3)
    throw RoutingError("moe_combine: category out of range: " + std::to_string(category));
  check_finite(p_ge.scores, "moe_combine");
  auto need = [&](const std::optional<ProbVector>& p, const char* name) -> const ProbVector& {
    if (!p) throw RoutingError(std::string("moe_combine: missing ") + name +
                               " output for category " + std::to_string(category));
    if (p->k() != p_ge.k()) throw ShapeError("moe_combine: expert output length mismatch");
    check_finite(p->scores, "moe_combine");
    return *p;
  };
  if (category == 0) return p_ge;
  std::vector<double> out(p_ge.scores);
  if (category == 1) {
    const ProbVector& ide = need(p_ide, "image-debias expert");
    double a1 = category_weights(w, 1).first;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += a1 * ide.scores[i];
  } else if (category == 2) {
    const ProbVector& tde = need(p_tde, "text-debias expert");
    double b2 = category_weights(w, 2).second;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b2 * tde.scores[i];
  } else {
    const ProbVector& ide = need(p_ide, "image-debias expert");
    const ProbVector& tde = need(p_tde, "text-debias expert");
    auto [a3, b3] = category_weights(w, 3);
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] += a3 * ide.scores[i] + b3 * tde.scores[i];
  }
  return ProbVector(std::move(out), false);
}

// Cross entropy of the renormalized corrected scores against the gold label.
inline double bias_removed_loss(const ScenarioOutputs& s, const WeightSet& w, std::size_t y) {
  check_scenario(s);
  if (y >= s.k()) throw IndexError("bias_removed_loss: label out of range");
  ProbVector q = normalize(mid_correct(s, w));
  double p = q.scores[y];
  if (!(p > 0.0) || !std::isfinite(p)) throw NumericError("bias_removed_loss: degenerate probability");
  return -std::log(p);
}

}  // namespace mmdebias
