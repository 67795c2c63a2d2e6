#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mmdebias/core.hpp"
#include "mmdebias/errors.hpp"
#include "mmdebias/io.hpp"
#include "mmdebias/mediation.hpp"
#include "mmdebias/metrics.hpp"

namespace mmdebias {

struct SearchDim {
  std::string name;
  double lower = 0.0;
  double upper = 1.0;
};

struct SearchSpace {
  std::vector<SearchDim> dims;
  std::size_t budget = 50;

  void validate() const {
    if (dims.empty()) throw ConfigError("search space has no dimensions");
    if (budget == 0) throw ConfigError("search budget must be positive");
    for (const auto& d : dims)
      if (!(d.lower < d.upper))
        throw ConfigError("search dimension '" + d.name + "': lower must be below upper");
  }
};

inline SearchSpace weight_space_2d(double lower = 0.0, double upper = 1.0,
                                   std::size_t budget = 50) {
  return SearchSpace{{{"alpha", lower, upper}, {"beta", lower, upper}}, budget};
}

struct TracePoint {
  std::vector<double> x;
  double value = 0.0;
  bool failed = false;
};

struct SearchTrace {
  std::vector<TracePoint> points;
  std::vector<double> best_x;
  double best_value = -std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
};

using Objective = std::function<double(const std::vector<double>&)>;

// Exhaustive lattice evaluation; the reference optimizer. Ties keep the first
// lattice point in iteration order (last dimension fastest).
inline SearchTrace grid_search(const Objective& objective, const SearchSpace& space,
                               std::size_t resolution) {
  space.validate();
  if (resolution < 2) throw ConfigError("grid_search: resolution must be at least 2");
  std::size_t d = space.dims.size();
  double needed = std::pow(static_cast<double>(resolution), static_cast<double>(d));
  if (needed > static_cast<double>(space.budget)) {
    std::string amount = needed < 1e15 ? std::to_string(static_cast<std::uint64_t>(needed))
                                       : std::to_string(needed);
    throw ConfigError("grid_search: lattice needs " + amount + " evaluations but budget is " +
                      std::to_string(space.budget));
  }
  std::size_t total = static_cast<std::size_t>(needed + 0.5);

  SearchTrace trace;
  std::vector<std::size_t> idx(d, 0);
  for (std::size_t step = 0; step < total; ++step) {
    std::vector<double> x(d);
    for (std::size_t i = 0; i < d; ++i) {
      const SearchDim& dim = space.dims[i];
      x[i] = dim.lower + (dim.upper - dim.lower) * static_cast<double>(idx[i]) /
                             static_cast<double>(resolution - 1);
    }
    TracePoint p;
    p.x = x;
    try {
      p.value = objective(x);
      if (!std::isfinite(p.value)) throw NumericError("objective returned non-finite value");
    } catch (const std::exception&) {
      p.failed = true;
      p.value = std::numeric_limits<double>::quiet_NaN();
    }
    if (!p.failed && p.value > trace.best_value) {
      trace.best_value = p.value;
      trace.best_x = x;
    }
    trace.points.push_back(std::move(p));
    for (std::size_t i = d; i-- > 0;) {
      if (++idx[i] < resolution) break;
      idx[i] = 0;
    }
  }
  if (trace.best_x.empty()) throw SearchError("grid_search: every evaluation failed");
  return trace;
}

namespace detail {

inline double unit_from_bits(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
inline std::vector<double> cholesky(std::vector<double> a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = j; i < n; ++i) {
      double sum = a[i * n + j];
      for (std::size_t p = 0; p < j; ++p) sum -= a[i * n + p] * a[j * n + p];
      if (i == j) {
        if (!(sum > 0.0)) throw NumericError("cholesky: matrix not positive definite");
        a[j * n + j] = std::sqrt(sum);
      } else {
        a[i * n + j] = sum / a[j * n + j];
      }
    }
    for (std::size_t p = j + 1; p < n; ++p) a[j * n + p] = 0.0;
  }
  return a;
}

inline std::vector<double> solve_lower(const std::vector<double>& l, std::size_t n,
                                       std::vector<double> b) {
  for (std::size_t i = 0; i < n; ++i) {
    double sum = b[i];
    for (std::size_t j = 0; j < i; ++j) sum -= l[i * n + j] * b[j];
    b[i] = sum / l[i * n + i];
  }
  return b;
}

inline std::vector<double> solve_upper_from_lower(const std::vector<double>& l, std::size_t n,
                                                  std::vector<double> b) {
  for (std::size_t i = n; i-- > 0;) {
    double sum = b[i];
    for (std::size_t j = i + 1; j < n; ++j) sum -= l[j * n + i] * b[j];
    b[i] = sum / l[i * n + i];
  }
  return b;
}

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / 2.506628274631000502; }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / 1.4142135623730951); }

}  // namespace detail

// Gaussian-process search with expected improvement.
//
// Model: RBF kernel on coordinates normalized to the unit cube, length scale
// from the median heuristic over the observed points, observations
// standardized, nugget 1e-6. Acquisition: expected improvement with a small
// exploration margin, maximized over 1024 seeded uniform candidates per step.
// Startup: a jittered Latin hypercube of min(8, budget) points. Failed
// objective evaluations are recorded in the trace and excluded from the fit.
// Fully deterministic for a fixed seed; never proposes a point outside the
// space.
inline SearchTrace bayes_optimize(const Objective& objective, const SearchSpace& space,
                                  std::uint64_t seed) {
  space.validate();
  std::size_t d = space.dims.size();
  std::mt19937_64 rng(seed);
  SearchTrace trace;
  trace.seed = seed;

  auto to_bounds = [&](const std::vector<double>& u) {
    std::vector<double> x(d);
    for (std::size_t i = 0; i < d; ++i)
      x[i] = space.dims[i].lower + (space.dims[i].upper - space.dims[i].lower) * u[i];
    return x;
  };

  std::vector<std::vector<double>> obs_u;  // unit-cube coordinates of successes
  std::vector<double> obs_y;

  auto evaluate = [&](const std::vector<double>& u) {
    TracePoint p;
    p.x = to_bounds(u);
    try {
      p.value = objective(p.x);
      if (!std::isfinite(p.value)) throw NumericError("objective returned non-finite value");
    } catch (const std::exception&) {
      p.failed = true;
      p.value = std::numeric_limits<double>::quiet_NaN();
    }
    if (!p.failed) {
      obs_u.push_back(u);
      obs_y.push_back(p.value);
      if (p.value > trace.best_value) {
        trace.best_value = p.value;
        trace.best_x = p.x;
      }
    }
    trace.points.push_back(std::move(p));
  };

  // jittered Latin hypercube startup
  std::size_t n_init = std::min<std::size_t>(8, space.budget);
  std::vector<std::vector<std::size_t>> strata(d, std::vector<std::size_t>(n_init));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t s = 0; s < n_init; ++s) strata[i][s] = s;
    for (std::size_t s = n_init; s > 1; --s)
      std::swap(strata[i][s - 1], strata[i][rng() % s]);
  }
  for (std::size_t s = 0; s < n_init; ++s) {
    std::vector<double> u(d);
    for (std::size_t i = 0; i < d; ++i)
      u[i] = (static_cast<double>(strata[i][s]) + detail::unit_from_bits(rng())) /
             static_cast<double>(n_init);
    evaluate(u);
  }

  const std::size_t n_candidates = 1024;
  while (trace.points.size() < space.budget) {
    std::vector<std::vector<double>> cand(n_candidates, std::vector<double>(d));
    for (auto& c : cand)
      for (std::size_t i = 0; i < d; ++i) c[i] = detail::unit_from_bits(rng());

    std::size_t n = obs_u.size();
    if (n == 0) {
      evaluate(cand[0]);
      continue;
    }

    // median-heuristic length scale over observed points
    std::vector<double> dists;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        double r2 = 0.0;
        for (std::size_t q = 0; q < d; ++q) {
          double diff = obs_u[i][q] - obs_u[j][q];
          r2 += diff * diff;
        }
        dists.push_back(std::sqrt(r2));
      }
    double ell = 0.25 * std::sqrt(static_cast<double>(d));
    if (!dists.empty()) {
      std::sort(dists.begin(), dists.end());
      double med = dists[dists.size() / 2];
      if (med > 1e-9) ell = med;
    }
    double inv2ll = 1.0 / (2.0 * ell * ell);

    // standardized observations
    double mean = 0.0;
    for (double y : obs_y) mean += y;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double y : obs_y) var += (y - mean) * (y - mean);
    double sd = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
    if (sd < 1e-12) sd = 1.0;
    std::vector<double> ys(n);
    for (std::size_t i = 0; i < n; ++i) ys[i] = (obs_y[i] - mean) / sd;

    std::vector<double> kmat(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        double r2 = 0.0;
        for (std::size_t q = 0; q < d; ++q) {
          double diff = obs_u[i][q] - obs_u[j][q];
          r2 += diff * diff;
        }
        double kij = std::exp(-r2 * inv2ll);
        kmat[i * n + j] = kij;
        kmat[j * n + i] = kij;
      }
      kmat[i * n + i] += 1e-6;
    }
    std::vector<double> l = detail::cholesky(std::move(kmat), n);
    std::vector<double> alpha =
        detail::solve_upper_from_lower(l, n, detail::solve_lower(l, n, ys));

    double f_best = *std::max_element(ys.begin(), ys.end());
    const double xi = 0.01;

    std::size_t best_idx = 0;
    double best_ei = -1.0;
    double best_sigma = -1.0;
    std::size_t best_sigma_idx = 0;
    std::vector<double> kstar(n);
    for (std::size_t cidx = 0; cidx < n_candidates; ++cidx) {
      const std::vector<double>& c = cand[cidx];
      for (std::size_t i = 0; i < n; ++i) {
        double r2 = 0.0;
        for (std::size_t q = 0; q < d; ++q) {
          double diff = c[q] - obs_u[i][q];
          r2 += diff * diff;
        }
        kstar[i] = std::exp(-r2 * inv2ll);
      }
      double mu = 0.0;
      for (std::size_t i = 0; i < n; ++i) mu += kstar[i] * alpha[i];
      std::vector<double> v = detail::solve_lower(l, n, kstar);
      double var_star = 1.0 + 1e-6;
      for (std::size_t i = 0; i < n; ++i) var_star -= v[i] * v[i];
      double sigma = std::sqrt(std::max(var_star, 1e-18));

      double ei = 0.0;
      if (sigma > 1e-9) {
        double z = (mu - f_best - xi) / sigma;
        ei = (mu - f_best - xi) * detail::normal_cdf(z) + sigma * detail::normal_pdf(z);
      }
      if (ei > best_ei) {
        best_ei = ei;
        best_idx = cidx;
      }
      if (sigma > best_sigma) {
        best_sigma = sigma;
        best_sigma_idx = cidx;
      }
    }
    // when improvement looks impossible everywhere, probe the least-known spot
    evaluate(best_ei > 1e-15 ? cand[best_idx] : cand[best_sigma_idx]);
  }

  if (trace.best_x.empty()) throw SearchError("bayes_optimize: every evaluation failed");
  return trace;
}

struct TuneConfig {
  SearchSpace space = weight_space_2d();
  std::uint64_t seed = 0;
  MetricKind metric = MetricKind::MacroF1;
  bool use_grid = false;        // grid_search fallback instead of the GP
  std::size_t grid_resolution = 7;
};

struct LabeledScenarioRow {
  ScenarioOutputs scenario;
  std::size_t label = 0;
};

struct MidTuneResult {
  WeightSet weights;
  SearchTrace trace;
};

// Chooses (alpha, beta) for the inference correction by maximizing the metric
// on held-out scenario outputs. Every search evaluation costs zero backend
// calls: the three probe vectors per sample are already in hand.
inline MidTuneResult tune_mid(const std::vector<LabeledScenarioRow>& valid,
                              const TuneConfig& cfg = {}) {
  if (valid.empty()) throw DataError("tune_mid: empty validation set");
  std::size_t k = valid[0].scenario.k();
  std::vector<std::size_t> truths;
  truths.reserve(valid.size());
  for (const auto& row : valid) {
    if (!row.scenario.complete() || row.scenario.k() != k)
      throw ShapeError("tune_mid: inconsistent scenario outputs");
    if (row.label >= k) throw IndexError("tune_mid: label out of range");
    truths.push_back(row.label);
  }
  if (cfg.space.dims.size() != 2) throw ConfigError("tune_mid: search space must be 2-d");

  Objective objective = [&](const std::vector<double>& x) {
    WeightSet w;
    w.alpha = x[0];
    w.beta = x[1];
    w.lower = std::min(cfg.space.dims[0].lower, cfg.space.dims[1].lower);
    w.upper = std::max(cfg.space.dims[0].upper, cfg.space.dims[1].upper);
    std::vector<std::size_t> preds;
    preds.reserve(valid.size());
    for (const auto& row : valid) preds.push_back(arg_top(mid_correct(row.scenario, w)));
    return evaluate_metric(truths, preds, k, cfg.metric);
  };

  SearchTrace trace = cfg.use_grid ? grid_search(objective, cfg.space, cfg.grid_resolution)
                                   : bayes_optimize(objective, cfg.space, cfg.seed);
  MidTuneResult res;
  res.weights.alpha = trace.best_x[0];
  res.weights.beta = trace.best_x[1];
  res.weights.lower = std::min(cfg.space.dims[0].lower, cfg.space.dims[1].lower);
  res.weights.upper = std::max(cfg.space.dims[0].upper, cfg.space.dims[1].upper);
  res.weights.validate();
  res.trace = std::move(trace);
  return res;
}

struct MridValidRow {
  ScenarioOutputs scenario;
  int category = 0;  // oracle category of the validation sample
  std::size_t label = 0;
};

struct MridTuneResult {
  WeightSet weights;
  std::map<int, SearchTrace> traces;
  std::vector<std::string> warnings;
};

// Tunes the per-category correction strengths for the routed subtraction,
// each on its own category slice: 1-d alpha_1, 1-d beta_2, 2-d (alpha_3,
// beta_3). Categories with no validation samples keep zero strengths.
inline MridTuneResult tune_mrid(const std::vector<MridValidRow>& valid,
                                const TuneConfig& cfg = {}) {
  if (valid.empty()) throw DataError("tune_mrid: empty validation set");
  MridTuneResult res;
  res.weights.per_category[1] = {0.0, 0.0};
  res.weights.per_category[2] = {0.0, 0.0};
  res.weights.per_category[3] = {0.0, 0.0};
  double lo = cfg.space.dims.at(0).lower;
  double hi = cfg.space.dims.at(0).upper;
  res.weights.lower = lo;
  res.weights.upper = hi;
  std::size_t k = valid[0].scenario.k();

  for (int category = 1; category <= 3; ++category) {
    std::vector<const MridValidRow*> slice;
    for (const auto& row : valid)
      if (row.category == category) slice.push_back(&row);
    if (slice.empty()) {
      res.warnings.push_back("tune_mrid: no validation samples for category " +
                             std::to_string(category));
      continue;
    }
    std::vector<std::size_t> truths;
    truths.reserve(slice.size());
    for (const auto* row : slice) truths.push_back(row->label);

    auto score = [&](const WeightSet& w) {
      std::vector<std::size_t> preds;
      preds.reserve(slice.size());
      for (const auto* row : slice)
        preds.push_back(arg_top(mrid_correct(row->scenario, category, w)));
      return evaluate_metric(truths, preds, k, cfg.metric);
    };

    SearchSpace space;
    space.budget = cfg.space.budget;
    Objective objective;
    if (category == 1) {
      space.dims = {{"alpha1", lo, hi}};
      objective = [&](const std::vector<double>& x) {
        WeightSet w;
        w.lower = lo;
        w.upper = hi;
        w.per_category[1] = {x[0], 0.0};
        return score(w);
      };
    } else if (category == 2) {
      space.dims = {{"beta2", lo, hi}};
      objective = [&](const std::vector<double>& x) {
        WeightSet w;
        w.lower = lo;
        w.upper = hi;
        w.per_category[2] = {0.0, x[0]};
        return score(w);
      };
    } else {
      space.dims = {{"alpha3", lo, hi}, {"beta3", lo, hi}};
      objective = [&](const std::vector<double>& x) {
        WeightSet w;
        w.lower = lo;
        w.upper = hi;
        w.per_category[3] = {x[0], x[1]};
        return score(w);
      };
    }

    SearchTrace trace =
        cfg.use_grid ? grid_search(objective, space, cfg.grid_resolution)
                     : bayes_optimize(objective, space,
                                      derive_seed(cfg.seed, "mrid-category-" +
                                                                std::to_string(category)));
    if (category == 1)
      res.weights.per_category[1] = {trace.best_x[0], 0.0};
    else if (category == 2)
      res.weights.per_category[2] = {0.0, trace.best_x[0]};
    else
      res.weights.per_category[3] = {trace.best_x[0], trace.best_x[1]};
    res.traces[category] = std::move(trace);
  }
  res.weights.validate();
  return res;
}

struct MoeValidRow {
  ProbVector p_ge;
  std::optional<ProbVector> p_ide;
  std::optional<ProbVector> p_tde;
  int category = 0;  // oracle category of the validation sample
  std::size_t label = 0;
};

struct MoeTuneResult {
  WeightSet weights;
  std::map<int, SearchTrace> traces;
  std::vector<std::string> warnings;
};

// Tunes the three combination strengths independently, each on its own
// category slice of the validation set: a 1-d search for alpha_1 (category
// 1), a 1-d search for beta_2 (category 2), and a 2-d search for (alpha_3,
// beta_3). At most 3 x budget objective evaluations in total. An empty
// category keeps zero weights and is reported, not fatal.
inline MoeTuneResult tune_moe(const std::vector<MoeValidRow>& valid, const TuneConfig& cfg = {}) {
  if (valid.empty()) throw DataError("tune_moe: empty validation set");
  std::size_t k = valid[0].p_ge.k();
  MoeTuneResult res;
  res.weights.per_category[1] = {0.0, 0.0};
  res.weights.per_category[2] = {0.0, 0.0};
  res.weights.per_category[3] = {0.0, 0.0};

  double lo = cfg.space.dims.at(0).lower;
  double hi = cfg.space.dims.at(0).upper;
  res.weights.lower = lo;
  res.weights.upper = hi;

  for (int category = 1; category <= 3; ++category) {
    std::vector<const MoeValidRow*> slice;
    for (const auto& row : valid)
      if (row.category == category) slice.push_back(&row);
    if (slice.empty()) {
      res.warnings.push_back("tune_moe: no validation samples for category " +
                             std::to_string(category));
      continue;
    }
    std::vector<std::size_t> truths;
    truths.reserve(slice.size());
    for (const auto* row : slice) truths.push_back(row->label);

    auto score = [&](const WeightSet& w) {
      std::vector<std::size_t> preds;
      preds.reserve(slice.size());
      for (const auto* row : slice)
        preds.push_back(arg_top(moe_combine(row->p_ge, row->p_ide, row->p_tde, category, w)));
      return evaluate_metric(truths, preds, k, cfg.metric);
    };

    SearchSpace space;
    space.budget = cfg.space.budget;
    Objective objective;
    if (category == 1) {
      space.dims = {{"alpha1", lo, hi}};
      objective = [&](const std::vector<double>& x) {
        WeightSet w;
        w.lower = lo;
        w.upper = hi;
        w.per_category[1] = {x[0], 0.0};
        return score(w);
      };
    } else if (category == 2) {
      space.dims = {{"beta2", lo, hi}};
      objective = [&](const std::vector<double>& x) {
        WeightSet w;
        w.lower = lo;
        w.upper = hi;
        w.per_category[2] = {0.0, x[0]};
        return score(w);
      };
    } else {
      space.dims = {{"alpha3", lo, hi}, {"beta3", lo, hi}};
      objective = [&](const std::vector<double>& x) {
        WeightSet w;
        w.lower = lo;
        w.upper = hi;
        w.per_category[3] = {x[0], x[1]};
        return score(w);
      };
    }

    SearchTrace trace =
        cfg.use_grid ? grid_search(objective, space, cfg.grid_resolution)
                     : bayes_optimize(objective, space, derive_seed(cfg.seed, "moe-category-" +
                                                                                  std::to_string(category)));
    if (category == 1)
      res.weights.per_category[1] = {trace.best_x[0], 0.0};
    else if (category == 2)
      res.weights.per_category[2] = {0.0, trace.best_x[0]};
    else
      res.weights.per_category[3] = {trace.best_x[0], trace.best_x[1]};
    res.traces[category] = std::move(trace);
  }
  res.weights.validate();
  return res;
}

// Weight files carry both the flat correction strengths and the per-category
// strengths, with the bounds they were searched in.
inline void write_weights(const std::filesystem::path& path, const WeightSet& w) {
  json j;
  j["schema"] = "weights/1";
  j["alpha"] = w.alpha;
  j["beta"] = w.beta;
  j["lower"] = w.lower;
  j["upper"] = w.upper;
  json per;
  for (const auto& [c, ab] : w.per_category) {
    json e;
    e["alpha"] = ab.first;
    e["beta"] = ab.second;
    per[std::to_string(c)] = e;
  }
  j["per_category"] = per;
  write_text_file(path, j.dump(2) + "\n");
}

inline WeightSet read_weights(const std::filesystem::path& path) {
  json j = parse_json(read_text_file(path), path.string());
  if (j.value("schema", std::string()) != "weights/1")
    throw SchemaError(path.string() + ": not a weights file");
  WeightSet w;
  w.alpha = require_field<double>(j, "alpha", path.string());
  w.beta = require_field<double>(j, "beta", path.string());
  w.lower = j.value("lower", 0.0);
  w.upper = j.value("upper", 1.0);
  if (j.contains("per_category"))
    for (const auto& [key, val] : j["per_category"].items())
      w.per_category[std::stoi(key)] = {require_field<double>(val, "alpha", path.string()),
                                        require_field<double>(val, "beta", path.string())};
  w.validate();
  return w;
}

inline void write_trace(const std::filesystem::path& path, const SearchTrace& trace,
                        const std::string& what) {
  json header;
  header["schema"] = "search-trace/1";
  header["objective"] = what;
  header["seed"] = trace.seed;
  header["best_x"] = trace.best_x;
  header["best_value"] = trace.best_value;
  std::vector<json> rows;
  rows.reserve(trace.points.size());
  for (const auto& p : trace.points) {
    json j;
    j["x"] = p.x;
    if (p.failed)
      j["failed"] = true;
    else
      j["value"] = p.value;
    rows.push_back(std::move(j));
  }
  write_line_records(path, header, rows);
}

}  // namespace mmdebias
