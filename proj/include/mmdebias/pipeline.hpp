#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mmdebias/backend.hpp"
#include "mmdebias/categorize.hpp"
#include "mmdebias/cf_text.hpp"
#include "mmdebias/core.hpp"
#include "mmdebias/datasets.hpp"
#include "mmdebias/errors.hpp"
#include "mmdebias/image.hpp"
#include "mmdebias/io.hpp"
#include "mmdebias/mediation.hpp"
#include "mmdebias/metrics.hpp"
#include "mmdebias/router.hpp"
#include "mmdebias/synthetic.hpp"
#include "mmdebias/tuning.hpp"

namespace mmdebias {

// Resolved settings for one batch invocation. A frozen copy is written next
// to the outputs so every artifact records exactly how it was produced.
struct RunConfig {
  std::string dataset_dir;
  std::string backend = "synthetic";  // "synthetic" | "remote"
  std::string annotations_file;       // default: <dataset_dir>/annotations.jsonl
  std::string remote_config;          // default: <dataset_dir>/remote.json
  double epsilon = 0.1;
  double weight_lower = 0.0;
  double weight_upper = 1.0;
  std::size_t budget = 50;
  std::uint64_t seed = 17;
  std::size_t workers = 1;
  std::string out_dir = "out";
  bool oracle_router = false;
  std::string weights_file;  // overrides the tuned weights artifact
  std::string prompt_version = "v1";
  std::string metric = "macro-f1";
  std::string mask_token = "[MASK]";

  void validate() const {
    if (dataset_dir.empty()) throw ConfigError("run config: dataset directory not set");
    if (backend != "synthetic" && backend != "remote")
      throw ConfigError("run config: backend must be 'synthetic' or 'remote'");
    if (!(epsilon >= 0.0)) throw ConfigError("run config: epsilon must be non-negative");
    if (!(weight_lower < weight_upper))
      throw ConfigError("run config: weight lower bound must be below upper bound");
    if (budget == 0) throw ConfigError("run config: budget must be positive");
    if (workers == 0) throw ConfigError("run config: workers must be positive");
    if (out_dir.empty()) throw ConfigError("run config: output directory not set");
    metric_from_name(metric);
    if (mask_token.empty()) throw ConfigError("run config: empty mask token");
  }
};

inline json run_config_to_json(const RunConfig& c) {
  json j;
  j["schema"] = "run-config/1";
  j["dataset_dir"] = c.dataset_dir;
  j["backend"] = c.backend;
  j["annotations_file"] = c.annotations_file;
  j["remote_config"] = c.remote_config;
  j["epsilon"] = c.epsilon;
  j["weight_lower"] = c.weight_lower;
  j["weight_upper"] = c.weight_upper;
  j["budget"] = c.budget;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["out_dir"] = c.out_dir;
  j["oracle_router"] = c.oracle_router;
  j["weights_file"] = c.weights_file;
  j["prompt_version"] = c.prompt_version;
  j["metric"] = c.metric;
  j["mask_token"] = c.mask_token;
  return j;
}

inline RunConfig run_config_from_json(const json& j) {
  if (j.value("schema", std::string()) != "run-config/1")
    throw SchemaError("not a run config document");
  RunConfig c;
  c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
  c.backend = j.value("backend", c.backend);
  c.annotations_file = j.value("annotations_file", c.annotations_file);
  c.remote_config = j.value("remote_config", c.remote_config);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.weight_lower = j.value("weight_lower", c.weight_lower);
  c.weight_upper = j.value("weight_upper", c.weight_upper);
  c.budget = j.value("budget", c.budget);
  c.seed = j.value("seed", c.seed);
  c.workers = j.value("workers", c.workers);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.oracle_router = j.value("oracle_router", c.oracle_router);
  c.weights_file = j.value("weights_file", c.weights_file);
  c.prompt_version = j.value("prompt_version", c.prompt_version);
  c.metric = j.value("metric", c.metric);
  c.mask_token = j.value("mask_token", c.mask_token);
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(parse_json(read_text_file(path), path.string()));
}

// Everything the stages read from the dataset directory.
struct LoadedDataset {
  DatasetManifest manifest;
  std::map<std::string, SemanticAnnotation> annotations;
  std::shared_ptr<SyntheticFeatureTable> features;  // synthetic backends only
  SyntheticModelParams oracle_params;               // synthetic backends only
  bool synthetic = false;
  std::vector<std::string> warnings;
};

// Writes a generated corpus as the standard dataset directory layout:
// manifest.jsonl, features.jsonl, annotations.jsonl, model.json.
inline void write_synthetic_dataset(const std::filesystem::path& dir,
                                    const SyntheticDataset& data) {
  std::filesystem::create_directories(dir);
  write_manifest(dir / "manifest.jsonl", data.manifest);
  write_feature_table(dir / "features.jsonl", data.features);
  write_annotations(dir / "annotations.jsonl", data.annotations);
  write_model_params(dir / "model.json", data.oracle_params);
}

inline LoadedDataset load_dataset(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  fs::path dir = cfg.dataset_dir;
  fs::path manifest_path = dir / "manifest.jsonl";
  if (!fs::exists(manifest_path))
    throw ConfigError(manifest_path.string() +
                      " not found; generate one with `mmdebias gen-synthetic` or point "
                      "--dataset at a prepared directory");
  IngestResult ingested = ingest(manifest_path);
  LoadedDataset out{std::move(ingested.manifest), {}, nullptr, {}, false,
                    std::move(ingested.warnings)};

  fs::path ann_path = cfg.annotations_file.empty() ? dir / "annotations.jsonl"
                                                   : fs::path(cfg.annotations_file);
  if (fs::exists(ann_path)) {
    out.annotations = read_annotations(ann_path);
  } else {
    out.warnings.push_back("no annotation file at " + ann_path.string() +
                           "; text counterfactuals unavailable");
  }

  if (cfg.backend == "synthetic") {
    fs::path feat_path = dir / "features.jsonl";
    fs::path model_path = dir / "model.json";
    if (!fs::exists(feat_path) || !fs::exists(model_path))
      throw ConfigError("synthetic backend needs " + feat_path.string() + " and " +
                        model_path.string() + "; produce them with `mmdebias gen-synthetic`");
    out.features = std::make_shared<SyntheticFeatureTable>(read_feature_table(feat_path));
    out.oracle_params = read_model_params(model_path);
    out.synthetic = true;
  }
  return out;
}

struct PipelineContext {
  RunConfig cfg;
  LoadedDataset data;
  std::shared_ptr<Predictor> backend;
  std::shared_ptr<PredictionCache> cache;
  CallLedger ledger;
  std::filesystem::path out;
};

// Builds the working context: loads the dataset, constructs the backend (a
// caller-supplied predictor wins; otherwise the synthetic oracle), opens the
// prediction cache, and freezes the resolved config next to the outputs.
// Remote backends are wired up by the caller so this header stays free of the
// HTTP client.
inline std::shared_ptr<PipelineContext> make_context(
    const RunConfig& cfg, std::shared_ptr<Predictor> backend = nullptr) {
  cfg.validate();
  std::shared_ptr<PipelineContext> ctx(new PipelineContext{cfg, load_dataset(cfg)});
  ctx->out = cfg.out_dir;
  std::filesystem::create_directories(ctx->out);

  if (backend) {
    ctx->backend = std::move(backend);
  } else if (cfg.backend == "synthetic") {
    ctx->backend = std::make_shared<SyntheticModel>(ctx->data.manifest.class_space(),
                                                    *ctx->data.features,
                                                    ctx->data.oracle_params);
  } else {
    throw ConfigError("remote backend requires a caller-constructed predictor");
  }

  ctx->cache = std::make_shared<PredictionCache>(ctx->out / "cache.jsonl");
  write_text_file(ctx->out / "config.json", run_config_to_json(cfg).dump(2) + "\n");
  return ctx;
}

namespace detail {

// Runs fn(0..n-1) on the configured number of threads. The first exception
// wins and is rethrown on the calling thread after everyone stops.
template <typename Fn>
inline void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto body = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      {
        std::lock_guard<std::mutex> lock(error_mu);
        if (first_error) return;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  std::size_t count = std::min(workers, n);
  pool.reserve(count);
  for (std::size_t w = 0; w < count; ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

// The three probe views of one sample plus the cheap statistics the router
// consumes. Views that lack their counterfactual asset are left unavailable
// and the bundle is flagged.
struct ViewBundle {
  SampleView full;
  std::optional<SampleView> text_only;   // spurious text, image blanked
  std::optional<SampleView> image_only;  // spurious image, text blanked
  ViewStats stats;
  bool complete = false;
  std::string note;
};

inline ViewBundle build_views(const Sample& sample, const SemanticAnnotation* ann,
                              const LoadedDataset& data, const std::string& mask_token) {
  ViewBundle b;
  b.full = original_view(sample);
  b.stats.text_tokens = static_cast<double>(detail::split_tokens(sample.text).size());

  std::vector<std::string> missing;
  if (sample.text.empty()) {
    missing.push_back("text counterfactual (sample has no text)");
  } else if (!ann) {
    missing.push_back("text counterfactual (no annotation; run the extraction prompts)");
  } else {
    MaskResult mr = apply_mask_detailed(sample.text, *ann, mask_token);
    SampleView v;
    v.base = &sample;
    v.text_variant = Variant::SpuriousOnly;
    v.spurious_text = mr.text;
    v.image_variant = Variant::Masked;
    b.text_only = std::move(v);
    std::vector<std::string> toks = detail::split_tokens(b.text_only->spurious_text);
    std::size_t masked = 0;
    for (const auto& t : toks)
      if (t == mask_token) ++masked;
    if (!toks.empty())
      b.stats.masked_fraction = static_cast<double>(masked) / static_cast<double>(toks.size());
  }

  bool image_cf = false;
  std::string cf_path;
  if (data.synthetic) {
    const SyntheticFeatures* f = data.features ? data.features->find(sample.id) : nullptr;
    if (f) {
      image_cf = true;
      std::size_t total = f->img_sem.size() + f->img_spu.size();
      if (total > 0)
        b.stats.mask_coverage =
            static_cast<double>(f->img_sem.size()) / static_cast<double>(total);
    } else {
      missing.push_back("image counterfactual (no feature row)");
    }
  } else if (sample.image_path) {
    std::filesystem::path cf = counterfactual_image_path(*sample.image_path);
    if (std::filesystem::exists(cf)) {
      image_cf = true;
      cf_path = cf.string();
    } else {
      missing.push_back("image counterfactual (no " + cf.string() + ")");
    }
  } else {
    missing.push_back("image counterfactual (sample has no image)");
  }
  if (image_cf) {
    SampleView v;
    v.base = &sample;
    v.text_variant = Variant::Masked;
    v.image_variant = Variant::SpuriousOnly;
    v.spurious_image_path = cf_path;
    v.image_mask_coverage = b.stats.mask_coverage;
    b.image_only = std::move(v);
  }

  b.complete = b.text_only.has_value() && b.image_only.has_value();
  if (!missing.empty()) {
    for (const auto& m : missing) {
      if (!b.note.empty()) b.note += "; ";
      b.note += m;
    }
  }
  return b;
}

// One probed sample: the scenario outputs that were obtainable plus routing
// statistics. Incomplete rows keep whatever views existed.
struct ProbeRow {
  std::string sample_id;
  Split split = Split::Train;
  std::optional<std::size_t> label;
  ScenarioOutputs scenario;  // unavailable views stay empty
  ViewStats stats;
  bool complete = false;
  std::string note;
};

inline std::filesystem::path scenarios_path(const std::filesystem::path& out, Split s) {
  return out / (std::string("scenarios-") + split_name(s) + ".jsonl");
}
inline std::filesystem::path categorization_path(const std::filesystem::path& out, Split s) {
  return out / (std::string("categorization-") + split_name(s) + ".jsonl");
}

inline void write_probe_rows(const std::filesystem::path& path, const std::vector<ProbeRow>& rows,
                             const std::string& backend_id) {
  json header;
  header["schema"] = "scenarios/1";
  header["backend"] = backend_id;
  std::vector<json> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    json j;
    j["sample_id"] = r.sample_id;
    j["split"] = split_name(r.split);
    if (r.label) j["label"] = *r.label;
    j["p_full"] = r.scenario.p_full.scores;
    j["p_text_only"] = r.scenario.p_text_only.scores;
    j["p_image_only"] = r.scenario.p_image_only.scores;
    json stats;
    stats["text_tokens"] = r.stats.text_tokens;
    stats["masked_fraction"] = r.stats.masked_fraction;
    stats["mask_coverage"] = r.stats.mask_coverage;
    j["stats"] = stats;
    j["complete"] = r.complete;
    if (!r.note.empty()) j["note"] = r.note;
    out.push_back(std::move(j));
  }
  write_line_records(path, header, out);
}

inline std::vector<ProbeRow> read_probe_rows(const std::filesystem::path& path) {
  LineRecordFile f = read_line_records(path, "scenarios");
  std::vector<ProbeRow> rows;
  rows.reserve(f.records.size());
  for (const auto& j : f.records) {
    const std::string where = path.string();
    ProbeRow r;
    r.sample_id = require_field<std::string>(j, "sample_id", where);
    r.split = split_from_name(require_field<std::string>(j, "split", where));
    if (j.contains("label") && !j["label"].is_null())
      r.label = j["label"].get<std::size_t>();
    r.scenario.p_full =
        ProbVector(require_field<std::vector<double>>(j, "p_full", where), true);
    r.scenario.p_text_only =
        ProbVector(require_field<std::vector<double>>(j, "p_text_only", where), true);
    r.scenario.p_image_only =
        ProbVector(require_field<std::vector<double>>(j, "p_image_only", where), true);
    if (j.contains("stats")) {
      const json& s = j["stats"];
      r.stats.text_tokens = s.value("text_tokens", 0.0);
      r.stats.masked_fraction = s.value("masked_fraction", 0.0);
      r.stats.mask_coverage = s.value("mask_coverage", 0.0);
    }
    r.complete = j.value("complete", false);
    r.note = j.value("note", std::string());
    rows.push_back(std::move(r));
  }
  return rows;
}

struct ProbeSummary {
  std::map<std::string, std::size_t> samples;   // per split
  std::map<std::string, std::size_t> flagged;   // per split, incomplete bundles
  std::uint64_t fresh_calls = 0;
  std::map<std::string, std::uint64_t> ledger;  // snapshot after the stage
};

// Probes every sample in every split and writes scenarios-<split>.jsonl.
// Views whose counterfactual asset is missing are skipped and the sample is
// flagged; the remaining views are still probed, so one missing image
// counterfactual costs exactly one call less.
inline ProbeSummary stage_probe(PipelineContext& ctx) {
  const DatasetManifest& m = ctx.data.manifest;
  ProbeSummary summary;
  std::uint64_t before = ctx.ledger.count("probe");

  for (Split split : {Split::Train, Split::Valid, Split::Test}) {
    std::vector<std::size_t> idx = m.indices(split);
    std::vector<ProbeRow> rows(idx.size());
    detail::parallel_for(idx.size(), ctx.cfg.workers, [&](std::size_t pos) {
      const Sample& s = m.records()[idx[pos]];
      const SemanticAnnotation* ann = nullptr;
      auto it = ctx.data.annotations.find(s.id);
      if (it != ctx.data.annotations.end()) ann = &it->second;
      ViewBundle b = build_views(s, ann, ctx.data, ctx.cfg.mask_token);

      ProbeRow r;
      r.sample_id = s.id;
      r.split = split;
      r.label = s.label;
      r.stats = b.stats;
      r.complete = b.complete;
      r.note = b.note;
      r.scenario.p_full = cached_predict(*ctx.backend, b.full, ctx.cache.get(), &ctx.ledger,
                                         "probe", ctx.cfg.prompt_version);
      if (b.text_only)
        r.scenario.p_text_only = cached_predict(*ctx.backend, *b.text_only, ctx.cache.get(),
                                                &ctx.ledger, "probe", ctx.cfg.prompt_version);
      if (b.image_only)
        r.scenario.p_image_only = cached_predict(*ctx.backend, *b.image_only, ctx.cache.get(),
                                                 &ctx.ledger, "probe", ctx.cfg.prompt_version);
      rows[pos] = std::move(r);
    });

    write_probe_rows(scenarios_path(ctx.out, split), rows, ctx.backend->id());
    summary.samples[split_name(split)] = rows.size();
    std::size_t flagged = 0;
    for (const auto& r : rows)
      if (!r.complete) ++flagged;
    summary.flagged[split_name(split)] = flagged;
  }
  summary.fresh_calls = ctx.ledger.count("probe") - before;
  summary.ledger = ctx.ledger.snapshot();
  return summary;
}

inline void require_artifact(const std::filesystem::path& path, const char* producer) {
  if (!std::filesystem::exists(path))
    throw ConfigError(path.string() + " not found; run `mmdebias " + producer + "` first");
}

struct CategorizeSummary {
  std::map<std::string, CategorizationSummary> per_split;
};

// Applies the tolerance criteria to every labeled, fully probed sample and
// writes categorization-<split>.jsonl next to the scenario files.
inline CategorizeSummary stage_categorize(PipelineContext& ctx) {
  CategorizeSummary out;
  for (Split split : {Split::Train, Split::Valid, Split::Test}) {
    std::filesystem::path src = scenarios_path(ctx.out, split);
    require_artifact(src, "probe");
    std::vector<ProbeRow> rows = read_probe_rows(src);
    std::vector<LabeledScenario> scen;
    scen.reserve(rows.size());
    for (auto& r : rows) {
      LabeledScenario ls;
      ls.sample_id = r.sample_id;
      ls.label = r.label;
      if (r.complete && r.scenario.complete()) ls.scenario = r.scenario;
      scen.push_back(std::move(ls));
    }
    CategorizedDataset cat = categorize_dataset(scen, ctx.cfg.epsilon);
    write_categorization(categorization_path(ctx.out, split), cat.records,
                         hex64(fnv1a64(read_text_file(src))));
    out.per_split[split_name(split)] = cat.summary;
  }
  return out;
}

struct EmitSummary {
  std::size_t ge = 0;
  std::size_t ide = 0;
  std::size_t tde = 0;
  std::size_t router_train = 0;
  std::size_t router_valid = 0;
  std::vector<std::string> skipped;
};

// Materializes the supervision files: train-{ge,ide,tde}.jsonl plus the
// router category targets for the train and validation splits.
inline EmitSummary stage_emit(PipelineContext& ctx) {
  std::filesystem::path cat_path = categorization_path(ctx.out, Split::Train);
  require_artifact(cat_path, "categorize");
  std::vector<CategorizationRecord> cats = read_categorization(cat_path);

  std::filesystem::path scen_path = scenarios_path(ctx.out, Split::Train);
  require_artifact(scen_path, "probe");
  std::map<std::string, ScenarioOutputs> scenarios;
  for (auto& r : read_probe_rows(scen_path))
    if (r.scenario.complete()) scenarios[r.sample_id] = std::move(r.scenario);

  CounterfactualAssets assets;
  assets.annotations = &ctx.data.annotations;
  assets.scenarios = &scenarios;
  if (ctx.data.synthetic) {
    assets.image_cf_always_available = true;
  } else {
    for (const Sample& s : ctx.data.manifest.records()) {
      if (!s.image_path) continue;
      std::filesystem::path cf = counterfactual_image_path(*s.image_path);
      if (std::filesystem::exists(cf)) assets.image_cf_paths[s.id] = cf.string();
    }
  }

  EmitConfig emit_cfg;
  emit_cfg.seed = ctx.cfg.seed;
  emit_cfg.mask_token = ctx.cfg.mask_token;
  EmittedTrainingSets sets = emit_training_sets(ctx.data.manifest, cats, assets, emit_cfg);
  std::string fp = hex64(fnv1a64(read_text_file(cat_path)));
  sets.ge.source_fingerprint = fp;
  sets.ide.source_fingerprint = fp;
  sets.tde.source_fingerprint = fp;
  sets.router.source_fingerprint = fp;

  write_training_set(ctx.out / "train-ge.jsonl", sets.ge);
  write_training_set(ctx.out / "train-ide.jsonl", sets.ide);
  write_training_set(ctx.out / "train-tde.jsonl", sets.tde);
  write_router_set(ctx.out / "router-train.jsonl", sets.router);

  EmitSummary summary;
  summary.ge = sets.ge.records.size();
  summary.ide = sets.ide.records.size();
  summary.tde = sets.tde.records.size();
  summary.router_train = sets.router.records.size();
  summary.skipped = sets.skipped;

  std::filesystem::path valid_cat = categorization_path(ctx.out, Split::Valid);
  if (std::filesystem::exists(valid_cat)) {
    RouterTrainingSet valid_set;
    valid_set.source_fingerprint = hex64(fnv1a64(read_text_file(valid_cat)));
    for (const auto& c : read_categorization(valid_cat)) {
      if (c.category == DebiasCategory::Exclude) continue;
      valid_set.records.push_back({c.sample_id, category_int(c.category)});
    }
    write_router_set(ctx.out / "router-valid.jsonl", valid_set);
    summary.router_valid = valid_set.records.size();
  }
  return summary;
}

struct TrainExpertsSummary {
  std::map<std::string, std::size_t> records;      // per role
  std::map<std::string, double> final_loss;        // per role
  std::vector<std::string> warnings;
};

// Trains the general, image-debias, text-debias and training-time-debias
// classifiers from the emitted files and saves each as expert-<role>.json.
// The training-time variant learns from the union of all emitted records.
inline TrainExpertsSummary stage_train_experts(PipelineContext& ctx) {
  require_artifact(ctx.out / "train-ge.jsonl", "emit");
  require_artifact(ctx.out / "train-ide.jsonl", "emit");
  require_artifact(ctx.out / "train-tde.jsonl", "emit");
  EmittedTrainingSet ge = read_training_set(ctx.out / "train-ge.jsonl");
  EmittedTrainingSet ide = read_training_set(ctx.out / "train-ide.jsonl");
  EmittedTrainingSet tde = read_training_set(ctx.out / "train-tde.jsonl");

  EmittedTrainingSet mctd{"mctd", ge.source_fingerprint, {}};
  mctd.records = ide.records;
  if (tde.records.size() > ge.records.size())
    mctd.records.insert(mctd.records.end(), tde.records.begin() +
                                                static_cast<std::ptrdiff_t>(ge.records.size()),
                        tde.records.end());

  ExpertTrainConfig tcfg;
  tcfg.seed = ctx.cfg.seed;
  TrainExpertsSummary summary;
  const ClassSpace& cs = ctx.data.manifest.class_space();
  std::shared_ptr<const SyntheticFeatureTable> table = ctx.data.features;

  for (const EmittedTrainingSet* set : {&ge, &ide, &tde, &mctd}) {
    ExpertTrainResult res = train_toy_expert(set->role, *set, cs, table, tcfg);
    save_toy_expert(ctx.out / ("expert-" + set->role + ".json"), *res.expert);
    summary.records[set->role] = set->records.size();
    if (!res.losses.empty()) summary.final_loss[set->role] = res.losses.back();
    for (auto& w : res.warnings) summary.warnings.push_back(std::move(w));
  }
  return summary;
}

namespace detail {

struct RouterData {
  std::vector<RouterFeatures> features;
  std::vector<int> labels;
};

inline RouterData router_data(const std::filesystem::path& scenario_file,
                              const std::filesystem::path& set_file) {
  RouterData out;
  std::map<std::string, ProbeRow> by_id;
  for (auto& r : read_probe_rows(scenario_file)) by_id[r.sample_id] = std::move(r);
  for (const auto& t : read_router_set(set_file).records) {
    auto it = by_id.find(t.sample_id);
    if (it == by_id.end() || !it->second.scenario.complete()) continue;
    out.features.push_back(featurize(it->second.scenario, it->second.stats));
    out.labels.push_back(t.category);
  }
  return out;
}

}  // namespace detail

struct TrainRouterSummary {
  std::size_t train_pairs = 0;
  std::size_t valid_pairs = 0;
  double selection_score = 0.0;
  std::size_t best_epoch = 0;
  bool degenerate = false;
  std::vector<std::string> warnings;
};

// Fits the strategy router on the emitted category targets and saves it as
// router.json. Validation pairs, when present, drive the epoch selection.
inline TrainRouterSummary stage_train_router(PipelineContext& ctx) {
  require_artifact(scenarios_path(ctx.out, Split::Train), "probe");
  require_artifact(ctx.out / "router-train.jsonl", "emit");
  detail::RouterData train =
      detail::router_data(scenarios_path(ctx.out, Split::Train), ctx.out / "router-train.jsonl");
  detail::RouterData valid;
  if (std::filesystem::exists(ctx.out / "router-valid.jsonl") &&
      std::filesystem::exists(scenarios_path(ctx.out, Split::Valid)))
    valid = detail::router_data(scenarios_path(ctx.out, Split::Valid),
                                ctx.out / "router-valid.jsonl");

  RouterTrainConfig rcfg;
  rcfg.seed = ctx.cfg.seed;
  rcfg.class_weighted = true;
  RouterTrainResult res = train_router(train.features, train.labels, valid.features,
                                       valid.labels, rcfg);
  save_router(ctx.out / "router.json", res.model);

  TrainRouterSummary summary;
  summary.train_pairs = train.features.size();
  summary.valid_pairs = valid.features.size();
  summary.selection_score = res.model.selection_score;
  summary.best_epoch = res.model.best_epoch;
  summary.degenerate = res.model.degenerate;
  summary.warnings = std::move(res.warnings);
  return summary;
}

struct TuneSummary {
  WeightSet mid_weights;
  double mid_best = 0.0;
  std::optional<WeightSet> moe_weights;
  std::vector<std::string> notes;
};

// Searches the correction strengths on the validation split: the flat (alpha,
// beta) for the inference correction, per-category strengths for the routed
// correction, and, when experts exist, per-category combination strengths for
// the mixture. Weights land in weights-mid.json / weights-moe.json with their
// search traces alongside.
inline TuneSummary stage_tune(PipelineContext& ctx) {
  std::filesystem::path scen_path = scenarios_path(ctx.out, Split::Valid);
  require_artifact(scen_path, "probe");
  std::vector<ProbeRow> rows = read_probe_rows(scen_path);

  TuneConfig tcfg;
  tcfg.space = weight_space_2d(ctx.cfg.weight_lower, ctx.cfg.weight_upper, ctx.cfg.budget);
  tcfg.seed = derive_seed(ctx.cfg.seed, "tune-mid");
  tcfg.metric = metric_from_name(ctx.cfg.metric);

  std::vector<LabeledScenarioRow> mid_rows;
  for (const auto& r : rows)
    if (r.label && r.scenario.complete()) mid_rows.push_back({r.scenario, *r.label});
  if (mid_rows.empty())
    throw DataError("tune: no labeled, fully probed validation samples");

  TuneSummary summary;
  MidTuneResult mid = tune_mid(mid_rows, tcfg);
  summary.mid_weights = mid.weights;
  summary.mid_best = mid.trace.best_value;
  write_trace(ctx.out / "trace-mid.jsonl", mid.trace, "mid");

  std::filesystem::path cat_path = categorization_path(ctx.out, Split::Valid);
  std::map<std::string, int> categories;
  if (std::filesystem::exists(cat_path)) {
    for (const auto& c : read_categorization(cat_path))
      categories[c.sample_id] = category_int(c.category);
  } else {
    summary.notes.push_back("no validation categorization; per-category strengths skipped "
                            "(run `mmdebias categorize`)");
  }

  WeightSet mid_file = mid.weights;
  if (!categories.empty()) {
    std::vector<MridValidRow> mrid_rows;
    for (const auto& r : rows) {
      if (!r.label || !r.scenario.complete()) continue;
      auto it = categories.find(r.sample_id);
      if (it == categories.end() || it->second < 1 || it->second > 3) continue;
      mrid_rows.push_back({r.scenario, it->second, *r.label});
    }
    if (!mrid_rows.empty()) {
      TuneConfig mcfg = tcfg;
      mcfg.seed = derive_seed(ctx.cfg.seed, "tune-mrid");
      MridTuneResult mrid = tune_mrid(mrid_rows, mcfg);
      mid_file.per_category = mrid.weights.per_category;
      for (const auto& [c, trace] : mrid.traces)
        write_trace(ctx.out / ("trace-mrid-c" + std::to_string(c) + ".jsonl"), trace,
                    "mrid category " + std::to_string(c));
      for (auto& w : mrid.warnings) summary.notes.push_back(std::move(w));
    } else {
      summary.notes.push_back("no validation samples in debias categories; "
                              "per-category strengths left at zero");
      mid_file.per_category = {{1, {0.0, 0.0}}, {2, {0.0, 0.0}}, {3, {0.0, 0.0}}};
    }
  }
  write_weights(ctx.out / "weights-mid.json", mid_file);
  summary.mid_weights = mid_file;

  bool experts_exist = std::filesystem::exists(ctx.out / "expert-ge.json") &&
                       std::filesystem::exists(ctx.out / "expert-ide.json") &&
                       std::filesystem::exists(ctx.out / "expert-tde.json");
  if (!experts_exist) {
    summary.notes.push_back("experts not trained; mixture strengths skipped "
                            "(run `mmdebias train-experts`)");
    return summary;
  }
  if (categories.empty()) return summary;

  auto ge = load_toy_expert(ctx.out / "expert-ge.json", ctx.data.features);
  auto ide = load_toy_expert(ctx.out / "expert-ide.json", ctx.data.features);
  auto tde = load_toy_expert(ctx.out / "expert-tde.json", ctx.data.features);

  std::vector<MoeValidRow> moe_rows;
  for (const auto& r : rows) {
    if (!r.label) continue;
    auto it = categories.find(r.sample_id);
    if (it == categories.end() || it->second < 1 || it->second > 3) continue;
    const Sample* s = ctx.data.manifest.find(r.sample_id);
    if (!s) continue;
    SampleView view = original_view(*s);
    MoeValidRow row;
    row.p_ge = cached_predict(*ge, view, ctx.cache.get(), &ctx.ledger, "tune-moe",
                              ctx.cfg.prompt_version);
    row.p_ide = cached_predict(*ide, view, ctx.cache.get(), &ctx.ledger, "tune-moe",
                               ctx.cfg.prompt_version);
    row.p_tde = cached_predict(*tde, view, ctx.cache.get(), &ctx.ledger, "tune-moe",
                               ctx.cfg.prompt_version);
    row.category = it->second;
    row.label = *r.label;
    moe_rows.push_back(std::move(row));
  }
  if (moe_rows.empty()) {
    summary.notes.push_back("no validation samples in debias categories; "
                            "mixture strengths skipped");
    return summary;
  }

  TuneConfig moe_cfg = tcfg;
  moe_cfg.seed = derive_seed(ctx.cfg.seed, "tune-moe");
  MoeTuneResult moe = tune_moe(moe_rows, moe_cfg);
  for (const auto& [c, trace] : moe.traces)
    write_trace(ctx.out / ("trace-moe-c" + std::to_string(c) + ".jsonl"), trace,
                "moe category " + std::to_string(c));
  for (auto& w : moe.warnings) summary.notes.push_back(std::move(w));
  write_weights(ctx.out / "weights-moe.json", moe.weights);
  summary.moe_weights = moe.weights;
  return summary;
}

// Maps eval-time category sources: the trained router or the oracle
// categorization file. Exclude collapses to no-debias at inference.
struct RoutingSource {
  bool oracle = false;
  std::optional<RouterModel> model;
  std::map<std::string, int> oracle_categories;

  int categorize_sample(const std::string& sample_id, const ScenarioOutputs& scenario,
                        const ViewStats& stats) const {
    if (oracle) {
      auto it = oracle_categories.find(sample_id);
      if (it == oracle_categories.end()) return 0;
      return it->second == 4 ? 0 : it->second;
    }
    return route(*model, featurize(scenario, stats));
  }
};

inline RoutingSource make_routing_source(PipelineContext& ctx) {
  RoutingSource src;
  if (ctx.cfg.oracle_router) {
    src.oracle = true;
    std::filesystem::path cat_path = categorization_path(ctx.out, Split::Test);
    require_artifact(cat_path, "categorize");
    for (const auto& c : read_categorization(cat_path))
      src.oracle_categories[c.sample_id] = category_int(c.category);
  } else {
    std::filesystem::path router_path = ctx.out / "router.json";
    require_artifact(router_path, "train-router");
    src.model = load_router(router_path);
  }
  return src;
}

inline WeightSet load_method_weights(PipelineContext& ctx, const char* artifact,
                                     bool need_per_category) {
  std::filesystem::path path = ctx.cfg.weights_file.empty()
                                   ? ctx.out / artifact
                                   : std::filesystem::path(ctx.cfg.weights_file);
  if (!std::filesystem::exists(path))
    throw ConfigError(path.string() + " not found; run `mmdebias tune` first or pass "
                      "--weights-file");
  WeightSet w = read_weights(path);
  if (need_per_category && w.per_category.empty())
    throw ConfigError(path.string() + " lacks per-category strengths; re-run `mmdebias tune` "
                      "after `mmdebias categorize`");
  return w;
}

struct MethodReport {
  std::string method;
  std::size_t n = 0;
  std::size_t skipped = 0;
  ClassificationReport metrics;
  std::map<int, CategoryError> category_errors;  // routed methods only
  std::map<std::string, std::uint64_t> ledger;
  std::uint64_t method_calls = 0;
  bool cold_cache_budget_ok = false;
  WeightSet weights;  // as applied; zero for base and the mctd evaluation
};

namespace detail {

struct EvalRow {
  const Sample* sample = nullptr;
  std::size_t label = 0;
  std::size_t predicted = 0;
  int category = -1;  // -1 when the method does not route
  bool skipped = false;
  std::string note;
};

inline json report_to_json(const MethodReport& r, const PipelineContext& ctx) {
  json j;
  j["schema"] = "report/1";
  j["method"] = r.method;
  j["dataset"] = ctx.data.manifest.name();
  j["backend"] = ctx.backend->id();
  j["split"] = "test";
  j["n"] = r.n;
  j["skipped"] = r.skipped;
  j["accuracy"] = r.metrics.accuracy;
  j["macro_f1"] = r.metrics.macro_f1;
  j["weighted_f1"] = r.metrics.weighted_f1;
  json per_class = json::array();
  for (std::size_t c = 0; c < r.metrics.per_class.size(); ++c) {
    const ClassMetrics& m = r.metrics.per_class[c];
    json e;
    e["label"] = ctx.data.manifest.class_space().label(c);
    e["precision"] = m.precision;
    e["recall"] = m.recall;
    e["f1"] = m.f1;
    e["support"] = m.support;
    per_class.push_back(std::move(e));
  }
  j["per_class"] = per_class;
  json percent;
  percent["accuracy"] = format_percent(r.metrics.accuracy);
  percent["macro_f1"] = format_percent(r.metrics.macro_f1);
  percent["weighted_f1"] = format_percent(r.metrics.weighted_f1);
  j["percent"] = percent;
  if (!r.category_errors.empty()) {
    json cats;
    for (const auto& [cat, err] : r.category_errors) {
      json e;
      e["n"] = err.n;
      e["errors"] = err.errors;
      e["error_rate"] = err.rate();
      cats[std::to_string(cat)] = e;
    }
    j["per_category_error"] = cats;
  }
  json ledger;
  for (const auto& [key, count] : r.ledger) ledger[key] = count;
  j["ledger"] = ledger;
  json overhead;
  overhead["method_calls"] = r.method_calls;
  overhead["cold_cache_budget_ok"] = r.cold_cache_budget_ok;
  j["overhead"] = overhead;
  json weights;
  weights["alpha"] = r.weights.alpha;
  weights["beta"] = r.weights.beta;
  for (const auto& [c, ab] : r.weights.per_category) {
    json e;
    e["alpha"] = ab.first;
    e["beta"] = ab.second;
    weights["category_" + std::to_string(c)] = e;
  }
  j["weights"] = weights;
  return j;
}

inline void write_predictions(const std::filesystem::path& path,
                              const std::vector<EvalRow>& rows, const ClassSpace& cs) {
  json header;
  header["schema"] = "predictions/1";
  std::vector<json> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    json j;
    j["sample_id"] = r.sample->id;
    if (r.skipped) {
      j["skipped"] = true;
      j["note"] = r.note;
    } else {
      j["label"] = cs.label(r.label);
      j["predicted"] = cs.label(r.predicted);
      if (r.category >= 0) j["category"] = r.category;
    }
    out.push_back(std::move(j));
  }
  write_line_records(path, header, out);
}

}  // namespace detail

// Evaluates one method on the labeled test split, end to end: probes what the
// method needs (cache-aware), applies the correction or combination, scores,
// and writes report-<method>.json plus predictions-<method>.jsonl. Method
// names: base, mid, mrid, mctd (accepted as mctd-eval), mme-jd.
inline MethodReport run_method(PipelineContext& ctx, std::string method) {
  if (method == "mctd-eval") method = "mctd";
  const bool is_base = method == "base";
  const bool is_mid = method == "mid";
  const bool is_mrid = method == "mrid";
  const bool is_mctd = method == "mctd";
  const bool is_moe = method == "mme-jd";
  if (!is_base && !is_mid && !is_mrid && !is_mctd && !is_moe)
    throw ConfigError("unknown method '" + method +
                      "'; expected base, mid, mrid, mctd or mme-jd");

  MethodReport report;
  report.method = method;

  WeightSet weights;
  if (is_mid) weights = load_method_weights(ctx, "weights-mid.json", false);
  if (is_mrid) weights = load_method_weights(ctx, "weights-mid.json", true);
  if (is_moe) weights = load_method_weights(ctx, "weights-moe.json", true);
  report.weights = weights;

  RoutingSource routing;
  if (is_mrid || is_moe) routing = make_routing_source(ctx);

  std::shared_ptr<ToyExpert> mctd_expert, ge, ide, tde;
  if (is_mctd) {
    require_artifact(ctx.out / "expert-mctd.json", "train-experts");
    mctd_expert = load_toy_expert(ctx.out / "expert-mctd.json", ctx.data.features);
  }
  if (is_moe) {
    for (const char* f : {"expert-ge.json", "expert-ide.json", "expert-tde.json"})
      require_artifact(ctx.out / f, "train-experts");
    ge = load_toy_expert(ctx.out / "expert-ge.json", ctx.data.features);
    ide = load_toy_expert(ctx.out / "expert-ide.json", ctx.data.features);
    tde = load_toy_expert(ctx.out / "expert-tde.json", ctx.data.features);
  }

  const DatasetManifest& m = ctx.data.manifest;
  std::vector<std::size_t> idx;
  for (std::size_t i : m.indices(Split::Test))
    if (m.records()[i].label) idx.push_back(i);
  if (idx.empty()) throw EmptyEvaluationError("run: no labeled test samples");

  std::uint64_t before = ctx.ledger.count(method);
  std::vector<detail::EvalRow> rows(idx.size());

  detail::parallel_for(idx.size(), ctx.cfg.workers, [&](std::size_t pos) {
    const Sample& s = m.records()[idx[pos]];
    detail::EvalRow row;
    row.sample = &s;
    row.label = *s.label;

    auto probe_scenario = [&](const std::string& ledger_key,
                              ViewStats& stats) -> std::optional<ScenarioOutputs> {
      const SemanticAnnotation* ann = nullptr;
      auto it = ctx.data.annotations.find(s.id);
      if (it != ctx.data.annotations.end()) ann = &it->second;
      ViewBundle b = build_views(s, ann, ctx.data, ctx.cfg.mask_token);
      stats = b.stats;
      if (!b.complete) {
        row.skipped = true;
        row.note = b.note;
        return std::nullopt;
      }
      ScenarioOutputs sc;
      sc.p_full = cached_predict(*ctx.backend, b.full, ctx.cache.get(), &ctx.ledger,
                                 ledger_key, ctx.cfg.prompt_version);
      sc.p_text_only = cached_predict(*ctx.backend, *b.text_only, ctx.cache.get(), &ctx.ledger,
                                      ledger_key, ctx.cfg.prompt_version);
      sc.p_image_only = cached_predict(*ctx.backend, *b.image_only, ctx.cache.get(),
                                       &ctx.ledger, ledger_key, ctx.cfg.prompt_version);
      return sc;
    };

    if (is_base) {
      ProbVector p = cached_predict(*ctx.backend, original_view(s), ctx.cache.get(),
                                    &ctx.ledger, "base", ctx.cfg.prompt_version);
      row.predicted = arg_top(p);
    } else if (is_mid) {
      ViewStats stats;
      auto sc = probe_scenario("mid", stats);
      if (sc) row.predicted = arg_top(mid_correct(*sc, weights));
    } else if (is_mrid) {
      ViewStats stats;
      auto sc = probe_scenario("mrid", stats);
      if (sc) {
        row.category = routing.categorize_sample(s.id, *sc, stats);
        row.predicted = arg_top(mrid_correct(*sc, row.category, weights));
      }
    } else if (is_mctd) {
      ProbVector p = cached_predict(*mctd_expert, original_view(s), ctx.cache.get(),
                                    &ctx.ledger, "mctd", ctx.cfg.prompt_version);
      row.predicted = arg_top(p);
    } else {
      // mixture: route first, then call only the experts the category needs
      int category = 0;
      if (routing.oracle) {
        ScenarioOutputs unused;
        category = routing.categorize_sample(s.id, unused, ViewStats{});
      } else {
        ViewStats stats;
        auto sc = probe_scenario("router-features", stats);
        if (!sc) {
          rows[pos] = std::move(row);
          return;
        }
        category = routing.categorize_sample(s.id, *sc, stats);
      }
      SampleView view = original_view(s);
      ProbVector p_ge = cached_predict(*ge, view, ctx.cache.get(), &ctx.ledger, "mme-jd",
                                       ctx.cfg.prompt_version);
      std::optional<ProbVector> p_ide, p_tde;
      if (category == 1 || category == 3)
        p_ide = cached_predict(*ide, view, ctx.cache.get(), &ctx.ledger, "mme-jd",
                               ctx.cfg.prompt_version);
      if (category == 2 || category == 3)
        p_tde = cached_predict(*tde, view, ctx.cache.get(), &ctx.ledger, "mme-jd",
                               ctx.cfg.prompt_version);
      row.category = category;
      row.predicted = arg_top(moe_combine(p_ge, p_ide, p_tde, category, weights));
    }
    rows[pos] = std::move(row);
  });

  std::vector<std::size_t> truths, preds;
  std::vector<std::pair<int, bool>> cat_correct;
  for (const auto& r : rows) {
    if (r.skipped) {
      ++report.skipped;
      continue;
    }
    truths.push_back(r.label);
    preds.push_back(r.predicted);
    if (r.category >= 0) cat_correct.push_back({r.category, r.predicted == r.label});
  }
  if (truths.empty()) throw EmptyEvaluationError("run: every test sample was skipped");

  report.n = truths.size();
  report.metrics =
      classification_report(confusion_from(truths, preds, m.class_space().k()));
  if (!cat_correct.empty()) report.category_errors = per_category_error(cat_correct);
  report.ledger = ctx.ledger.snapshot();
  report.method_calls = ctx.ledger.count(method) - before;
  report.cold_cache_budget_ok = overhead_check(ctx.ledger, method, report.n);

  detail::write_predictions(ctx.out / ("predictions-" + method + ".jsonl"), rows,
                            m.class_space());
  write_text_file(ctx.out / ("report-" + method + ".json"),
                  detail::report_to_json(report, ctx).dump(2) + "\n");
  return report;
}

struct LiftSummary {
  std::vector<LiftEntry> entries;
  std::uint64_t corpus_size = 0;
};

namespace detail {

inline std::vector<std::string> lift_text_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    bool alnum = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
    if (alnum) {
      cur += detail::ascii_lower(c);
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

// Corpus statistic: lift of every token and image feature against every
// label over the labeled train split, written as lift.csv.
inline LiftSummary stage_lift(PipelineContext& ctx, std::uint64_t min_support = 5) {
  const DatasetManifest& m = ctx.data.manifest;
  LiftAccumulator acc(m.class_space().k());
  for (std::size_t i : m.indices(Split::Train)) {
    const Sample& s = m.records()[i];
    if (!s.label) continue;
    std::set<std::string> features;
    for (const auto& tok : detail::lift_text_tokens(s.text)) features.insert("text:" + tok);
    if (ctx.data.features) {
      const SyntheticFeatures* f = ctx.data.features->find(s.id);
      if (f) {
        for (const auto& t : f->img_sem) features.insert("image:" + t);
        for (const auto& t : f->img_spu) features.insert("image:" + t);
      }
    }
    acc.add_sample(*s.label, features);
  }

  LiftSummary summary;
  summary.entries = acc.build(min_support);
  summary.corpus_size = acc.total();

  std::string csv = "feature,label,lift,joint,support\n";
  for (const auto& e : summary.entries) {
    csv += e.feature + "," + m.class_space().label(e.label) + "," +
           std::to_string(e.lift) + "," + std::to_string(e.joint) + "," +
           std::to_string(e.feature_count) + "\n";
  }
  write_text_file(ctx.out / "lift.csv", csv);
  return summary;
}

// Renders every report-<method>.json in the output directory as one table.
// Binary tasks report accuracy and the positive class's precision, recall and
// F1; larger label sets report accuracy and the averaged F1 scores.
inline std::string collect_report(PipelineContext& ctx) {
  std::vector<std::string> methods = {"base", "mid", "mrid", "mctd", "mme-jd"};
  std::vector<json> found;
  for (const auto& method : methods) {
    std::filesystem::path p = ctx.out / ("report-" + method + ".json");
    if (!std::filesystem::exists(p)) continue;
    found.push_back(parse_json(read_text_file(p), p.string()));
  }
  if (found.empty())
    throw ConfigError("no reports under " + ctx.out.string() +
                      "; run `mmdebias run <method>` first");

  std::size_t k = ctx.data.manifest.class_space().k();
  std::string text;
  char line[160];
  if (k == 2) {
    std::snprintf(line, sizeof(line), "%-8s %6s %8s %8s %8s %8s\n", "method", "n", "acc",
                  "prec", "recall", "f1");
    text += line;
    for (const auto& j : found) {
      const json& pc = j.at("per_class").at(1);
      std::snprintf(line, sizeof(line), "%-8s %6llu %8.2f %8.2f %8.2f %8.2f\n",
                    j.value("method", std::string()).c_str(),
                    static_cast<unsigned long long>(j.value("n", 0ull)),
                    percent_2dp(j.value("accuracy", 0.0)),
                    percent_2dp(pc.value("precision", 0.0)),
                    percent_2dp(pc.value("recall", 0.0)), percent_2dp(pc.value("f1", 0.0)));
      text += line;
    }
  } else {
    std::snprintf(line, sizeof(line), "%-8s %6s %8s %10s %12s\n", "method", "n", "acc",
                  "macro-f1", "weighted-f1");
    text += line;
    for (const auto& j : found) {
      std::snprintf(line, sizeof(line), "%-8s %6llu %8.2f %10.2f %12.2f\n",
                    j.value("method", std::string()).c_str(),
                    static_cast<unsigned long long>(j.value("n", 0ull)),
                    percent_2dp(j.value("accuracy", 0.0)),
                    percent_2dp(j.value("macro_f1", 0.0)),
                    percent_2dp(j.value("weighted_f1", 0.0)));
      text += line;
    }
  }

  json combined;
  combined["schema"] = "report-bundle/1";
  combined["dataset"] = ctx.data.manifest.name();
  json reports = json::array();
  for (auto& j : found) reports.push_back(std::move(j));
  combined["reports"] = reports;
  write_text_file(ctx.out / "report.json", combined.dump(2) + "\n");
  return text;
}

}  // namespace mmdebias
