#include <filesystem>
#include <memory>

#include <gtest/gtest.h>

#include "mmdebias/pipeline.hpp"

using namespace mmdebias;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("mmdebias-unit-pipe-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SyntheticSpec small_spec(std::size_t n_train, std::size_t n_valid, std::size_t n_test) {
  SyntheticSpec spec;
  spec.n_train = n_train;
  spec.n_valid = n_valid;
  spec.n_test = n_test;
  spec.rho_train = 0.8;
  spec.rho_test = -0.8;
  spec.label_noise = 0.2;
  spec.bias_strength = 1.5;
  spec.seed = 17;
  return spec;
}

RunConfig base_config(const fs::path& dataset_dir, const fs::path& out_dir) {
  RunConfig cfg;
  cfg.dataset_dir = dataset_dir.string();
  cfg.out_dir = out_dir.string();
  cfg.budget = 12;
  cfg.seed = 17;
  return cfg;
}

std::shared_ptr<PipelineContext> synth_context(const fs::path& root, const SyntheticSpec& spec,
                                               std::size_t workers = 1,
                                               const std::string& out_name = "out") {
  fs::path data = root / "data";
  if (!fs::exists(data / "manifest.jsonl"))
    write_synthetic_dataset(data, generate_synthetic(spec));
  RunConfig cfg = base_config(data, root / out_name);
  cfg.workers = workers;
  return make_context(cfg);
}

}  // namespace

TEST(RunConfigs, ValidationCatchesEveryKnob) {
  RunConfig good = base_config("data", "out");
  EXPECT_NO_THROW(good.validate());

  RunConfig c = good;
  c.dataset_dir = "";
  EXPECT_THROW(c.validate(), ConfigError);
  c = good;
  c.backend = "ftp";
  EXPECT_THROW(c.validate(), ConfigError);
  c = good;
  c.epsilon = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = good;
  c.weight_lower = 1.0;
  c.weight_upper = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = good;
  c.budget = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = good;
  c.workers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = good;
  c.metric = "vibes";
  EXPECT_THROW(c.validate(), ConfigError);
  c = good;
  c.mask_token = "";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunConfigs, JsonRoundTripPreservesFields) {
  RunConfig c = base_config("data", "results");
  c.backend = "remote";
  c.epsilon = 0.05;
  c.oracle_router = true;
  c.metric = "accuracy";
  c.workers = 3;
  RunConfig back = run_config_from_json(run_config_to_json(c));
  EXPECT_EQ(back.dataset_dir, "data");
  EXPECT_EQ(back.out_dir, "results");
  EXPECT_EQ(back.backend, "remote");
  EXPECT_DOUBLE_EQ(back.epsilon, 0.05);
  EXPECT_TRUE(back.oracle_router);
  EXPECT_EQ(back.metric, "accuracy");
  EXPECT_EQ(back.workers, 3u);

  json wrong;
  wrong["schema"] = "other/1";
  EXPECT_THROW(run_config_from_json(wrong), SchemaError);

  fs::path dir = fresh_dir("config");
  write_text_file(dir / "config.json", run_config_to_json(c).dump());
  EXPECT_EQ(load_run_config(dir / "config.json").metric, "accuracy");
}

TEST(DatasetIo, SyntheticDirectoryRoundTrip) {
  fs::path dir = fresh_dir("dataset-io");
  SyntheticSpec spec = small_spec(12, 6, 6);
  write_synthetic_dataset(dir / "data", generate_synthetic(spec));
  for (const char* f : {"manifest.jsonl", "features.jsonl", "annotations.jsonl", "model.json"})
    EXPECT_TRUE(fs::exists(dir / "data" / f)) << f;

  LoadedDataset loaded = load_dataset(base_config(dir / "data", dir / "out"));
  EXPECT_TRUE(loaded.synthetic);
  EXPECT_EQ(loaded.manifest.records().size(), 24u);
  ASSERT_NE(loaded.features, nullptr);
  EXPECT_EQ(loaded.features->size(), 24u);
  EXPECT_EQ(loaded.annotations.size(), 24u);
  EXPECT_DOUBLE_EQ(loaded.oracle_params.bias_strength, 1.5);
}

TEST(DatasetIo, MissingPiecesReportHelpfully) {
  fs::path dir = fresh_dir("dataset-missing");
  try {
    load_dataset(base_config(dir / "nowhere", dir / "out"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("gen-synthetic"), std::string::npos);
  }

  write_synthetic_dataset(dir / "data", generate_synthetic(small_spec(4, 2, 2)));
  fs::remove(dir / "data" / "features.jsonl");
  EXPECT_THROW(load_dataset(base_config(dir / "data", dir / "out")), ConfigError);

  write_synthetic_dataset(dir / "data2", generate_synthetic(small_spec(4, 2, 2)));
  fs::remove(dir / "data2" / "annotations.jsonl");
  LoadedDataset loaded = load_dataset(base_config(dir / "data2", dir / "out"));
  ASSERT_FALSE(loaded.warnings.empty());
  EXPECT_NE(loaded.warnings[0].find("text counterfactuals unavailable"), std::string::npos);
}

TEST(Contexts, BackendSelectionAndFrozenConfig) {
  fs::path dir = fresh_dir("contexts");
  auto ctx = synth_context(dir, small_spec(4, 2, 2));
  EXPECT_EQ(ctx->backend->id().rfind("synthetic-oracle:", 0), 0u);
  EXPECT_TRUE(fs::exists(ctx->out / "config.json"));
  EXPECT_TRUE(fs::exists(ctx->out / "cache.jsonl"));
  EXPECT_EQ(load_run_config(ctx->out / "config.json").dataset_dir, ctx->cfg.dataset_dir);

  RunConfig remote = base_config(dir / "data", dir / "out-remote");
  remote.backend = "remote";
  EXPECT_THROW(make_context(remote), ConfigError);

  auto supplied = std::make_shared<ToyExpert>("ge", ctx->data.manifest.class_space(),
                                              std::vector<std::string>{}, nullptr);
  auto remote_ctx = make_context(remote, supplied);
  EXPECT_EQ(remote_ctx->backend->id(), supplied->id());
}

TEST(Probing, CountsCallsOnceAndRerunsFree) {
  fs::path dir = fresh_dir("probe");
  auto ctx = synth_context(dir, small_spec(12, 6, 6));
  ProbeSummary first = stage_probe(*ctx);
  EXPECT_EQ(first.samples.at("train"), 12u);
  EXPECT_EQ(first.samples.at("valid"), 6u);
  EXPECT_EQ(first.samples.at("test"), 6u);
  EXPECT_EQ(first.flagged.at("train"), 0u);
  EXPECT_EQ(first.fresh_calls, 72u);
  EXPECT_EQ(first.ledger.at("probe"), 72u);

  std::string before = read_text_file(scenarios_path(ctx->out, Split::Test));
  ProbeSummary second = stage_probe(*ctx);
  EXPECT_EQ(second.fresh_calls, 0u);
  EXPECT_EQ(read_text_file(scenarios_path(ctx->out, Split::Test)), before);

  std::vector<ProbeRow> rows = read_probe_rows(scenarios_path(ctx->out, Split::Train));
  ASSERT_EQ(rows.size(), 12u);
  for (const auto& r : rows) {
    EXPECT_TRUE(r.complete);
    EXPECT_TRUE(r.label.has_value());
    EXPECT_TRUE(r.scenario.complete());
    EXPECT_GT(r.stats.text_tokens, 0.0);
  }
}

TEST(Probing, WorkerCountDoesNotChangeArtifacts) {
  fs::path dir = fresh_dir("probe-workers");
  auto serial = synth_context(dir, small_spec(10, 4, 4), 1, "out1");
  auto threaded = synth_context(dir, small_spec(10, 4, 4), 2, "out2");
  stage_probe(*serial);
  stage_probe(*threaded);
  for (Split s : {Split::Train, Split::Valid, Split::Test})
    EXPECT_EQ(read_text_file(scenarios_path(serial->out, s)),
              read_text_file(scenarios_path(threaded->out, s)));
}

TEST(Artifacts, MissingPrerequisiteNamesProducer) {
  fs::path dir = fresh_dir("artifacts");
  try {
    require_artifact(dir / "scenarios-train.jsonl", "probe");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run `mmdebias probe` first"), std::string::npos);
  }
}

TEST(StageChain, EveryStageLeavesItsArtifacts) {
  fs::path dir = fresh_dir("chain");
  auto ctx = synth_context(dir, small_spec(60, 24, 24));

  EXPECT_THROW(stage_categorize(*ctx), ConfigError);
  stage_probe(*ctx);

  CategorizeSummary cats = stage_categorize(*ctx);
  EXPECT_EQ(cats.per_split.at("train").total, 60u);
  EXPECT_EQ(cats.per_split.at("test").total, 24u);
  for (Split s : {Split::Train, Split::Valid, Split::Test})
    EXPECT_TRUE(fs::exists(categorization_path(ctx->out, s)));

  EmitSummary emitted = stage_emit(*ctx);
  std::size_t n1 = 0, n2 = 0, n3 = 0;
  for (const auto& c : read_categorization(categorization_path(ctx->out, Split::Train))) {
    if (c.category == DebiasCategory::ImageDebias) ++n1;
    if (c.category == DebiasCategory::TextDebias) ++n2;
    if (c.category == DebiasCategory::BothDebias) ++n3;
  }
  EXPECT_EQ(emitted.ge, 60u);
  EXPECT_EQ(emitted.ide, emitted.ge + n1 + n3);
  EXPECT_EQ(emitted.tde, emitted.ge + n2 + n3);
  EXPECT_GT(emitted.router_train, 0u);
  EXPECT_GT(emitted.router_valid, 0u);
  for (const char* f : {"train-ge.jsonl", "train-ide.jsonl", "train-tde.jsonl",
                        "router-train.jsonl", "router-valid.jsonl"})
    EXPECT_TRUE(fs::exists(ctx->out / f)) << f;

  TrainExpertsSummary experts = stage_train_experts(*ctx);
  EXPECT_EQ(experts.records.at("ge"), 60u);
  EXPECT_EQ(experts.records.at("mctd"), emitted.ide + (emitted.tde - emitted.ge));
  for (const char* f :
       {"expert-ge.json", "expert-ide.json", "expert-tde.json", "expert-mctd.json"})
    EXPECT_TRUE(fs::exists(ctx->out / f)) << f;

  TrainRouterSummary router = stage_train_router(*ctx);
  EXPECT_EQ(router.train_pairs, emitted.router_train);
  EXPECT_FALSE(router.degenerate);
  EXPECT_TRUE(fs::exists(ctx->out / "router.json"));

  TuneSummary tuned = stage_tune(*ctx);
  EXPECT_TRUE(fs::exists(ctx->out / "weights-mid.json"));
  EXPECT_TRUE(fs::exists(ctx->out / "trace-mid.jsonl"));
  ASSERT_TRUE(tuned.moe_weights.has_value());
  EXPECT_TRUE(fs::exists(ctx->out / "weights-moe.json"));
  EXPECT_FALSE(read_weights(ctx->out / "weights-mid.json").per_category.empty());

  MethodReport base = run_method(*ctx, "base");
  EXPECT_EQ(base.n, 24u);
  EXPECT_EQ(base.method_calls, 0u);  // probe already paid for every view
  MethodReport mid = run_method(*ctx, "mid");
  EXPECT_EQ(mid.n, 24u);
  EXPECT_EQ(mid.method_calls, 0u);
  for (const char* f : {"report-base.json", "predictions-base.jsonl", "report-mid.json",
                        "predictions-mid.jsonl"})
    EXPECT_TRUE(fs::exists(ctx->out / f)) << f;

  MethodReport mctd = run_method(*ctx, "mctd-eval");
  EXPECT_EQ(mctd.method, "mctd");
  EXPECT_TRUE(fs::exists(ctx->out / "report-mctd.json"));

  EXPECT_THROW(run_method(*ctx, "zap"), ConfigError);

  LineRecordFile preds = read_line_records(ctx->out / "predictions-base.jsonl", "predictions");
  ASSERT_EQ(preds.records.size(), 24u);
  std::string predicted = preds.records[0].at("predicted").get<std::string>();
  EXPECT_TRUE(predicted == "class0" || predicted == "class1");

  LiftSummary lift = stage_lift(*ctx, 1);
  EXPECT_TRUE(fs::exists(ctx->out / "lift.csv"));
  std::string csv = read_text_file(ctx->out / "lift.csv");
  EXPECT_EQ(csv.rfind("feature,label,lift,joint,support\n", 0), 0u);
  EXPECT_FALSE(lift.entries.empty());
  EXPECT_EQ(lift.corpus_size, 60u);

  std::string table = collect_report(*ctx);
  EXPECT_NE(table.find("base"), std::string::npos);
  EXPECT_NE(table.find("mid"), std::string::npos);
  EXPECT_NE(table.find("method"), std::string::npos);
}

TEST(Evaluation, UnlabeledTestSplitIsAnError) {
  fs::path dir = fresh_dir("unlabeled");
  DatasetManifest m("text-only", ClassSpace({"neg", "pos"}));
  Sample train;
  train.id = "t0";
  train.text = "alpha";
  train.label = 0;
  m.add(train, Split::Train);
  Sample test;
  test.id = "x0";
  test.text = "beta";
  m.add(test, Split::Test);
  fs::create_directories(dir / "data");
  write_manifest(dir / "data" / "manifest.jsonl", m);

  RunConfig cfg = base_config(dir / "data", dir / "out");
  cfg.backend = "remote";
  auto predictor = std::make_shared<ToyExpert>("ge", m.class_space(),
                                               std::vector<std::string>{}, nullptr);
  auto ctx = make_context(cfg, predictor);
  EXPECT_THROW(run_method(*ctx, "base"), EmptyEvaluationError);
}

TEST(Evaluation, WeightsFileOverridesTunedArtifact) {
  fs::path dir = fresh_dir("weights-override");
  auto ctx = synth_context(dir, small_spec(12, 6, 6));

  RunConfig missing = ctx->cfg;
  missing.out_dir = (dir / "out-missing").string();
  try {
    run_method(*make_context(missing), "mid");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("mmdebias tune"), std::string::npos);
  }

  WeightSet custom;
  custom.alpha = 0.125;
  custom.beta = 0.25;
  write_weights(dir / "custom-weights.json", custom);
  RunConfig with_file = ctx->cfg;
  with_file.out_dir = (dir / "out-custom").string();
  with_file.weights_file = (dir / "custom-weights.json").string();
  MethodReport report = run_method(*make_context(with_file), "mid");
  EXPECT_DOUBLE_EQ(report.weights.alpha, 0.125);
  EXPECT_DOUBLE_EQ(report.weights.beta, 0.25);
  EXPECT_EQ(report.n, 6u);
  EXPECT_EQ(report.method_calls, 18u);  // fresh out dir means a cold cache
  EXPECT_TRUE(report.cold_cache_budget_ok);
}

TEST(Reports, CollectingWithoutRunsFails) {
  fs::path dir = fresh_dir("no-reports");
  auto ctx = synth_context(dir, small_spec(4, 2, 2));
  EXPECT_THROW(collect_report(*ctx), ConfigError);
}
