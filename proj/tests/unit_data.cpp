#include <filesystem>
#include <memory>

#include <gtest/gtest.h>

#include "mmdebias/backend.hpp"
#include "mmdebias/datasets.hpp"
#include "mmdebias/remote.hpp"
#include "mmdebias/router.hpp"
#include "mmdebias/synthetic.hpp"

using namespace mmdebias;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mmdebias-unit-" + name);
}

Sample sample(std::string id, std::string text, std::optional<std::size_t> label) {
  Sample s;
  s.id = std::move(id);
  s.text = std::move(text);
  s.label = label;
  return s;
}

}  // namespace

TEST(Manifests, AddFindAndSplits) {
  DatasetManifest m("demo", ClassSpace({"neg", "pos"}));
  m.add(sample("a", "one", 0), Split::Train);
  m.add(sample("b", "two", 1), Split::Test);
  m.add(sample("c", "three", std::nullopt), Split::Train);
  EXPECT_THROW(m.add(sample("a", "dup", 0), Split::Train), DataError);
  EXPECT_EQ(m.records().size(), 3u);
  ASSERT_NE(m.find("b"), nullptr);
  EXPECT_EQ(m.find("b")->text, "two");
  EXPECT_EQ(m.find("zzz"), nullptr);
  EXPECT_EQ(m.indices(Split::Train), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(m.split_of(1), Split::Test);
}

TEST(Manifests, WriteIngestRoundTrip) {
  DatasetManifest m("demo", ClassSpace({"neg", "pos"}));
  m.add(sample("a", "one", 0), Split::Train);
  m.add(sample("b", "two", 1), Split::Valid);
  m.add(sample("c", "three", std::nullopt), Split::Test);
  std::filesystem::path path = temp_file("manifest.jsonl");
  write_manifest(path, m);
  IngestResult back = ingest(path);
  EXPECT_EQ(back.manifest.name(), "demo");
  EXPECT_EQ(back.manifest.class_space().labels(), m.class_space().labels());
  ASSERT_EQ(back.manifest.records().size(), 3u);
  EXPECT_EQ(back.manifest.records()[0].label, std::optional<std::size_t>(0));
  EXPECT_EQ(back.manifest.records()[2].label, std::nullopt);
  EXPECT_EQ(back.manifest.split_of(1), Split::Valid);
  EXPECT_EQ(back.class_counts.at(1), 1u);
  std::filesystem::remove(path);
}

TEST(Manifests, IngestRejectsBadLabels) {
  std::filesystem::path path = temp_file("manifest-bad.jsonl");
  json header;
  header["schema"] = "manifest/1";
  header["labels"] = std::vector<std::string>{"neg", "pos"};
  json bad_name;
  bad_name["id"] = "x";
  bad_name["label"] = "zebra";
  write_line_records(path, header, {bad_name});
  EXPECT_THROW(ingest(path), DataError);
  json bad_index;
  bad_index["id"] = "x";
  bad_index["label"] = 7;
  write_line_records(path, header, {bad_index});
  EXPECT_THROW(ingest(path), DataError);
  std::filesystem::remove(path);
}

TEST(Manifests, AnnotationsRoundTrip) {
  SemanticAnnotation a;
  a.sample_id = "s1";
  a.semantic_phrases = {"cat", "dog"};
  a.context_phrases = {"sofa"};
  std::filesystem::path path = temp_file("annotations.jsonl");
  write_annotations(path, {a});
  std::map<std::string, SemanticAnnotation> back = read_annotations(path);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back.at("s1").semantic_phrases, a.semantic_phrases);
  EXPECT_EQ(back.at("s1").context_phrases, a.context_phrases);
  std::filesystem::remove(path);
}

TEST(ReversedLabels, BinaryFlipsAndValidation) {
  EXPECT_EQ(reversed_label(0, 2, std::nullopt), 1u);
  EXPECT_EQ(reversed_label(1, 2, std::nullopt), 0u);
  EXPECT_THROW(reversed_label(0, 1, std::nullopt), UnsupportedError);
  EXPECT_THROW(reversed_label(2, 2, std::nullopt), IndexError);
}

TEST(ReversedLabels, LeastLikelyPicksArgmin) {
  ProbVector p0({0.5, 0.3, 0.2}, true);
  EXPECT_EQ(reversed_label(0, 3, p0), 2u);
  EXPECT_EQ(reversed_label(2, 3, p0), 1u);
  EXPECT_THROW(reversed_label(0, 3, std::nullopt), ConfigError);
  EXPECT_THROW(reversed_label(0, 3, ProbVector({0.5, 0.5}, true)), ShapeError);
}

TEST(ReversedLabels, SeededUniformAvoidsGoldDeterministically) {
  for (std::uint64_t salt = 0; salt < 50; ++salt) {
    std::size_t r = reversed_label(1, 4, std::nullopt, ReversePolicy::SeededUniform, 9, salt);
    EXPECT_NE(r, 1u);
    EXPECT_LT(r, 4u);
    EXPECT_EQ(r, reversed_label(1, 4, std::nullopt, ReversePolicy::SeededUniform, 9, salt));
  }
}

namespace {

CategorizationRecord cat_record(const std::string& id, DebiasCategory c) {
  CategorizationRecord r;
  r.sample_id = id;
  r.epsilon = 0.1;
  r.category = c;
  return r;
}

struct EmitFixture {
  DatasetManifest manifest{"emit", ClassSpace({"neg", "pos"})};
  std::vector<CategorizationRecord> cats;
  std::map<std::string, SemanticAnnotation> annotations;
  CounterfactualAssets assets;

  EmitFixture() {
    manifest.add(sample("s0", "plain zero", 0), Split::Train);
    manifest.add(sample("s1", "needs image fix", 1), Split::Train);
    manifest.add(sample("s2", "the cat sat", 0), Split::Train);
    manifest.add(sample("s3", "the dog ran", 1), Split::Train);
    manifest.add(sample("s4", "excluded row", 0), Split::Train);
    manifest.add(sample("s5", "no label here", std::nullopt), Split::Train);
    manifest.add(sample("s6", "image cf absent", 1), Split::Train);
    manifest.add(sample("s7", "annotation absent", 0), Split::Train);
    cats.push_back(cat_record("s0", DebiasCategory::NoDebias));
    cats.push_back(cat_record("s1", DebiasCategory::ImageDebias));
    cats.push_back(cat_record("s2", DebiasCategory::TextDebias));
    cats.push_back(cat_record("s3", DebiasCategory::BothDebias));
    cats.push_back(cat_record("s4", DebiasCategory::Exclude));
    cats.push_back(cat_record("ghost", DebiasCategory::ImageDebias));
    cats.push_back(cat_record("s5", DebiasCategory::NoDebias));
    cats.push_back(cat_record("s6", DebiasCategory::ImageDebias));
    cats.push_back(cat_record("s7", DebiasCategory::TextDebias));
    SemanticAnnotation a2;
    a2.sample_id = "s2";
    a2.semantic_phrases = {"cat"};
    annotations["s2"] = a2;
    SemanticAnnotation a3;
    a3.sample_id = "s3";
    a3.semantic_phrases = {"dog"};
    annotations["s3"] = a3;
    assets.annotations = &annotations;
    assets.image_cf_paths["s1"] = "cf/s1.png";
    assets.image_cf_paths["s3"] = "cf/s3.png";
  }
};

bool has_skip(const std::vector<std::string>& skipped, const std::string& needle) {
  for (const auto& s : skipped)
    if (s.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(Emission, BuildsFourSupervisionSets) {
  EmitFixture fx;
  EmittedTrainingSets out = emit_training_sets(fx.manifest, fx.cats, fx.assets);

  EXPECT_EQ(out.ge.records.size(), 7u);
  EXPECT_EQ(out.ide.records.size(), 9u);
  EXPECT_EQ(out.tde.records.size(), 9u);
  EXPECT_EQ(out.router.records.size(), 6u);

  const EmittedRecord& ide_cf = out.ide.records[7];
  EXPECT_EQ(ide_cf.sample_id, "s1");
  EXPECT_EQ(ide_cf.image_variant, Variant::SpuriousOnly);
  EXPECT_EQ(ide_cf.image_ref, "cf/s1.png");
  EXPECT_EQ(ide_cf.target, 0u);

  const EmittedRecord& tde_cf = out.tde.records[7];
  EXPECT_EQ(tde_cf.sample_id, "s2");
  EXPECT_EQ(tde_cf.text_variant, Variant::SpuriousOnly);
  EXPECT_EQ(tde_cf.text, "the [MASK] sat");
  EXPECT_EQ(tde_cf.target, 1u);

  EXPECT_TRUE(has_skip(out.skipped, "s5: unlabeled, excluded from supervision"));
  EXPECT_TRUE(has_skip(out.skipped, "ghost: categorized but absent from manifest"));
  EXPECT_TRUE(has_skip(out.skipped, "s5: categorized but unlabeled"));
  EXPECT_TRUE(has_skip(out.skipped, "s6: image counterfactual missing"));
  EXPECT_TRUE(has_skip(out.skipped, "s7: text counterfactual missing (no annotation)"));
}

TEST(Emission, RerunsAreIdentical) {
  EmitFixture fx;
  EmittedTrainingSets a = emit_training_sets(fx.manifest, fx.cats, fx.assets);
  EmittedTrainingSets b = emit_training_sets(fx.manifest, fx.cats, fx.assets);
  ASSERT_EQ(a.ide.records.size(), b.ide.records.size());
  for (std::size_t i = 0; i < a.ide.records.size(); ++i) {
    EXPECT_EQ(a.ide.records[i].sample_id, b.ide.records[i].sample_id);
    EXPECT_EQ(a.ide.records[i].target, b.ide.records[i].target);
    EXPECT_EQ(a.ide.records[i].text, b.ide.records[i].text);
  }
  EXPECT_EQ(a.skipped, b.skipped);
}

TEST(Emission, MulticlassReversalNeedsScenarioOutputs) {
  DatasetManifest m("tri", ClassSpace({"a", "b", "c"}));
  m.add(sample("x", "text", 0), Split::Train);
  std::vector<CategorizationRecord> cats{cat_record("x", DebiasCategory::ImageDebias)};
  CounterfactualAssets assets;
  assets.image_cf_always_available = true;

  EmittedTrainingSets missing = emit_training_sets(m, cats, assets);
  EXPECT_EQ(missing.ide.records.size(), 1u);
  EXPECT_TRUE(has_skip(missing.skipped, "x: reversed label needs p0, scenario output missing"));

  std::map<std::string, ScenarioOutputs> scen;
  scen["x"] = {ProbVector({0.5, 0.3, 0.2}, true), ProbVector({0.4, 0.3, 0.3}, true),
               ProbVector({0.4, 0.3, 0.3}, true)};
  assets.scenarios = &scen;
  EmittedTrainingSets ok = emit_training_sets(m, cats, assets);
  ASSERT_EQ(ok.ide.records.size(), 2u);
  EXPECT_EQ(ok.ide.records[1].target, 2u);

  EmitConfig uniform;
  uniform.policy = ReversePolicy::SeededUniform;
  CounterfactualAssets bare;
  bare.image_cf_always_available = true;
  EmittedTrainingSets drawn = emit_training_sets(m, cats, bare, uniform);
  ASSERT_EQ(drawn.ide.records.size(), 2u);
  EXPECT_NE(drawn.ide.records[1].target, 0u);
}

TEST(Synthetic, GenerationIsDeterministicAndBalanced) {
  SyntheticSpec spec;
  spec.n_train = 40;
  spec.n_valid = 10;
  spec.n_test = 10;
  SyntheticDataset a = generate_synthetic(spec);
  SyntheticDataset b = generate_synthetic(spec);
  EXPECT_EQ(a.manifest.records().size(), 60u);
  EXPECT_EQ(a.features.size(), 60u);
  EXPECT_EQ(a.annotations.size(), 60u);
  for (std::size_t i = 0; i < a.manifest.records().size(); ++i) {
    EXPECT_EQ(a.manifest.records()[i].text, b.manifest.records()[i].text);
    EXPECT_EQ(a.manifest.records()[i].label, b.manifest.records()[i].label);
  }
  std::size_t zeros = 0;
  for (std::size_t i : a.manifest.indices(Split::Train))
    if (a.manifest.records()[i].label == 0u) ++zeros;
  EXPECT_EQ(zeros, 20u);
}

TEST(Synthetic, CorrelationExtremesAlignSpuriousTokens) {
  SyntheticSpec spec;
  spec.n_train = 30;
  spec.n_valid = 4;
  spec.n_test = 4;
  spec.rho_train = 1.0;
  spec.rho_test = -1.0;
  SyntheticDataset data = generate_synthetic(spec);
  for (std::size_t i : data.manifest.indices(Split::Train)) {
    const Sample& s = data.manifest.records()[i];
    const SyntheticFeatures* f = data.features.find(s.id);
    ASSERT_NE(f, nullptr);
    std::string aligned = "tu0c" + std::to_string(*s.label);
    EXPECT_EQ(f->text_spu[0], aligned);
  }
  for (std::size_t i : data.manifest.indices(Split::Test)) {
    const Sample& s = data.manifest.records()[i];
    const SyntheticFeatures* f = data.features.find(s.id);
    std::string aligned = "tu0c" + std::to_string(*s.label);
    EXPECT_NE(f->text_spu[0], aligned);
  }
}

TEST(Synthetic, VocabularyCoversEverySlotClassPair) {
  SyntheticSpec spec;
  std::vector<std::string> v = synthetic_vocabulary(spec);
  EXPECT_EQ(v.size(), (2 + 1 + 2 + 1) * 2u);
  EXPECT_NE(std::find(v.begin(), v.end(), "ts0c0"), v.end());
  EXPECT_NE(std::find(v.begin(), v.end(), "iu0c1"), v.end());
  EXPECT_THROW(SyntheticSpec{.k = 1}.validate(), SpecError);
}

namespace {

struct OracleFixture {
  ClassSpace cs{{"class0", "class1"}};
  SyntheticFeatureTable table;
  Sample s = sample("x", "ts0c0 tu0c1", 0);

  explicit OracleFixture(double bias_strength = 1.0) {
    SyntheticFeatures f;
    f.text_sem = {"ts0c0"};
    f.text_spu = {"tu0c1"};
    f.img_sem = {"is0c0"};
    f.img_spu = {"iu0c1"};
    table.put("x", f);
    params.bias_strength = bias_strength;
  }

  SyntheticModelParams params;
  SyntheticModel model() const { return SyntheticModel(cs, table, params); }
};

}  // namespace

TEST(OracleModel, LogitsFollowFeatureWeights) {
  OracleFixture fx;
  SyntheticModel m = fx.model();
  SampleView full = original_view(fx.s);
  EXPECT_NEAR(m.predict(full).scores[0], 0.5986876601124521, 1e-12);

  SampleView text_masked = full;
  text_masked.text_variant = Variant::Masked;
  EXPECT_NEAR(m.predict(text_masked).scores[0], 0.549833997312478, 1e-12);

  SampleView image_masked = full;
  image_masked.image_variant = Variant::Masked;
  EXPECT_NEAR(m.predict(image_masked).scores[0], 0.549833997312478, 1e-12);

  SampleView image_spurious = full;
  image_spurious.image_variant = Variant::SpuriousOnly;
  EXPECT_NEAR(m.predict(image_spurious).scores[0], 0.31002551887238755, 1e-12);
}

TEST(OracleModel, BiasStrengthScalesSpuriousTerms) {
  OracleFixture fx(2.0);
  EXPECT_NEAR(fx.model().predict(original_view(fx.s)).scores[0], 0.16798161486607552, 1e-12);
}

TEST(OracleModel, IdEncodesParameters) {
  OracleFixture a(1.0), b(2.0);
  EXPECT_NE(a.model().id(), b.model().id());
  EXPECT_EQ(a.model().id().rfind("synthetic-oracle:", 0), 0u);
}

namespace {

EmittedTrainingSet tiny_text_set() {
  EmittedTrainingSet set;
  set.role = "ge";
  for (int rep = 0; rep < 3; ++rep) {
    EmittedRecord a;
    a.sample_id = "a" + std::to_string(rep);
    a.text = "ts0c0";
    a.target = 0;
    set.records.push_back(a);
    EmittedRecord b;
    b.sample_id = "b" + std::to_string(rep);
    b.text = "ts0c1";
    b.target = 1;
    set.records.push_back(b);
  }
  return set;
}

}  // namespace

TEST(ToyExperts, TrainsSeparableSetDeterministically) {
  ClassSpace cs({"class0", "class1"});
  EmittedTrainingSet set = tiny_text_set();
  ExpertTrainResult a = train_toy_expert("ge", set, cs, nullptr);
  ExpertTrainResult b = train_toy_expert("ge", set, cs, nullptr);
  EXPECT_TRUE(a.warnings.empty());
  EXPECT_EQ(a.expert->weights(), b.expert->weights());
  EXPECT_FALSE(a.losses.empty());
  EXPECT_LT(a.losses.back(), a.losses.front());
  ProbVector p0 = a.expert->predict_features(a.expert->featurize("ts0c0", "", Variant::Masked));
  ProbVector p1 = a.expert->predict_features(a.expert->featurize("ts0c1", "", Variant::Masked));
  EXPECT_EQ(arg_top(p0), 0u);
  EXPECT_EQ(arg_top(p1), 1u);
  EXPECT_THROW(train_toy_expert("ge", EmittedTrainingSet{}, cs, nullptr), DataError);
}

TEST(ToyExperts, DebiasRoleWithoutCounterfactualsWarns) {
  ClassSpace cs({"class0", "class1"});
  ExpertTrainResult r = train_toy_expert("ide", tiny_text_set(), cs, nullptr);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("behaves like the general expert"), std::string::npos);
}

TEST(ToyExperts, SaveLoadRoundTrip) {
  ClassSpace cs({"class0", "class1"});
  ExpertTrainResult r = train_toy_expert("ge", tiny_text_set(), cs, nullptr);
  std::filesystem::path path = temp_file("expert.json");
  save_toy_expert(path, *r.expert);
  std::shared_ptr<ToyExpert> back = load_toy_expert(path, nullptr);
  EXPECT_EQ(back->weights(), r.expert->weights());
  EXPECT_EQ(back->vocab(), r.expert->vocab());
  EXPECT_EQ(back->id(), r.expert->id());
  EXPECT_EQ(back->role(), "ge");
  write_text_file(path, "{\"schema\":\"other/1\"}");
  EXPECT_THROW(load_toy_expert(path, nullptr), SchemaError);
  std::filesystem::remove(path);
}

TEST(Caching, PersistsAcrossReopen) {
  std::filesystem::path path = temp_file("cache.jsonl");
  std::filesystem::remove(path);
  CacheKey key{"model-1", "s1", "t=O;i=O", "v1"};
  ProbVector value({0.9, 0.1}, true);
  {
    PredictionCache cache(path);
    EXPECT_EQ(cache.get(key), std::nullopt);
    cache.put(key, value);
    cache.put(key, ProbVector({0.5, 0.5}, true));
    EXPECT_EQ(cache.size(), 1u);
  }
  PredictionCache reopened(path);
  std::optional<ProbVector> hit = reopened.get(key);
  ASSERT_TRUE(hit.has_value());
  EXPECT_EQ(hit->scores, value.scores);
  std::filesystem::remove(path);
}

TEST(Caching, LedgerCountsOnlyFreshCalls) {
  std::filesystem::path path = temp_file("cache-ledger.jsonl");
  std::filesystem::remove(path);
  PredictionCache cache(path);
  CallLedger ledger;
  OracleFixture fx;
  SyntheticModel model = fx.model();
  SampleView view = original_view(fx.s);

  ProbVector first = cached_predict(model, view, &cache, &ledger, "probe");
  ProbVector second = cached_predict(model, view, &cache, &ledger, "probe");
  EXPECT_EQ(ledger.count("probe"), 1u);
  EXPECT_EQ(first.scores, second.scores);

  cached_predict(model, view, &cache, &ledger, "probe", "v2");
  EXPECT_EQ(ledger.count("probe"), 2u);

  SampleView masked = view;
  masked.text_variant = Variant::Masked;
  cached_predict(model, masked, &cache, &ledger, "probe");
  EXPECT_EQ(ledger.count("probe"), 3u);
  std::filesystem::remove(path);
}

namespace {

std::string chat_body(std::vector<std::pair<std::string, double>> top) {
  json cands = json::array();
  for (const auto& [tok, lp] : top) {
    json c;
    c["token"] = tok;
    c["logprob"] = lp;
    cands.push_back(c);
  }
  json body;
  body["choices"][0]["logprobs"]["content"][0]["top_logprobs"] = cands;
  return body.dump();
}

}  // namespace

TEST(Verbalizers, RenormalizesMatchedLogprobs) {
  ProbVector p =
      parse_verbalizer_scores(chat_body({{" yes", -0.1}, {"No", -2.4}}), {"yes", "no"}, 1e-6);
  ASSERT_EQ(p.k(), 2u);
  EXPECT_TRUE(p.normalized);
  EXPECT_NEAR(p.scores[0], 0.9088770389851439, 1e-12);
  EXPECT_NEAR(p.scores[1], 0.09112296101485615, 1e-12);
}

TEST(Verbalizers, MissingClassGetsFloor) {
  ProbVector p = parse_verbalizer_scores(chat_body({{"yes", -0.1}}), {"yes", "no"}, 1e-6);
  EXPECT_NEAR(p.scores[0], 0.9999988948303032, 1e-12);
  EXPECT_NEAR(p.scores[1], 1.1051696966742393e-06, 1e-15);
}

TEST(Verbalizers, DuplicateTokensKeepMaxProbability) {
  ProbVector p = parse_verbalizer_scores(chat_body({{"yes", -3.0}, {"YES", -0.5}, {"no", -0.5}}),
                                         {"yes", "no"}, 1e-6);
  EXPECT_NEAR(p.scores[0], 0.5, 1e-12);
  EXPECT_NEAR(p.scores[1], 0.5, 1e-12);
}

TEST(Verbalizers, RejectsMalformedReplies) {
  EXPECT_THROW(parse_verbalizer_scores("not json", {"yes", "no"}, 1e-6), ProtocolError);
  EXPECT_THROW(parse_verbalizer_scores("{}", {"yes", "no"}, 1e-6), ProtocolError);
  EXPECT_THROW(parse_verbalizer_scores(chat_body({}), {"yes", "no"}, 1e-6), ProtocolError);
  EXPECT_THROW(parse_verbalizer_scores(chat_body({{"maybe", -0.1}}), {"yes", "no"}, 1e-6),
               ProtocolError);
}

namespace {

RemoteConfig replay_config() {
  RemoteConfig cfg;
  cfg.verbalizers = {"no", "yes"};
  cfg.backoff_ms = 0;
  cfg.max_retries = 2;
  return cfg;
}

}  // namespace

TEST(RemoteCalls, SuccessfulProbeParsesScores) {
  auto transport = std::make_shared<ReplayTransport>(std::vector<ReplayTransport::Exchange>{
      {"", {200, chat_body({{"yes", -0.1}, {"no", -2.4}})}}});
  RemoteBackend backend(replay_config(), ClassSpace({"neg", "pos"}), transport);
  EXPECT_EQ(backend.id(), "remote:local");
  Sample s = sample("r1", "hello", std::nullopt);
  ProbVector p = backend.predict(original_view(s));
  EXPECT_NEAR(p.scores[1], 0.9088770389851439, 1e-12);
}

TEST(RemoteCalls, ClientErrorFailsWithoutRetry) {
  auto transport = std::make_shared<ReplayTransport>(
      std::vector<ReplayTransport::Exchange>{{"", {400, "bad request"}},
                                             {"", {200, "unused"}}});
  RemoteBackend backend(replay_config(), ClassSpace({"neg", "pos"}), transport);
  Sample s = sample("r1", "hello", std::nullopt);
  try {
    backend.predict(original_view(s));
    FAIL() << "expected BackendError";
  } catch (const BackendError& e) {
    EXPECT_NE(std::string(e.what()).find("rejected the request"), std::string::npos);
  }
}

TEST(RemoteCalls, ServerErrorsRetryThenSucceed) {
  auto transport = std::make_shared<ReplayTransport>(std::vector<ReplayTransport::Exchange>{
      {"", {500, "boom"}}, {"", {200, chat_body({{"yes", -0.1}, {"no", -2.4}})}}});
  RemoteBackend backend(replay_config(), ClassSpace({"neg", "pos"}), transport);
  Sample s = sample("r1", "hello", std::nullopt);
  EXPECT_NO_THROW(backend.predict(original_view(s)));
}

TEST(RemoteCalls, ExhaustedRetriesReportAttemptCount) {
  auto transport = std::make_shared<ReplayTransport>(std::vector<ReplayTransport::Exchange>{
      {"", {500, "boom"}}, {"", {502, "boom"}}, {"", {503, "boom"}}});
  RemoteBackend backend(replay_config(), ClassSpace({"neg", "pos"}), transport);
  Sample s = sample("r1", "hello", std::nullopt);
  try {
    backend.predict(original_view(s));
    FAIL() << "expected BackendError";
  } catch (const BackendError& e) {
    EXPECT_NE(std::string(e.what()).find("after 3 attempts"), std::string::npos);
  }
}

TEST(RemoteCalls, StrictReplayChecksRequestFingerprint) {
  auto transport = std::make_shared<ReplayTransport>(
      std::vector<ReplayTransport::Exchange>{{"0123456789abcdef", {200, "unused"}}}, true);
  RemoteBackend backend(replay_config(), ClassSpace({"neg", "pos"}), transport);
  Sample s = sample("r1", "hello", std::nullopt);
  EXPECT_THROW(backend.predict(original_view(s)), BackendError);
}

TEST(RemoteCalls, ReplayFileRoundTrip) {
  std::filesystem::path path = temp_file("replay.jsonl");
  json header;
  header["schema"] = "replay/1";
  json row;
  row["status"] = 200;
  row["body"] = chat_body({{"yes", -0.1}, {"no", -2.4}});
  write_line_records(path, header, {row});
  ReplayTransport replay = ReplayTransport::from_file(path);
  std::shared_ptr<Transport> transport(&replay, [](Transport*) {});
  RemoteBackend backend(replay_config(), ClassSpace({"neg", "pos"}), transport);
  Sample s = sample("r1", "hello", std::nullopt);
  EXPECT_NEAR(backend.predict(original_view(s)).scores[1], 0.9088770389851439, 1e-12);
  std::filesystem::remove(path);
}

TEST(RemoteCalls, ConfigRequiresVerbalizerPerClass) {
  RemoteConfig cfg = replay_config();
  cfg.verbalizers = {"yes"};
  EXPECT_THROW(
      RemoteBackend(cfg, ClassSpace({"neg", "pos"}), std::make_shared<ReplayTransport>(
                                                         std::vector<ReplayTransport::Exchange>{})),
      ConfigError);
}

TEST(RemoteCalls, MessagesCarryInstructionAndText) {
  auto transport =
      std::make_shared<ReplayTransport>(std::vector<ReplayTransport::Exchange>{});
  RemoteBackend backend(replay_config(), ClassSpace({"neg", "pos"}), transport);
  Sample s = sample("r1", "hello there", std::nullopt);
  json messages = backend.build_messages(original_view(s));
  ASSERT_EQ(messages.size(), 1u);
  std::string content = messages[0]["content"].get<std::string>();
  EXPECT_NE(content.find("answer with: yes"), std::string::npos);
  EXPECT_NE(content.find("Text input: hello there"), std::string::npos);
}

namespace {

ScenarioOutputs router_scenario() {
  return {ProbVector({0.2, 0.8}, true), ProbVector({0.5, 0.5}, true),
          ProbVector({0.7, 0.3}, true)};
}

RouterFeatures onehot_feature(int category) {
  RouterFeatures f;
  f.schema_id = router_feature_schema(2);
  f.v.assign(13, 0.0);
  f.v[category] = 1.0;
  return f;
}

}  // namespace

TEST(Routing, FeatureLayoutIsProbsDiffsStats) {
  RouterFeatures f = featurize(router_scenario(), {3.0, 0.5, 0.25});
  EXPECT_EQ(f.schema_id, "router-features/1:k=2");
  ASSERT_EQ(f.v.size(), 13u);
  EXPECT_DOUBLE_EQ(f.v[0], 0.2);
  EXPECT_DOUBLE_EQ(f.v[2], 0.5);
  EXPECT_DOUBLE_EQ(f.v[4], 0.7);
  EXPECT_DOUBLE_EQ(f.v[6], 0.2 - 0.5);
  EXPECT_DOUBLE_EQ(f.v[8], 0.2 - 0.7);
  EXPECT_DOUBLE_EQ(f.v[10], std::log1p(3.0));
  EXPECT_DOUBLE_EQ(f.v[11], 0.5);
  EXPECT_DOUBLE_EQ(f.v[12], 0.25);
}

TEST(Routing, ZeroModelRoutesToLowestCategory) {
  RouterModel zero;
  zero.schema_id = router_feature_schema(2);
  zero.dim = 13;
  zero.weights.assign(4 * 14, 0.0);
  EXPECT_EQ(route(zero, featurize(router_scenario(), {})), 0);

  RouterFeatures wrong_schema = onehot_feature(1);
  wrong_schema.schema_id = "router-features/1:k=3";
  EXPECT_THROW(zero.scores(wrong_schema), SchemaError);
  RouterFeatures wrong_dim = onehot_feature(1);
  wrong_dim.v.pop_back();
  EXPECT_THROW(zero.scores(wrong_dim), ShapeError);
}

TEST(Routing, LearnsSeparableCategories) {
  std::vector<RouterFeatures> features;
  std::vector<int> labels;
  for (int rep = 0; rep < 10; ++rep)
    for (int c = 0; c < 4; ++c) {
      features.push_back(onehot_feature(c));
      labels.push_back(c);
    }
  RouterTrainResult r = train_router(features, labels, features, labels);
  EXPECT_TRUE(r.warnings.empty());
  EXPECT_FALSE(r.model.degenerate);
  for (int c = 0; c < 4; ++c) EXPECT_EQ(route(r.model, onehot_feature(c)), c);
  RouterEvaluation ev = evaluate_router(r.model, features, labels);
  EXPECT_NEAR(ev.mean_f_half_debias, 1.0, 1e-12);
  EXPECT_EQ(ev.confusion.diagonal(), 40u);

  RouterTrainResult again = train_router(features, labels, features, labels);
  EXPECT_EQ(r.model.weights, again.model.weights);
}

TEST(Routing, SingleClassTrainingDegenerates) {
  std::vector<RouterFeatures> features{onehot_feature(2), onehot_feature(2)};
  std::vector<int> labels{2, 2};
  RouterTrainResult r = train_router(features, labels, {}, {});
  EXPECT_TRUE(r.model.degenerate);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("degenerate"), std::string::npos);
  EXPECT_EQ(route(r.model, onehot_feature(0)), 2);
}

TEST(Routing, TrainingInputValidation) {
  EXPECT_THROW(train_router({}, {}, {}, {}), DataError);
  EXPECT_THROW(train_router({onehot_feature(0)}, {0, 1}, {}, {}), ShapeError);
  RouterFeatures other = onehot_feature(1);
  other.schema_id = "router-features/1:k=5";
  EXPECT_THROW(train_router({onehot_feature(0), other}, {0, 1}, {}, {}), SchemaError);
  RouterModel zero;
  zero.schema_id = router_feature_schema(2);
  zero.dim = 13;
  zero.weights.assign(4 * 14, 0.0);
  EXPECT_THROW(evaluate_router(zero, {}, {}), EmptyEvaluationError);
}

TEST(Routing, SaveLoadRoundTrip) {
  std::vector<RouterFeatures> features;
  std::vector<int> labels;
  for (int c = 0; c < 4; ++c) {
    features.push_back(onehot_feature(c));
    labels.push_back(c);
  }
  RouterTrainResult r = train_router(features, labels, {}, {});
  std::filesystem::path path = temp_file("router.json");
  save_router(path, r.model);
  RouterModel back = load_router(path);
  EXPECT_EQ(back.schema_id, r.model.schema_id);
  EXPECT_EQ(back.dim, r.model.dim);
  EXPECT_EQ(back.weights, r.model.weights);
  EXPECT_EQ(back.best_epoch, r.model.best_epoch);
  write_text_file(path, "{\"schema\":\"other/9\"}");
  EXPECT_THROW(load_router(path), SchemaError);
  std::filesystem::remove(path);
}
