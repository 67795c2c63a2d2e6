// Command line front end. Every subcommand reads and writes artifacts in the
// output directory, so a pipeline can be resumed, re-run, or driven by make.

#include <cstdio>
#include <exception>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmdebias/pipeline.hpp"
#include "mmdebias/remote.hpp"

namespace {

using namespace mmdebias;

RemoteConfig remote_config_from_json(const json& j, const std::string& where) {
  RemoteConfig c;
  c.base_url = j.value("base_url", c.base_url);
  c.chat_path = j.value("chat_path", c.chat_path);
  c.model = j.value("model", c.model);
  c.verbalizers = require_field<std::vector<std::string>>(j, "verbalizers", where);
  c.prompt_version = j.value("prompt_version", c.prompt_version);
  c.api_key_env = j.value("api_key_env", c.api_key_env);
  c.send_images = j.value("send_images", c.send_images);
  c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.backoff_ms = j.value("backoff_ms", c.backoff_ms);
  c.floor = j.value("floor", c.floor);
  c.top_logprobs = j.value("top_logprobs", c.top_logprobs);
  return c;
}

std::shared_ptr<PipelineContext> open_context(RunConfig& cfg) {
  cfg.validate();
  std::shared_ptr<Predictor> backend;
  if (cfg.backend == "remote") {
    std::filesystem::path rc_path = cfg.remote_config.empty()
                                        ? std::filesystem::path(cfg.dataset_dir) / "remote.json"
                                        : std::filesystem::path(cfg.remote_config);
    if (!std::filesystem::exists(rc_path))
      throw ConfigError("remote backend needs a config file at " + rc_path.string() +
                        " (or pass --remote-config)");
    RemoteConfig rc =
        remote_config_from_json(parse_json(read_text_file(rc_path), rc_path.string()),
                                rc_path.string());
    rc.prompt_version = cfg.prompt_version;
    IngestResult pre = ingest(std::filesystem::path(cfg.dataset_dir) / "manifest.jsonl");
    backend = std::make_shared<RemoteBackend>(
        rc, pre.manifest.class_space(),
        std::make_shared<HttplibTransport>(rc.base_url, rc.timeout_seconds));
  }
  return make_context(cfg, std::move(backend));
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
}

void add_common_flags(CLI::App* cmd, RunConfig& cfg) {
  cmd->add_option("--dataset", cfg.dataset_dir, "dataset directory (manifest.jsonl inside)")
      ->required();
  cmd->add_option("--backend", cfg.backend, "predictor backend: synthetic | remote")
      ->check(CLI::IsMember({"synthetic", "remote"}));
  cmd->add_option("--annotations", cfg.annotations_file,
                  "annotation file (default <dataset>/annotations.jsonl)");
  cmd->add_option("--remote-config", cfg.remote_config,
                  "remote backend settings (default <dataset>/remote.json)");
  cmd->add_option("--epsilon", cfg.epsilon, "categorization tolerance");
  cmd->add_option("--budget", cfg.budget, "objective evaluations per weight search");
  cmd->add_option("--seed", cfg.seed, "base seed for every stochastic step");
  cmd->add_option("--workers", cfg.workers, "probe/eval thread count");
  cmd->add_option("--out", cfg.out_dir, "output directory for artifacts");
  cmd->add_flag("--oracle-router", cfg.oracle_router,
                "route by the stored categorization instead of the trained router");
  cmd->add_option("--weights-file", cfg.weights_file, "use these weights instead of tuned ones");
  cmd->add_option("--prompt-version", cfg.prompt_version, "cache namespace for prompt changes");
  cmd->add_option("--metric", cfg.metric,
                  "tuning objective: accuracy | macro-f1 | weighted-f1 | positive-f1");
  cmd->add_option("--mask-token", cfg.mask_token, "replacement token for masked phrases");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"causal-mediation debiasing pipeline for multimodal classifiers"};
  app.require_subcommand(1);

  RunConfig cfg;

  SyntheticSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-synthetic", "generate a planted-token benchmark corpus");
  gen->add_option("--out", gen_out, "dataset directory to create")->required();
  gen->add_option("--classes", spec.k, "number of classes");
  gen->add_option("--train", spec.n_train, "train split size");
  gen->add_option("--valid", spec.n_valid, "validation split size");
  gen->add_option("--test", spec.n_test, "test split size");
  gen->add_option("--rho-train", spec.rho_train, "train spurious correlation in [-1, 1]");
  gen->add_option("--rho-test", spec.rho_test, "valid/test spurious correlation in [-1, 1]");
  gen->add_option("--label-noise", spec.label_noise, "semantic slot corruption rate");
  gen->add_option("--bias-strength", spec.bias_strength, "oracle weight on spurious tokens");
  gen->add_option("--seed", spec.seed, "generator seed");

  auto* probe = app.add_subcommand("probe", "query the backend for the three scenario views");
  add_common_flags(probe, cfg);
  auto* categorize =
      app.add_subcommand("categorize", "assign each sample a debias category from its probes");
  add_common_flags(categorize, cfg);
  auto* emit =
      app.add_subcommand("emit", "materialize counterfactual training sets and router targets");
  add_common_flags(emit, cfg);
  auto* train_experts =
      app.add_subcommand("train-experts", "fit the expert classifiers on the emitted sets");
  add_common_flags(train_experts, cfg);
  auto* train_router =
      app.add_subcommand("train-router", "fit the category router on probe features");
  add_common_flags(train_router, cfg);
  auto* tune = app.add_subcommand("tune", "search correction strengths on the validation split");
  add_common_flags(tune, cfg);

  std::string method;
  auto* run = app.add_subcommand("run", "evaluate one method end to end on the test split");
  run->add_option("method", method, "base | mid | mrid | mctd | mme-jd")->required();
  add_common_flags(run, cfg);

  std::uint64_t min_support = 5;
  auto* lift = app.add_subcommand("lift", "token/label lift table over the train split");
  lift->add_option("--min-support", min_support, "drop features rarer than this");
  add_common_flags(lift, cfg);

  auto* report = app.add_subcommand("report", "combine per-method reports into one table");
  add_common_flags(report, cfg);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      SyntheticDataset data = generate_synthetic(spec);
      write_synthetic_dataset(gen_out, data);
      std::printf("wrote %zu samples to %s\n", data.manifest.records().size(), gen_out.c_str());
      return 0;
    }

    auto ctx = open_context(cfg);
    print_warnings(ctx->data.warnings);

    if (probe->parsed()) {
      ProbeSummary s = stage_probe(*ctx);
      for (const auto& [split, n] : s.samples)
        std::printf("%s: %zu samples, %zu flagged incomplete\n", split.c_str(), n,
                    s.flagged.at(split));
      std::printf("fresh backend calls: %llu\n",
                  static_cast<unsigned long long>(s.fresh_calls));
    } else if (categorize->parsed()) {
      CategorizeSummary s = stage_categorize(*ctx);
      for (const auto& [split, sum] : s.per_split) {
        std::printf("%s: %llu categorized", split.c_str(),
                    static_cast<unsigned long long>(sum.total));
        for (const auto& [cat, n] : sum.counts)
          std::printf("  %s=%llu", category_name(category_from_int(cat)),
                      static_cast<unsigned long long>(n));
        std::printf("  (%zu skipped)\n", sum.skipped.size());
      }
    } else if (emit->parsed()) {
      EmitSummary s = stage_emit(*ctx);
      print_warnings(s.skipped);
      std::printf("ge=%zu ide=%zu tde=%zu router-train=%zu router-valid=%zu\n", s.ge, s.ide,
                  s.tde, s.router_train, s.router_valid);
    } else if (train_experts->parsed()) {
      TrainExpertsSummary s = stage_train_experts(*ctx);
      print_warnings(s.warnings);
      for (const auto& [role, n] : s.records)
        std::printf("%s: %zu records, final loss %.4f\n", role.c_str(), n,
                    s.final_loss.count(role) ? s.final_loss.at(role) : 0.0);
    } else if (train_router->parsed()) {
      TrainRouterSummary s = stage_train_router(*ctx);
      print_warnings(s.warnings);
      std::printf("router: %zu train pairs, %zu valid pairs, best epoch %zu, score %.4f%s\n",
                  s.train_pairs, s.valid_pairs, s.best_epoch, s.selection_score,
                  s.degenerate ? " (degenerate)" : "");
    } else if (tune->parsed()) {
      TuneSummary s = stage_tune(*ctx);
      print_warnings(s.notes);
      std::printf("mid weights: alpha=%.4f beta=%.4f (objective %.4f)\n", s.mid_weights.alpha,
                  s.mid_weights.beta, s.mid_best);
      for (const auto& [c, ab] : s.mid_weights.per_category)
        std::printf("  category %d: alpha=%.4f beta=%.4f\n", c, ab.first, ab.second);
      if (s.moe_weights) {
        std::printf("mixture weights:\n");
        for (const auto& [c, ab] : s.moe_weights->per_category)
          std::printf("  category %d: alpha=%.4f beta=%.4f\n", c, ab.first, ab.second);
      }
    } else if (run->parsed()) {
      MethodReport r = run_method(*ctx, method);
      std::printf("%s: n=%zu skipped=%zu acc=%s macro-f1=%s calls=%llu budget-ok=%s\n",
                  r.method.c_str(), r.n, r.skipped, format_percent(r.metrics.accuracy).c_str(),
                  format_percent(r.metrics.macro_f1).c_str(),
                  static_cast<unsigned long long>(r.method_calls),
                  r.cold_cache_budget_ok ? "yes" : "no");
    } else if (lift->parsed()) {
      LiftSummary s = stage_lift(*ctx, min_support);
      std::printf("lift.csv: %zu entries over %llu samples\n", s.entries.size(),
                  static_cast<unsigned long long>(s.corpus_size));
    } else if (report->parsed()) {
      std::fputs(collect_report(*ctx).c_str(), stdout);
    }
    return 0;
  } catch (const mmdebias::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
