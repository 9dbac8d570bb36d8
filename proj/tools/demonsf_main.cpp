//
// Copyright 2026 The demonsf Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "demonsf/config.hpp"
#include "demonsf/experiment.hpp"
#include "demonsf/microcorpus.hpp"

namespace fs = std::filesystem;
using namespace demonsf;

namespace {

class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  cli::RunConfig config;
  fs::path out_root;  // <output>/<digest>
  std::string digest;

  // Timestamps live only here, never inside artifacts.
  void log(const std::string& message) const {
    std::ofstream log_file(out_root / "log.txt", std::ios::app);
    auto now = std::chrono::system_clock::now();
    auto t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%F %T", std::gmtime(&t));
    log_file << "[" << buf << "] " << message << "\n";
    std::cout << message << std::endl;
  }

  nlohmann::json meta(const std::string& kind, std::uint64_t seed = 0) const {
    nlohmann::json m = {{"kind", kind}, {"digest", digest}};
    if (seed) m["seed"] = seed;
    return m;
  }

  fs::path pool_path(std::uint64_t seed) const {
    return out_root / ("pool_seed" + std::to_string(seed) + ".jsonl");
  }
  fs::path aux_path(std::uint64_t seed, const std::string& task) const {
    return out_root / ("aux_" + task + "_seed" + std::to_string(seed) + ".jsonl");
  }
  fs::path pretrain_ckpt(std::uint64_t seed) const {
    return out_root / ("ckpt_pretrain_seed" + std::to_string(seed) + ".json");
  }
  fs::path finetune_ckpt(std::uint64_t seed) const {
    return out_root / ("ckpt_finetune_seed" + std::to_string(seed) + ".json");
  }
  fs::path preds_path(const std::string& suite, std::uint64_t seed) const {
    return out_root / "preds" / (suite + "_seed" + std::to_string(seed) + ".jsonl");
  }

  corpus::Dataset load_pool(std::uint64_t seed, const corpus::SlotSchema& schema) const {
    auto path = pool_path(seed);
    if (!fs::exists(path))
      throw MissingArtifactError("pool artifact missing for seed " +
                                 std::to_string(seed) + " (run `augment` first): " +
                                 path.string());
    return corpus::load_dataset(path, corpus::CorpusFormat::kJsonl, schema,
                                corpus::BioMode::kStrict);
  }

  std::vector<aux::AuxInstance> load_aux(std::uint64_t seed) const {
    std::vector<aux::AuxInstance> out;
    for (const std::string task : {"NR", "RM", "HD"}) {
      auto path = aux_path(seed, task);
      if (!fs::exists(path))
        throw MissingArtifactError("aux artifact missing for seed " +
                                   std::to_string(seed) +
                                   " (run `build-aux` first): " + path.string());
      for_each_jsonl_record(path, [&](const nlohmann::json& rec, std::size_t) {
        out.push_back(aux::aux_from_json(rec));
      });
    }
    return out;
  }
};

model::TrainConfig train_config(const Context& ctx, std::uint64_t seed, bool pretrain) {
  const auto& t = ctx.config.tree.at("toymodel");
  model::TrainConfig cfg;
  cfg.batch_size = t.at("batch_size").get<int>();
  cfg.steps = pretrain ? t.at("pretrain_steps").get<int>()
                       : t.at("finetune_steps").get<int>();
  cfg.learning_rate = pretrain ? t.at("pretrain_lr").get<double>()
                               : t.at("finetune_lr").get<double>();
  cfg.eval_every = std::min(t.at("eval_every").get<int>(), cfg.steps);
  cfg.seed = derive_seed(seed, pretrain ? "pretrain" : "finetune");
  cfg.weights = ctx.config.weights();
  cfg.optimizer = ctx.config.optimizer();
  return cfg;
}

int cmd_augment(Context& ctx) {
  auto clean = ctx.config.load_clean();
  auto lex = ctx.config.lexicons();
  std::map<std::string, std::vector<perturb::PerturbedUtterance>> provenance;
  auto suites = ctx.config.suites(clean.schema, lex, &provenance);

  for (std::uint64_t seed : ctx.config.seeds()) {
    perturb::PoolConfig pool_cfg = ctx.config.pool_config();
    pool_cfg.char_spec.seed = derive_seed(seed, "pool:char");
    pool_cfg.word_spec.seed = derive_seed(seed, "pool:word");
    pool_cfg.sent_spec.seed = derive_seed(seed, "pool:sent");
    perturb::Lexicons lex_run = lex;
    auto pool = perturb::build_pool_with_provenance(clean, pool_cfg, lex_run);
    JsonlWriter w(ctx.pool_path(seed));
    w.write_meta(ctx.meta("pool", seed));
    for (const auto& p : pool) w.write(perturb::perturbed_to_json(p));
    ctx.log("augment: seed " + std::to_string(seed) + " pool size " +
            std::to_string(pool.size()));
  }

  fs::create_directories(ctx.out_root / "suites");
  for (const auto& s : suites.suites) {
    JsonlWriter w(ctx.out_root / "suites" / (s.name + ".jsonl"));
    w.write_meta(ctx.meta("suite:" + s.name));
    auto prov = provenance.find(s.name);
    if (prov != provenance.end()) {
      for (const auto& p : prov->second) w.write(perturb::perturbed_to_json(p));
    } else {
      for (const auto& u : s.data.utterances) w.write(corpus::utterance_to_json(u));
    }
    ctx.log("augment: suite " + s.name + " size " + std::to_string(s.data.size()));
  }
  return 0;
}

int cmd_build_aux(Context& ctx) {
  auto clean = ctx.config.load_clean();
  for (std::uint64_t seed : ctx.config.seeds()) {
    auto pool = ctx.load_pool(seed, clean.schema);
    auto pools = demos::PoolSet::from(clean, pool);

    auto nr = aux::build_nr(pools.clean, pools.aug);
    auto rm = aux::build_rm(pools.mix, derive_seed(seed, "rm"));
    auto hd = aux::build_hd(pools.clean, pools.aug, derive_seed(seed, "hd"));

    auto dump = [&](const std::string& task,
                    const std::vector<aux::AuxInstance>& instances) {
      JsonlWriter w(ctx.aux_path(seed, task));
      w.write_meta(ctx.meta("aux:" + task, seed));
      for (const auto& inst : instances) w.write(aux::aux_to_json(inst));
    };
    dump("NR", nr);
    dump("RM", rm.instances);
    dump("HD", hd.instances);
    ctx.log("build-aux: seed " + std::to_string(seed) + " NR=" +
            std::to_string(nr.size()) + " RM=" + std::to_string(rm.instances.size()) +
            " (skipped " + std::to_string(rm.skipped) + ") HD=" +
            std::to_string(hd.instances.size()));
  }
  return 0;
}

int cmd_retrieve(Context& ctx) {
  auto clean = ctx.config.load_clean();
  auto demo_cfg = ctx.config.demo_config();
  demos::BuiltinNgramEmbedder embedder(ctx.config.embed_dim());
  for (std::uint64_t seed : ctx.config.seeds()) {
    auto pool = ctx.load_pool(seed, clean.schema);
    auto pools = demos::PoolSet::from(clean, pool);
    const auto& source = pools.select(demo_cfg.source);
    auto index = demos::EmbeddingIndex::build(source, embedder);

    JsonlWriter w(ctx.out_root /
                  ("demos_seed" + std::to_string(seed) + ".jsonl"));
    w.write_meta(ctx.meta("demo-cache", seed));
    for (const auto& u : clean.utterances) {
      auto ranked = demos::rank_topk(u, index, demo_cfg.k, embedder);
      nlohmann::json ids = nlohmann::json::array();
      nlohmann::json scores = nlohmann::json::array();
      for (const auto& item : ranked.items) {
        ids.push_back(item.id);
        scores.push_back(item.score);
      }
      w.write({{"query_id", u.id}, {"demo_ids", ids}, {"scores", scores}});
    }
    ctx.log("retrieve: seed " + std::to_string(seed) + " cached " +
            std::to_string(clean.size()) + " queries from " +
            std::string(demos::pool_source_name(demo_cfg.source)));
  }
  return 0;
}

int cmd_pretrain(Context& ctx) {
  auto clean = ctx.config.load_clean();
  for (std::uint64_t seed : ctx.config.seeds()) {
    auto instances = ctx.load_aux(seed);
    auto vocab = model::Vocab::build(evalkit::vocab_texts_for(clean, instances));
    auto params = model::ModelParams::init(vocab, ctx.config.model_config(),
                                           derive_seed(seed, "init"));
    auto cfg = train_config(ctx, seed, true);
    auto result = model::train(instances, params, vocab, cfg,
                               model::TrainMode::kPretrainMultitask,
                               [&](int step, const model::ModelParams&) {
                                 ctx.log("pretrain: seed " + std::to_string(seed) +
                                         " step " + std::to_string(step));
                               });
    model::save_checkpoint(ctx.pretrain_ckpt(seed), params, vocab,
                           {{"config_digest", ctx.digest},
                            {"stage", "pretrain"},
                            {"seed", seed}});
    ctx.log("pretrain: seed " + std::to_string(seed) + " done, final loss " +
            std::to_string(result.history.back().total));
  }
  return 0;
}

int cmd_finetune(Context& ctx, bool from_scratch) {
  auto clean = ctx.config.load_clean();
  auto demo_cfg = ctx.config.demo_config();
  demos::BuiltinNgramEmbedder embedder(ctx.config.embed_dim());
  for (std::uint64_t seed : ctx.config.seeds()) {
    model::ModelParams params = model::ModelParams::init(
        model::Vocab::build({" "}), ctx.config.model_config(), 0);
    std::optional<model::Vocab> vocab;
    if (from_scratch) {
      auto instances = ctx.load_aux(seed);
      vocab = model::Vocab::build(evalkit::vocab_texts_for(clean, instances));
      params = model::ModelParams::init(*vocab, ctx.config.model_config(),
                                        derive_seed(seed, "init"));
    } else {
      auto path = ctx.pretrain_ckpt(seed);
      if (!fs::exists(path))
        throw MissingArtifactError(
            "pretrain checkpoint missing for seed " + std::to_string(seed) +
            " (run `pretrain` first or pass --from-scratch): " + path.string());
      auto ckpt = model::load_checkpoint(path);
      params = std::move(ckpt.params);
      vocab = std::move(ckpt.vocab);
    }

    std::vector<aux::AuxInstance> main_instances;
    const corpus::Dataset* pool_ptr = nullptr;
    std::optional<demos::PoolSet> pools;
    std::optional<demos::EmbeddingIndex> index;
    if (demo_cfg.k > 0) {
      pools = demos::PoolSet::from(clean, ctx.load_pool(seed, clean.schema));
      pool_ptr = &pools->select(demo_cfg.source);
      index = demos::EmbeddingIndex::build(*pool_ptr, embedder);
    }
    for (const auto& u : clean.utterances) {
      auto assembled = pool_ptr
                           ? demos::retrieve_and_assemble(u, *pool_ptr, *index,
                                                          demo_cfg.k, embedder)
                           : demos::assemble_input({}, u);
      main_instances.push_back(
          {aux::Task::kMain,
           std::string(aux::task_prefix(aux::Task::kMain)) + assembled.text,
           corpus::linearize(u)});
    }

    auto cfg = train_config(ctx, seed, false);
    auto result =
        model::train(main_instances, params, *vocab, cfg,
                     model::TrainMode::kFinetuneMain,
                     [&](int step, const model::ModelParams&) {
                       ctx.log("finetune: seed " + std::to_string(seed) +
                               " step " + std::to_string(step));
                     });
    model::save_checkpoint(ctx.finetune_ckpt(seed), params, *vocab,
                           {{"config_digest", ctx.digest},
                            {"stage", "finetune"},
                            {"seed", seed},
                            {"demos_k", demo_cfg.k},
                            {"demos_source",
                             std::string(demos::pool_source_name(demo_cfg.source))}});
    ctx.log("finetune: seed " + std::to_string(seed) + " done, final loss " +
            std::to_string(result.history.back().total));
  }
  return 0;
}

int cmd_predict(Context& ctx) {
  auto clean = ctx.config.load_clean();
  auto lex = ctx.config.lexicons();
  auto suites = ctx.config.suites(clean.schema, lex);
  auto demo_cfg = ctx.config.demo_config();
  demos::BuiltinNgramEmbedder embedder(ctx.config.embed_dim());
  fs::create_directories(ctx.out_root / "preds");

  for (std::uint64_t seed : ctx.config.seeds()) {
    auto path = ctx.finetune_ckpt(seed);
    if (!fs::exists(path))
      throw MissingArtifactError("finetune checkpoint missing for seed " +
                                 std::to_string(seed) +
                                 " (run `finetune` first): " + path.string());
    auto ckpt = model::load_checkpoint(path);

    std::optional<demos::PoolSet> pools;
    const corpus::Dataset* pool_ptr = nullptr;
    std::optional<demos::EmbeddingIndex> index;
    // retrieval source mirrors training (checkpoint metadata is the echo)
    if (demo_cfg.k > 0) {
      pools = demos::PoolSet::from(clean, ctx.load_pool(seed, clean.schema));
      pool_ptr = &pools->select(demo_cfg.source);
      index = demos::EmbeddingIndex::build(*pool_ptr, embedder);
    }

    for (const auto& s : suites.suites) {
      JsonlWriter w(ctx.preds_path(s.name, seed));
      w.write_meta(ctx.meta("predictions:" + s.name, seed));
      for (const auto& u : s.data.utterances) {
        auto assembled =
            pool_ptr ? demos::retrieve_and_assemble(u, *pool_ptr, *index,
                                                    demo_cfg.k, embedder)
                     : demos::assemble_input({}, u);
        std::string input =
            std::string(aux::task_prefix(aux::Task::kMain)) + assembled.text;
        std::string raw = model::generate(ckpt.params, ckpt.vocab, input,
                                          ckpt.params.cfg.max_tgt_len);
        nlohmann::json jp = nlohmann::json::array();
        for (const auto& [surface, type] :
             corpus::delinearize(raw, clean.schema).pairs)
          jp.push_back({surface, type});
        w.write({{"id", u.id}, {"pred", jp}, {"raw", raw}});
      }
      ctx.log("predict: seed " + std::to_string(seed) + " suite " + s.name);
    }
  }
  return 0;
}

int cmd_evaluate(Context& ctx) {
  auto clean = ctx.config.load_clean();
  auto lex = ctx.config.lexicons();
  auto suites = ctx.config.suites(clean.schema, lex);
  evalkit::MatchOptions match;
  match.normalize =
      ctx.config.tree.at("evalkit").at("normalize_surfaces").get<bool>();

  std::vector<evalkit::EvalRow> per_seed;
  for (std::uint64_t seed : ctx.config.seeds()) {
    evalkit::EvalRow row;
    double perturbed_sum = 0.0;
    std::size_t perturbed_count = 0;
    for (const auto* s : suites.ordered()) {
      auto path = ctx.preds_path(s->name, seed);
      if (!fs::exists(path))
        throw MissingArtifactError("prediction artifact missing: " + path.string() +
                                   " (run `predict` first)");
      evalkit::PredictionSet preds;
      for_each_jsonl_record(path, [&](const nlohmann::json& rec, std::size_t) {
        std::vector<corpus::SurfaceType> pairs;
        for (const auto& p : rec.at("pred"))
          pairs.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
        preds.by_id[rec.at("id").get<std::string>()] = std::move(pairs);
      });
      auto prf = evalkit::span_f1(preds, s->data, match);
      row.by_suite.emplace_back(s->name, prf);
      if (s->name != "Clean") {
        perturbed_sum += prf.f1;
        ++perturbed_count;
      }
    }
    row.perturbed_avg = perturbed_count ? perturbed_sum / perturbed_count : 0.0;
    per_seed.push_back(std::move(row));
  }

  auto report = evalkit::make_report(suites, {{"run", per_seed}},
                                     ctx.config.seeds(), ctx.digest);
  fs::create_directories(ctx.out_root / "reports");
  std::ofstream(ctx.out_root / "reports" / "report.txt") << report.to_text();
  std::ofstream(ctx.out_root / "reports" / "report.csv") << report.to_csv();
  std::ofstream(ctx.out_root / "reports" / "report.json")
      << report.to_json().dump(2) << "\n";
  ctx.log("evaluate: report written\n" + report.to_text());
  return 0;
}

int cmd_experiment(Context& ctx) {
  auto plan = ctx.config.experiment_plan();
  plan.out_dir = ctx.out_root;
  auto result = evalkit::run_experiment(plan);
  fs::create_directories(ctx.out_root / "reports");
  std::ofstream(ctx.out_root / "reports" / "report.txt")
      << result.report.to_text();
  std::ofstream(ctx.out_root / "reports" / "report.csv") << result.report.to_csv();
  std::ofstream(ctx.out_root / "reports" / "report.json")
      << result.report.to_json().dump(2) << "\n";
  for (const auto& err : result.cell_errors) ctx.log("experiment: cell error: " + err);
  ctx.log("experiment: report written\n" + result.report.to_text());
  return result.cell_errors.empty() ? 0 : 1;
}

int cmd_icl(Context& ctx, bool replay) {
  auto clean = ctx.config.load_clean();
  auto lex = ctx.config.lexicons();
  auto suites = ctx.config.suites(clean.schema, lex);
  auto strat = ctx.config.icl_strategy();
  auto service = ctx.config.service();
  demos::BuiltinNgramEmbedder embedder(ctx.config.embed_dim());

  std::uint64_t pool_seed = ctx.config.seeds().front();
  perturb::PoolConfig pool_cfg = ctx.config.pool_config();
  pool_cfg.char_spec.seed = derive_seed(pool_seed, "pool:char");
  pool_cfg.word_spec.seed = derive_seed(pool_seed, "pool:word");
  pool_cfg.sent_spec.seed = derive_seed(pool_seed, "pool:sent");
  perturb::Lexicons lex_run = lex;
  auto pools =
      demos::PoolSet::from(clean, perturb::build_pool(clean, pool_cfg, lex_run));

  fs::create_directories(ctx.out_root / "transcripts");
  std::vector<evalkit::EvalRow> rows(1);
  evalkit::EvalRow& row = rows[0];
  double perturbed_sum = 0.0;
  std::size_t perturbed_count = 0;
  for (const auto* s : suites.ordered()) {
    fs::path tpath = ctx.out_root / "transcripts" /
                     ("icl_" + std::string(remote::icl_mode_name(strat.mode)) + "_" +
                      s->name + ".jsonl");
    evalkit::PredictionSet preds;
    if (replay) {
      if (!fs::exists(tpath))
        throw MissingArtifactError("transcript missing for replay: " + tpath.string());
      std::vector<remote::IclExample> transcript;
      for_each_jsonl_record(tpath, [&](const nlohmann::json& rec, std::size_t) {
        transcript.push_back(remote::icl_example_from_json(rec));
      });
      preds = remote::replay_transcript(transcript, clean.schema);
    } else {
      auto run = remote::icl_run(s->data, pools, strat, service, embedder);
      JsonlWriter w(tpath);
      w.write_meta(ctx.meta("transcript:" + s->name));
      for (const auto& ex : run.transcript) w.write(remote::icl_example_to_json(ex));
      preds = run.predictions;
    }
    auto prf = evalkit::span_f1(preds, s->data);
    row.by_suite.emplace_back(s->name, prf);
    if (s->name != "Clean") {
      perturbed_sum += prf.f1;
      ++perturbed_count;
    }
    ctx.log("icl: suite " + s->name + " f1 " + std::to_string(prf.f1));
  }
  row.perturbed_avg = perturbed_count ? perturbed_sum / perturbed_count : 0.0;

  auto report = evalkit::make_report(
      suites,
      {{std::string(remote::icl_mode_name(strat.mode)) + "[k=" +
            std::to_string(strat.k) + "]",
        rows}},
      {pool_seed}, ctx.digest);
  fs::create_directories(ctx.out_root / "reports");
  std::ofstream(ctx.out_root / "reports" / "icl_report.txt") << report.to_text();
  std::ofstream(ctx.out_root / "reports" / "icl_report.json")
      << report.to_json().dump(2) << "\n";
  ctx.log("icl: report written\n" + report.to_text());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"noisy slot-filling pipeline"};
  app.require_subcommand(1);
  app.fallthrough(true);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_override;
  int jobs_override = 0;
  bool from_scratch = false;
  bool replay = false;

  app.add_option("config", config_path, "configuration file (JSON)")->required();
  app.add_option("--set", overrides, "override config values (section.key=value)");
  app.add_option("--output", output_override, "output directory override");
  app.add_option("--jobs", jobs_override, "worker thread cap");

  auto* c_augment = app.add_subcommand("augment", "build the noisy pool and suites");
  auto* c_aux = app.add_subcommand("build-aux", "build NR/RM/HD instance files");
  auto* c_retrieve = app.add_subcommand("retrieve", "build the demo cache");
  auto* c_pretrain = app.add_subcommand("pretrain", "multitask pretraining");
  auto* c_finetune = app.add_subcommand("finetune", "demonstration fine-tuning");
  c_finetune->add_flag("--from-scratch", from_scratch,
                       "initialize fresh instead of loading the pretrain checkpoint");
  auto* c_predict = app.add_subcommand("predict", "decode every suite");
  auto* c_evaluate = app.add_subcommand("evaluate", "score prediction artifacts");
  auto* c_experiment = app.add_subcommand("experiment", "full grid/ablation/sweep");
  auto* c_icl = app.add_subcommand("icl", "remote in-context-learning evaluation");
  c_icl->add_flag("--replay", replay, "rescore saved transcripts offline");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!output_override.empty())
      overrides.push_back("cli.output=" + output_override);
    if (jobs_override > 0)
      overrides.push_back("cli.jobs=" + std::to_string(jobs_override));
    auto config = cli::RunConfig::load(config_path, overrides);

    Context ctx{std::move(config), {}, {}};
    ctx.digest = ctx.config.digest();
    fs::path out_base =
        ctx.config.resolve(ctx.config.tree.at("cli").at("output").get<std::string>());
    ctx.out_root = out_base / ctx.digest;
    fs::create_directories(ctx.out_root);

    if (c_augment->parsed()) return cmd_augment(ctx);
    if (c_aux->parsed()) return cmd_build_aux(ctx);
    if (c_retrieve->parsed()) return cmd_retrieve(ctx);
    if (c_pretrain->parsed()) return cmd_pretrain(ctx);
    if (c_finetune->parsed()) return cmd_finetune(ctx, from_scratch);
    if (c_predict->parsed()) return cmd_predict(ctx);
    if (c_evaluate->parsed()) return cmd_evaluate(ctx);
    if (c_experiment->parsed()) return cmd_experiment(ctx);
    if (c_icl->parsed()) return cmd_icl(ctx, replay);
    std::cerr << R"({"error":{"kind":"usage","message":"unknown command"}})" << "\n";
    return 2;
  } catch (const cli::ConfigError& e) {
    std::cerr << nlohmann::json{{"error", {{"kind", "config"}, {"message", e.what()}}}}
              << "\n";
    return 2;
  } catch (const MissingArtifactError& e) {
    std::cerr << nlohmann::json{{"error",
                                 {{"kind", "missing-artifact"}, {"message", e.what()}}}}
              << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", {{"kind", "runtime"}, {"message", e.what()}}}}
              << "\n";
    return 1;
  }
}
