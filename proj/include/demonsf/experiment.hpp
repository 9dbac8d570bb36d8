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

#pragma once

#include <atomic>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "demonsf/auxtask.hpp"
#include "demonsf/corpus.hpp"
#include "demonsf/demos.hpp"
#include "demonsf/evalkit.hpp"
#include "demonsf/jsonl.hpp"
#include "demonsf/model.hpp"
#include "demonsf/perturb.hpp"

namespace demonsf::evalkit {

// A training recipe row: which auxiliary pretraining runs (weights) and
// which demonstration pool, if any, feeds the main task.
struct RecipeSpec {
  std::string name;
  bool pretrain = false;
  aux::LossWeights weights;
  bool use_demos = false;
  demos::PoolSource source = demos::PoolSource::kAug;
  std::size_t k = 0;

  std::string display() const {
    if (!use_demos) return name;
    std::ostringstream os;
    os << name << "[" << demos::pool_source_name(source) << ",k=" << k << "]";
    return os.str();
  }
};

inline RecipeSpec recipe_from_name(const std::string& name,
                                   demos::PoolSource source, std::size_t k,
                                   const aux::LossWeights& mt_weights) {
  RecipeSpec r;
  r.name = name;
  if (name == "baseline") return r;
  if (name == "+NR") {
    r.pretrain = true;
    r.weights = {1, 0, 0};
    return r;
  }
  if (name == "+RM") {
    r.pretrain = true;
    r.weights = {0, 1, 0};
    return r;
  }
  if (name == "+HD") {
    r.pretrain = true;
    r.weights = {0, 0, 1};
    return r;
  }
  if (name == "+MT") {
    r.pretrain = true;
    r.weights = mt_weights;
    return r;
  }
  if (name == "+CleanDemos" || name == "+MixDemos" || name == "+NoisyDemos") {
    r.use_demos = true;
    r.k = k;
    r.source = name == "+CleanDemos" ? demos::PoolSource::kClean
               : name == "+MixDemos" ? demos::PoolSource::kMix
                                     : demos::PoolSource::kAug;
    return r;
  }
  if (name == "full") {
    r.pretrain = true;
    r.weights = mt_weights;
    r.use_demos = k > 0;
    r.source = source;
    r.k = k;
    return r;
  }
  throw std::invalid_argument("unknown recipe: " + name);
}

struct ExperimentPlan {
  corpus::Dataset clean;
  SuiteSet suites;
  perturb::Lexicons lex;
  perturb::PoolConfig pool_cfg;  // per-seed stream seeds derived internally

  model::ModelConfig model_cfg;
  int pretrain_steps = 2000;
  int finetune_steps = 2000;
  int batch_size = 8;
  double pretrain_lr = 3e-3;
  double finetune_lr = 3e-3;
  int eval_every = 200;
  model::Optimizer optimizer = model::Optimizer::kAdaptiveMoment;
  aux::LossWeights mt_weights;

  std::string mode = "grid";  // grid | ablation | sweep
  std::vector<std::string> recipes = {"baseline", "+MT", "full"};
  std::vector<std::string> demo_sources = {"noisy"};
  std::vector<std::size_t> k_list = {2};
  std::vector<std::uint64_t> seeds = {1, 2, 3};

  std::size_t embed_dim = 1024;
  int jobs = 1;

  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::string digest;
};

struct RecipeRows {
  RecipeSpec spec;
  std::vector<EvalRow> per_seed;  // aligned with plan.seeds minus failures
};

struct ExperimentResult {
  RobustnessReport report;
  std::vector<RecipeRows> rows;
  std::vector<std::string> cell_errors;
};

namespace detail {

// One seed's shared state: pool, demo indexes and pretrained checkpoints
// are reused across recipe rows.
struct SeedContext {
  std::uint64_t seed = 0;
  demos::PoolSet pools;
  model::Vocab vocab = model::Vocab::build({" "});
  std::vector<aux::AuxInstance> pretrain_instances;
  demos::BuiltinNgramEmbedder embedder{1024};
  std::map<std::string, demos::EmbeddingIndex> indexes;  // by pool source name
  std::map<std::string, model::ModelParams> pretrained;  // by weight signature

  const demos::EmbeddingIndex& index_for(demos::PoolSource s) {
    std::string key(demos::pool_source_name(s));
    auto it = indexes.find(key);
    if (it == indexes.end())
      it = indexes.emplace(key, demos::EmbeddingIndex::build(pools.select(s),
                                                             embedder))
               .first;
    return it->second;
  }
};

inline std::string weights_key(const aux::LossWeights& w) {
  std::ostringstream os;
  os << std::setprecision(17) << w.alpha << "/" << w.beta << "/" << w.gamma;
  return os.str();
}

}  // namespace detail

// Character inventory for the model: every auxiliary instance, the main
// task over the clean corpus, and the demonstration markers. Shared by
// the experiment runner and the command-line pipeline so checkpoints
// line up either way.
inline std::vector<std::string> vocab_texts_for(
    const corpus::Dataset& clean,
    const std::vector<aux::AuxInstance>& pretrain_instances) {
  std::vector<std::string> texts;
  texts.reserve(pretrain_instances.size() * 2 + clean.size() * 2 + 2);
  for (const auto& inst : pretrain_instances) {
    texts.push_back(inst.input_text);
    texts.push_back(inst.target_text);
  }
  for (const auto& u : clean.utterances) {
    texts.push_back(std::string(aux::task_prefix(aux::Task::kMain)) + u.text());
    texts.push_back(corpus::linearize(u));
  }
  texts.push_back(std::string(demos::kDemoMarker));
  texts.push_back(std::string(demos::kInputMarker));
  return texts;
}

namespace detail {

inline SeedContext make_seed_context(const ExperimentPlan& plan,
                                     std::uint64_t seed) {
  SeedContext ctx;
  ctx.seed = seed;
  ctx.embedder = demos::BuiltinNgramEmbedder(plan.embed_dim);

  perturb::PoolConfig pool_cfg = plan.pool_cfg;
  pool_cfg.char_spec.seed = derive_seed(seed, "pool:char");
  pool_cfg.word_spec.seed = derive_seed(seed, "pool:word");
  pool_cfg.sent_spec.seed = derive_seed(seed, "pool:sent");
  perturb::Lexicons lex = plan.lex;
  corpus::Dataset aug = perturb::build_pool(plan.clean, pool_cfg, lex);
  ctx.pools = demos::PoolSet::from(plan.clean, std::move(aug));

  auto nr = aux::build_nr(ctx.pools.clean, ctx.pools.aug);
  auto rm = aux::build_rm(ctx.pools.mix, derive_seed(seed, "rm"));
  auto hd = aux::build_hd(ctx.pools.clean, ctx.pools.aug, derive_seed(seed, "hd"));
  ctx.pretrain_instances = std::move(nr);
  ctx.pretrain_instances.insert(ctx.pretrain_instances.end(),
                                rm.instances.begin(), rm.instances.end());
  ctx.pretrain_instances.insert(ctx.pretrain_instances.end(),
                                hd.instances.begin(), hd.instances.end());
  ctx.vocab = model::Vocab::build(
      vocab_texts_for(ctx.pools.clean, ctx.pretrain_instances));
  return ctx;
}

// Main-task instances; demos are retrieved once, not per step.
inline std::vector<aux::AuxInstance> build_main_instances(
    const corpus::Dataset& data, SeedContext& ctx, const RecipeSpec& recipe) {
  std::vector<aux::AuxInstance> out;
  out.reserve(data.size());
  const corpus::Dataset* pool =
      recipe.use_demos ? &ctx.pools.select(recipe.source) : nullptr;
  const demos::EmbeddingIndex* index =
      recipe.use_demos ? &ctx.index_for(recipe.source) : nullptr;
  for (const auto& u : data.utterances) {
    demos::AssembledInput assembled =
        recipe.use_demos
            ? demos::retrieve_and_assemble(u, *pool, *index, recipe.k, ctx.embedder)
            : demos::assemble_input({}, u);
    out.push_back({aux::Task::kMain,
                   std::string(aux::task_prefix(aux::Task::kMain)) + assembled.text,
                   corpus::linearize(u)});
  }
  return out;
}

// Retrieval at inference reuses the training-time source; the recipe is
// the single point of truth for both, which is the consistency check.
inline PredictFn make_predict_fn(SeedContext& ctx, const RecipeSpec& recipe,
                                 const model::ModelParams& params) {
  const corpus::Dataset* pool =
      recipe.use_demos ? &ctx.pools.select(recipe.source) : nullptr;
  const demos::EmbeddingIndex* index =
      recipe.use_demos ? &ctx.index_for(recipe.source) : nullptr;
  const model::Vocab* vocab = &ctx.vocab;
  demos::BuiltinNgramEmbedder* emb = &ctx.embedder;
  const corpus::SlotSchema* schema = &ctx.pools.clean.schema;
  std::size_t k = recipe.k;
  int max_len = params.cfg.max_tgt_len;
  return [=, &params](const corpus::Utterance& u) {
    demos::AssembledInput assembled =
        pool ? demos::retrieve_and_assemble(u, *pool, *index, k, *emb)
             : demos::assemble_input({}, u);
    std::string input =
        std::string(aux::task_prefix(aux::Task::kMain)) + assembled.text;
    std::string generated = model::generate(params, *vocab, input, max_len);
    return corpus::delinearize(generated, *schema).pairs;
  };
}

inline EvalRow evaluate_with_jobs(const PredictFn& predict,
                                  const SuiteSet& suites, int jobs) {
  if (jobs <= 1) return evaluate_suite(predict, suites);
  // Parallel over examples; results land at fixed indices so the row is
  // identical to a sequential run.
  suites.validate();
  EvalRow row;
  double perturbed_sum = 0.0;
  std::size_t perturbed_count = 0;
  for (const Suite* s : suites.ordered()) {
    std::vector<std::vector<SurfaceType>> outputs(s->data.size());
    std::vector<char> failed(s->data.size(), 0);
    std::atomic<std::size_t> cursor{0};
    auto worker = [&] {
      while (true) {
        std::size_t i = cursor.fetch_add(1);
        if (i >= s->data.size()) break;
        try {
          outputs[i] = predict(s->data.utterances[i]);
        } catch (const std::exception&) {
          failed[i] = 1;
        }
      }
    };
    std::vector<std::thread> threads;
    std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(jobs),
                                          s->data.size());
    for (std::size_t w = 0; w < n; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    PredictionSet preds;
    for (std::size_t i = 0; i < s->data.size(); ++i) {
      preds.by_id[s->data.utterances[i].id] = outputs[i];
      if (failed[i]) ++row.predictor_errors;
    }
    Prf prf = span_f1(preds, s->data);
    row.by_suite.emplace_back(s->name, prf);
    if (s->name != "Clean") {
      perturbed_sum += prf.f1;
      ++perturbed_count;
    }
  }
  row.perturbed_avg = perturbed_count ? perturbed_sum / perturbed_count : 0.0;
  return row;
}

inline void persist_predictions(const ExperimentPlan& plan,
                                const RecipeSpec& recipe, std::uint64_t seed,
                                SeedContext& ctx,
                                const model::ModelParams& params) {
  if (plan.out_dir.empty()) return;
  namespace fs = std::filesystem;
  fs::path cell_dir = plan.out_dir / "cells" / recipe.display() /
                      ("seed" + std::to_string(seed));
  fs::create_directories(cell_dir);
  model::save_checkpoint(cell_dir / "model.json", params, ctx.vocab,
                         {{"recipe", recipe.display()},
                          {"seed", seed},
                          {"config_digest", plan.digest}});
  auto predict = make_predict_fn(ctx, recipe, params);
  for (const Suite* s : plan.suites.ordered()) {
    JsonlWriter w(cell_dir / ("preds_" + s->name + ".jsonl"));
    w.write_meta({{"kind", "predictions"},
                  {"suite", s->name},
                  {"recipe", recipe.display()},
                  {"seed", seed},
                  {"digest", plan.digest}});
    for (const auto& u : s->data.utterances) {
      std::string input =
          std::string(aux::task_prefix(aux::Task::kMain)) +
          (recipe.use_demos
               ? demos::retrieve_and_assemble(u, ctx.pools.select(recipe.source),
                                              ctx.index_for(recipe.source),
                                              recipe.k, ctx.embedder)
               : demos::assemble_input({}, u))
              .text;
      std::string raw = model::generate(params, ctx.vocab, input,
                                        params.cfg.max_tgt_len);
      nlohmann::json jp = nlohmann::json::array();
      for (const auto& [surface, type] :
           corpus::delinearize(raw, ctx.pools.clean.schema).pairs)
        jp.push_back({surface, type});
      w.write({{"id", u.id}, {"pred", jp}, {"raw", raw}});
    }
  }
}

}  // namespace detail

// Expands the plan into recipe rows per mode.
inline std::vector<RecipeSpec> plan_rows(const ExperimentPlan& plan) {
  std::vector<RecipeSpec> rows;
  auto push_unique = [&](const RecipeSpec& r) {
    for (const auto& existing : rows)
      if (existing.display() == r.display()) return;
    rows.push_back(r);
  };
  if (plan.mode == "ablation") {
    const char* names[] = {"baseline",    "+NR",        "+RM",
                           "+HD",         "+MT",        "+CleanDemos",
                           "+MixDemos",   "+NoisyDemos", "full"};
    std::size_t k = plan.k_list.empty() ? 2 : plan.k_list.front();
    for (const char* n : names)
      push_unique(recipe_from_name(n, demos::PoolSource::kAug, k,
                                   plan.mt_weights));
    return rows;
  }
  if (plan.mode == "sweep") {
    for (const auto& source : plan.demo_sources)
      for (std::size_t k : plan.k_list) {
        RecipeSpec r = recipe_from_name("full", demos::pool_source_from_name(source),
                                        k, plan.mt_weights);
        r.name = "full";
        push_unique(r);
      }
    return rows;
  }
  if (plan.mode != "grid")
    throw std::invalid_argument("unknown experiment mode: " + plan.mode);
  for (const auto& name : plan.recipes) {
    if (name == "full" || name == "+CleanDemos" || name == "+MixDemos" ||
        name == "+NoisyDemos") {
      for (const auto& source : plan.demo_sources)
        for (std::size_t k : plan.k_list)
          push_unique(recipe_from_name(name, demos::pool_source_from_name(source),
                                       k, plan.mt_weights));
    } else {
      push_unique(recipe_from_name(name, demos::PoolSource::kAug, 0,
                                   plan.mt_weights));
    }
  }
  return rows;
}

// Runs every (recipe, seed) cell end to end: pool build, auxiliary
// builds, pretraining, fine-tuning, suite evaluation. Pretrained
// checkpoints are shared between rows with identical weights within a
// seed. A failing cell is recorded and the rest proceed.
inline ExperimentResult run_experiment(const ExperimentPlan& plan) {
  plan.suites.validate();
  if (plan.seeds.empty())
    throw std::invalid_argument("experiment: seed list is empty");
  std::vector<RecipeSpec> rows = plan_rows(plan);

  ExperimentResult result;
  for (const auto& spec : rows) result.rows.push_back({spec, {}});

  for (std::uint64_t seed : plan.seeds) {
    std::optional<detail::SeedContext> ctx;
    try {
      ctx = detail::make_seed_context(plan, seed);
    } catch (const std::exception& e) {
      result.cell_errors.push_back("seed " + std::to_string(seed) +
                                   ": context build failed: " + e.what());
      continue;
    }
    for (auto& row : result.rows) {
      const RecipeSpec& recipe = row.spec;
      try {
        model::ModelParams params = model::ModelParams::init(
            ctx->vocab, plan.model_cfg, derive_seed(seed, "init"));
        if (recipe.pretrain) {
          std::string key = detail::weights_key(recipe.weights);
          auto it = ctx->pretrained.find(key);
          if (it == ctx->pretrained.end()) {
            model::TrainConfig tcfg;
            tcfg.batch_size = plan.batch_size;
            tcfg.steps = plan.pretrain_steps;
            tcfg.learning_rate = plan.pretrain_lr;
            tcfg.eval_every = plan.eval_every;
            tcfg.seed = derive_seed(seed, "pretrain");
            tcfg.weights = recipe.weights;
            tcfg.optimizer = plan.optimizer;
            model::train(ctx->pretrain_instances, params, ctx->vocab, tcfg,
                         model::TrainMode::kPretrainMultitask);
            it = ctx->pretrained.emplace(key, params).first;
          }
          params = it->second;
        }
        auto main_instances =
            detail::build_main_instances(ctx->pools.clean, *ctx, recipe);
        model::TrainConfig tcfg;
        tcfg.batch_size = plan.batch_size;
        tcfg.steps = plan.finetune_steps;
        tcfg.learning_rate = plan.finetune_lr;
        tcfg.eval_every = plan.eval_every;
        tcfg.seed = derive_seed(seed, "finetune");
        tcfg.optimizer = plan.optimizer;
        model::train(main_instances, params, ctx->vocab, tcfg,
                     model::TrainMode::kFinetuneMain);

        auto predict = detail::make_predict_fn(*ctx, recipe, params);
        EvalRow eval = detail::evaluate_with_jobs(predict, plan.suites, plan.jobs);
        row.per_seed.push_back(eval);
        detail::persist_predictions(plan, recipe, seed, *ctx, params);
      } catch (const std::exception& e) {
        result.cell_errors.push_back("recipe " + recipe.display() + " seed " +
                                     std::to_string(seed) + ": " + e.what());
      }
    }
  }

  std::vector<std::pair<std::string, std::vector<EvalRow>>> named;
  for (const auto& row : result.rows)
    named.emplace_back(row.spec.display(), row.per_seed);
  result.report = make_report(plan.suites, named, plan.seeds, plan.digest);
  return result;
}

}  // namespace demonsf::evalkit
