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

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "demonsf/auxtask.hpp"
#include "demonsf/corpus.hpp"
#include "demonsf/demos.hpp"
#include "demonsf/evalkit.hpp"
#include "demonsf/experiment.hpp"
#include "demonsf/lexicon.hpp"
#include "demonsf/model.hpp"
#include "demonsf/perturb.hpp"
#include "demonsf/remote.hpp"

namespace demonsf::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Sections mirror the library modules. Defaults are merged first, then
// the file, then --set overrides, so the digest always covers the fully
// resolved tree.
inline nlohmann::json default_config() {
  return nlohmann::json{
      {"corpus",
       {{"clean", ""}, {"schema", ""}, {"format", "jsonl"}, {"mode", "strict"}}},
      {"perturb",
       {{"prob", 0.3},
        {"char", {{"ops", {"insert", "delete", "substitute"}}, {"scope", "all_tokens"}}},
        {"word", {{"ops", {"delete", "insert", "replace", "homophone"}}}},
        {"sentence", {{"ops", {"synonym_rewrite", "append_irrelevant"}}}},
        {"lexicons",
         {{"homophones", ""}, {"synonyms", ""}, {"fillers", ""}, {"irrelevant", ""}}}}},
      {"auxtask",
       {{"alpha", 1.0 / 3.0}, {"beta", 1.0 / 3.0}, {"gamma", 1.0 / 3.0}}},
      {"demos", {{"k", 2}, {"source", "aug"}, {"dim", 1024}}},
      {"toymodel",
       {{"d_emb", 64},
        {"hidden", 128},
        {"max_src_len", 320},
        {"max_tgt_len", 96},
        {"batch_size", 8},
        {"pretrain_steps", 2000},
        {"finetune_steps", 2000},
        {"pretrain_lr", 3e-3},
        {"finetune_lr", 3e-3},
        {"eval_every", 200},
        {"optimizer", "adaptive_moment"}}},
      {"remote",
       {{"base_url", ""},
        {"auth_env", "DEMONSF_API_TOKEN"},
        {"timeout_s", 30.0},
        {"max_in_flight", 4},
        {"retry_attempts", 3},
        {"backoff_base_s", 0.5},
        {"max_tokens", 128},
        {"icl_mode", "aug_demos"},
        {"icl_k", 2}}},
      {"evalkit",
       {{"suites", nlohmann::json::array()},
        {"normalize_surfaces", true},
        {"experiment",
         {{"mode", "grid"},
          {"recipes", {"baseline", "+MT", "full"}},
          {"demo_sources", {"noisy"}},
          {"k_list", {2}}}}}},
      {"cli", {{"output", "out"}, {"seeds", {1, 2, 3}}, {"jobs", 1}}}};
}

inline void merge_into(nlohmann::json& base, const nlohmann::json& overlay) {
  if (!overlay.is_object() || !base.is_object()) {
    base = overlay;
    return;
  }
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    if (base.contains(it.key()) && base[it.key()].is_object() &&
        it.value().is_object()) {
      merge_into(base[it.key()], it.value());
    } else {
      base[it.key()] = it.value();
    }
  }
}

// "--set section.key=value"; the value parses as JSON when possible and
// falls back to a plain string.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("--set expects section.key=value, got '" + assignment + "'");
  std::string path = assignment.substr(0, eq);
  std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json* node = &cfg;
  for (const auto& key : split(path, ".")) {
    if (key.empty()) throw ConfigError("bad --set path: '" + path + "'");
    node = &(*node)[key];
  }
  *node = value;
}

struct RunConfig {
  nlohmann::json tree;
  std::filesystem::path config_dir;  // relative paths resolve against this

  static RunConfig load(const std::filesystem::path& path,
                        const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path.string());
    nlohmann::json file;
    try {
      file = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    RunConfig rc;
    rc.tree = default_config();
    merge_into(rc.tree, file);
    for (const auto& o : overrides) apply_override(rc.tree, o);
    rc.config_dir = path.parent_path();
    return rc;
  }

  // Stable hash of the canonicalized tree (nlohmann objects serialize
  // with sorted keys).
  std::string digest() const { return hex64(fnv1a64(tree.dump())); }

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path path(p);
    if (path.is_absolute()) return path;
    return config_dir / path;
  }

  std::filesystem::path require_path(const std::string& section,
                                     const std::string& key) const {
    std::string p = tree.at(section).at(key).get<std::string>();
    if (p.empty())
      throw ConfigError("config: " + section + "." + key + " is not set");
    auto full = resolve(p);
    if (!std::filesystem::exists(full))
      throw ConfigError("config: " + section + "." + key + " -> '" +
                        full.string() + "' does not exist");
    return full;
  }

  std::vector<std::uint64_t> seeds() const {
    auto s = tree.at("cli").at("seeds").get<std::vector<std::uint64_t>>();
    if (s.empty()) throw ConfigError("config: cli.seeds must be non-empty");
    return s;
  }

  corpus::SlotSchema schema() const {
    return corpus::SlotSchema::from_file(require_path("corpus", "schema"));
  }

  corpus::Dataset load_clean() const {
    auto format = tree.at("corpus").at("format").get<std::string>() == "conll"
                      ? corpus::CorpusFormat::kConll
                      : corpus::CorpusFormat::kJsonl;
    auto mode = tree.at("corpus").at("mode").get<std::string>() == "lenient"
                    ? corpus::BioMode::kLenient
                    : corpus::BioMode::kStrict;
    return corpus::load_dataset(require_path("corpus", "clean"), format, schema(),
                                mode);
  }

  perturb::Lexicons lexicons() const {
    perturb::Lexicons lex;
    const auto& paths = tree.at("perturb").at("lexicons");
    auto get = [&](const char* key) { return paths.at(key).get<std::string>(); };
    if (!get("homophones").empty())
      perturb::load_homophones(lex, require_path_in(paths, "homophones"));
    if (!get("synonyms").empty())
      perturb::load_synonyms(lex, require_path_in(paths, "synonyms"));
    if (!get("fillers").empty())
      perturb::load_filler_words(lex, require_path_in(paths, "fillers"));
    if (!get("irrelevant").empty())
      perturb::load_irrelevant_phrases(lex, require_path_in(paths, "irrelevant"));
    lex.validate();
    return lex;
  }

  perturb::PerturbationSpec spec_for(perturb::Level level) const {
    const auto& p = tree.at("perturb");
    perturb::PerturbationSpec spec;
    spec.level = level;
    spec.prob = p.at("prob").get<double>();
    const char* key = level == perturb::Level::kChar   ? "char"
                      : level == perturb::Level::kWord ? "word"
                                                       : "sentence";
    spec.ops = p.at(key).at("ops").get<std::vector<std::string>>();
    if (p.at(key).contains("scope"))
      spec.scope = perturb::scope_from_name(p.at(key).at("scope").get<std::string>());
    spec.validate();
    return spec;
  }

  perturb::PoolConfig pool_config() const {
    perturb::PoolConfig cfg;
    cfg.char_spec = spec_for(perturb::Level::kChar);
    cfg.word_spec = spec_for(perturb::Level::kWord);
    cfg.sent_spec = spec_for(perturb::Level::kSentence);
    return cfg;
  }

  aux::LossWeights weights() const {
    const auto& a = tree.at("auxtask");
    aux::LossWeights w{a.at("alpha").get<double>(), a.at("beta").get<double>(),
                       a.at("gamma").get<double>()};
    w.validate();
    return w;
  }

  model::ModelConfig model_config() const {
    const auto& t = tree.at("toymodel");
    model::ModelConfig cfg;
    cfg.d_emb = t.at("d_emb").get<int>();
    cfg.hidden = t.at("hidden").get<int>();
    cfg.max_src_len = t.at("max_src_len").get<int>();
    cfg.max_tgt_len = t.at("max_tgt_len").get<int>();
    return cfg;
  }

  model::Optimizer optimizer() const {
    auto name = tree.at("toymodel").at("optimizer").get<std::string>();
    if (name == "sgd") return model::Optimizer::kSgd;
    if (name == "adaptive_moment") return model::Optimizer::kAdaptiveMoment;
    throw ConfigError("config: unknown optimizer '" + name + "'");
  }

  remote::ServiceConfig service() const {
    const auto& r = tree.at("remote");
    remote::ServiceConfig cfg;
    cfg.base_url = r.at("base_url").get<std::string>();
    cfg.auth_env = r.at("auth_env").get<std::string>();
    cfg.timeout_s = r.at("timeout_s").get<double>();
    cfg.max_in_flight = r.at("max_in_flight").get<int>();
    cfg.retry.max_attempts = r.at("retry_attempts").get<int>();
    cfg.retry.backoff_base_s = r.at("backoff_base_s").get<double>();
    cfg.max_tokens = r.at("max_tokens").get<int>();
    return cfg;
  }

  remote::IclStrategy icl_strategy() const {
    const auto& r = tree.at("remote");
    remote::IclStrategy strat;
    strat.mode = remote::icl_mode_from_name(r.at("icl_mode").get<std::string>());
    strat.k = r.at("icl_k").get<std::size_t>();
    return strat;
  }

  demos::DemoConfig demo_config() const {
    const auto& d = tree.at("demos");
    demos::DemoConfig cfg;
    cfg.k = d.at("k").get<std::size_t>();
    cfg.source = demos::pool_source_from_name(d.at("source").get<std::string>());
    return cfg;
  }

  std::size_t embed_dim() const {
    return tree.at("demos").at("dim").get<std::size_t>();
  }

  // Suites come either from a file ("path") or by perturbing a base set
  // ("from" + "perturb" spec(s) with a fixed suite seed). Generated
  // suites can also report their provenance for manifest files.
  evalkit::SuiteSet suites(
      const corpus::SlotSchema& schema, const perturb::Lexicons& lex,
      std::map<std::string, std::vector<perturb::PerturbedUtterance>>* provenance =
          nullptr) const {
    evalkit::SuiteSet set;
    for (const auto& js : tree.at("evalkit").at("suites")) {
      evalkit::Suite suite;
      suite.name = js.at("name").get<std::string>();
      suite.level = js.at("level").get<std::string>();
      if (js.contains("path")) {
        suite.data = corpus::load_dataset(resolve(js.at("path").get<std::string>()),
                                          corpus::CorpusFormat::kJsonl, schema,
                                          corpus::BioMode::kStrict);
      } else if (js.contains("from")) {
        corpus::Dataset base = corpus::load_dataset(
            resolve(js.at("from").get<std::string>()), corpus::CorpusFormat::kJsonl,
            schema, corpus::BioMode::kStrict);
        std::vector<perturb::PerturbationSpec> specs;
        const auto& jp = js.at("perturb");
        auto parse_spec = [&](const nlohmann::json& one) {
          perturb::PerturbationSpec spec;
          spec.level = perturb::level_from_name(one.at("level").get<std::string>());
          spec.ops = one.contains("ops")
                         ? one.at("ops").get<std::vector<std::string>>()
                         : perturb::ops_for_level(spec.level);
          spec.prob = one.value("prob", tree.at("perturb").at("prob").get<double>());
          if (one.contains("scope"))
            spec.scope = perturb::scope_from_name(one.at("scope").get<std::string>());
          spec.seed = one.value("seed", std::uint64_t{1000003});
          spec.validate();
          return spec;
        };
        if (jp.is_array())
          for (const auto& one : jp) specs.push_back(parse_spec(one));
        else
          specs.push_back(parse_spec(jp));
        suite.data.name = suite.name;
        suite.data.schema = schema;
        perturb::Lexicons lex_copy = lex;
        if (lex_copy.vocabulary.empty())
          lex_copy.vocabulary = perturb::corpus_vocabulary(base);
        for (const auto& u : base.utterances) {
          auto p = perturb::compose(u, specs, lex_copy);
          if (provenance) (*provenance)[suite.name].push_back(p);
          suite.data.utterances.push_back(std::move(p.utterance));
        }
      } else {
        throw ConfigError("suite '" + suite.name + "': needs 'path' or 'from'");
      }
      set.suites.push_back(std::move(suite));
    }
    set.validate();
    return set;
  }

  evalkit::ExperimentPlan experiment_plan() const {
    evalkit::ExperimentPlan plan;
    plan.clean = load_clean();
    plan.lex = lexicons();
    plan.suites = suites(plan.clean.schema, plan.lex);
    plan.pool_cfg = pool_config();
    plan.model_cfg = model_config();
    const auto& t = tree.at("toymodel");
    plan.pretrain_steps = t.at("pretrain_steps").get<int>();
    plan.finetune_steps = t.at("finetune_steps").get<int>();
    plan.batch_size = t.at("batch_size").get<int>();
    plan.pretrain_lr = t.at("pretrain_lr").get<double>();
    plan.finetune_lr = t.at("finetune_lr").get<double>();
    plan.eval_every = t.at("eval_every").get<int>();
    plan.optimizer = optimizer();
    plan.mt_weights = weights();
    const auto& e = tree.at("evalkit").at("experiment");
    plan.mode = e.at("mode").get<std::string>();
    plan.recipes = e.at("recipes").get<std::vector<std::string>>();
    plan.demo_sources = e.at("demo_sources").get<std::vector<std::string>>();
    plan.k_list = e.at("k_list").get<std::vector<std::size_t>>();
    plan.seeds = seeds();
    plan.embed_dim = embed_dim();
    plan.jobs = tree.at("cli").at("jobs").get<int>();
    plan.digest = digest();
    return plan;
  }

 private:
  std::filesystem::path require_path_in(const nlohmann::json& node,
                                        const char* key) const {
    auto full = resolve(node.at(key).get<std::string>());
    if (!std::filesystem::exists(full))
      throw ConfigError(std::string("config: lexicon path '") + full.string() +
                        "' does not exist");
    return full;
  }
};

}  // namespace demonsf::cli
