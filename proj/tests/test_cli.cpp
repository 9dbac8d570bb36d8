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

#include <cstdlib>
#include <fstream>

#include <catch2/catch_amalgamated.hpp>

#include "demonsf/config.hpp"
#include "demonsf/microcorpus.hpp"
#include "testutil.hpp"

using namespace demonsf;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  std::string cmd = std::string(DEMONSF_CLI_BIN) + " " + args + " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

// Tiny corpus and model so the full chain stays fast.
fs::path make_workspace(const std::string& name) {
  auto dir = testutil::temp_dir(name);
  corpus::save_jsonl(microcorpus::generate(16, 77, "m"), dir / "train.jsonl");
  corpus::save_jsonl(microcorpus::generate(8, 78, "t"), dir / "test.jsonl");
  {
    std::ofstream schema(dir / "schema.txt");
    for (const auto& t : microcorpus::schema().types) schema << t << "\n";
  }
  auto lex = microcorpus::lexicons();
  {
    std::ofstream out(dir / "homophones.tsv");
    for (const auto& [w, vs] : lex.homophones) out << w << "\t" << join(vs, ",") << "\n";
  }
  {
    std::ofstream out(dir / "synonyms.tsv");
    for (const auto& [w, vs] : lex.synonyms) out << w << "\t" << join(vs, ",") << "\n";
  }
  {
    std::ofstream out(dir / "fillers.txt");
    for (const auto& w : lex.filler_words) out << w << "\n";
  }
  {
    std::ofstream out(dir / "irrelevant.txt");
    for (const auto& p : lex.irrelevant_phrases) out << join(p, " ") << "\n";
  }

  nlohmann::json config = {
      {"corpus", {{"clean", "train.jsonl"}, {"schema", "schema.txt"}}},
      {"perturb",
       {{"lexicons",
         {{"homophones", "homophones.tsv"},
          {"synonyms", "synonyms.tsv"},
          {"fillers", "fillers.txt"},
          {"irrelevant", "irrelevant.txt"}}}}},
      {"demos", {{"k", 1}, {"source", "aug"}, {"dim", 256}}},
      {"toymodel",
       {{"d_emb", 8},
        {"hidden", 12},
        {"batch_size", 4},
        {"pretrain_steps", 6},
        {"finetune_steps", 6},
        {"eval_every", 6},
        {"max_src_len", 160},
        {"max_tgt_len", 48}}},
      {"cli", {{"output", "out"}, {"seeds", {5}}}},
      {"evalkit",
       {{"suites",
         {{{"name", "Clean"}, {"level", "clean"}, {"path", "test.jsonl"}},
          {{"name", "Typos"},
           {"level", "char"},
           {"from", "test.jsonl"},
           {"perturb", {{"level", "char"}, {"prob", 0.3}, {"seed", 1009}}}}}},
        {"experiment",
         {{"mode", "grid"},
          {"recipes", {"full"}},
          {"demo_sources", {"aug"}},
          {"k_list", {1}}}}}}};
  std::ofstream(dir / "config.json") << config.dump(2);
  return dir;
}

}  // namespace

TEST_CASE("cli rejects unknown commands and bad configs") {
  auto dir = make_workspace("cli_bad");
  CHECK(run_cli((dir / "config.json").string() + " no-such-command") != 0);
  CHECK(run_cli("/nonexistent/config.json augment") == 2);

  // invalid config value
  CHECK(run_cli((dir / "config.json").string() +
                " augment --set toymodel.optimizer=warp") != 0);
}

TEST_CASE("cli chain runs end to end with digest-stamped artifacts") {
  auto dir = make_workspace("cli_chain");
  std::string cfg = (dir / "config.json").string();

  auto rc = cli::RunConfig::load(cfg);
  fs::path out_root = dir / "out" / rc.digest();

  REQUIRE(run_cli(cfg + " augment") == 0);
  CHECK(fs::exists(out_root / "pool_seed5.jsonl"));
  CHECK(fs::exists(out_root / "suites" / "Clean.jsonl"));
  CHECK(fs::exists(out_root / "suites" / "Typos.jsonl"));

  // pool artifact embeds the digest and is reproducible byte for byte
  auto pool_bytes = slurp(out_root / "pool_seed5.jsonl");
  CHECK(pool_bytes.find(rc.digest()) != std::string::npos);
  REQUIRE(run_cli(cfg + " augment") == 0);
  CHECK(slurp(out_root / "pool_seed5.jsonl") == pool_bytes);

  // missing upstream artifact: finetune before pretrain
  CHECK(run_cli(cfg + " finetune") == 3);

  REQUIRE(run_cli(cfg + " build-aux") == 0);
  CHECK(fs::exists(out_root / "aux_NR_seed5.jsonl"));
  REQUIRE(run_cli(cfg + " retrieve") == 0);
  CHECK(fs::exists(out_root / "demos_seed5.jsonl"));
  REQUIRE(run_cli(cfg + " pretrain") == 0);
  CHECK(fs::exists(out_root / "ckpt_pretrain_seed5.json"));
  REQUIRE(run_cli(cfg + " finetune") == 0);
  CHECK(fs::exists(out_root / "ckpt_finetune_seed5.json"));
  REQUIRE(run_cli(cfg + " predict") == 0);
  CHECK(fs::exists(out_root / "preds" / "Clean_seed5.jsonl"));
  CHECK(fs::exists(out_root / "preds" / "Typos_seed5.jsonl"));
  REQUIRE(run_cli(cfg + " evaluate") == 0);
  CHECK(fs::exists(out_root / "reports" / "report.txt"));
  CHECK(fs::exists(out_root / "reports" / "report.csv"));
  CHECK(fs::exists(out_root / "reports" / "report.json"));

  auto report = nlohmann::json::parse(slurp(out_root / "reports" / "report.json"));
  CHECK(report.at("config_digest") == rc.digest());
  REQUIRE(report.at("columns").size() == 3);  // Clean, Typos, Perturbed-Avg
}

TEST_CASE("aux line counts follow the pool filter rule") {
  auto dir = make_workspace("cli_counts");
  std::string cfg = (dir / "config.json").string();
  auto rc = cli::RunConfig::load(cfg);
  fs::path out_root = dir / "out" / rc.digest();

  REQUIRE(run_cli(cfg + " augment") == 0);
  REQUIRE(run_cli(cfg + " build-aux") == 0);

  // NR has exactly one line per clean utterance (the :char variants)
  std::size_t nr_lines = 0;
  for_each_jsonl_record(out_root / "aux_NR_seed5.jsonl",
                        [&](const nlohmann::json&, std::size_t) { ++nr_lines; });
  CHECK(nr_lines == 16);

  // HD covers clean + all three variants
  std::size_t hd_lines = 0;
  for_each_jsonl_record(out_root / "aux_HD_seed5.jsonl",
                        [&](const nlohmann::json&, std::size_t) { ++hd_lines; });
  CHECK(hd_lines == 16 * 4);
}

TEST_CASE("evaluate with gold-echo predictions reports 100 everywhere") {
  auto dir = make_workspace("cli_echo");
  std::string cfg = (dir / "config.json").string();
  auto rc = cli::RunConfig::load(cfg);
  fs::path out_root = dir / "out" / rc.digest();

  // synthesize gold-echo prediction artifacts without a model
  auto full = cli::RunConfig::load(cfg);
  auto schema = full.schema();
  auto lex = full.lexicons();
  auto suites = full.suites(schema, lex);
  fs::create_directories(out_root / "preds");
  for (const auto& s : suites.suites) {
    JsonlWriter w(out_root / "preds" / (s.name + "_seed5.jsonl"));
    for (const auto& u : s.data.utterances) {
      nlohmann::json jp = nlohmann::json::array();
      for (const auto& sp : corpus::spans_from_bio(u))
        jp.push_back({sp.surface, sp.slot_type});
      w.write({{"id", u.id}, {"pred", jp}, {"raw", corpus::linearize(u)}});
    }
  }
  REQUIRE(run_cli(cfg + " evaluate") == 0);
  auto report = nlohmann::json::parse(slurp(out_root / "reports" / "report.json"));
  for (const auto& cell : report.at("rows").at(0).at("cells"))
    CHECK(cell.at("mean").get<double>() == 1.0);
}

TEST_CASE("experiment command matches the manual chain cell for cell") {
  auto dir = make_workspace("cli_equiv");
  std::string cfg = (dir / "config.json").string();
  auto rc = cli::RunConfig::load(cfg);
  fs::path out_root = dir / "out" / rc.digest();

  for (const std::string step :
       {"augment", "build-aux", "pretrain", "finetune", "predict", "evaluate"})
    REQUIRE(run_cli(cfg + " " + step) == 0);
  auto chain = nlohmann::json::parse(slurp(out_root / "reports" / "report.json"));

  // fresh output tree for the experiment run
  REQUIRE(run_cli(cfg + " experiment --output out2") == 0);
  auto rc2 = cli::RunConfig::load(cfg, {"cli.output=out2"});
  auto exp = nlohmann::json::parse(
      slurp(dir / "out2" / rc2.digest() / "reports" / "report.json"));

  REQUIRE(exp.at("rows").size() == 1);
  auto chain_cells = chain.at("rows").at(0).at("cells");
  auto exp_cells = exp.at("rows").at(0).at("cells");
  REQUIRE(chain_cells.size() == exp_cells.size());
  for (std::size_t i = 0; i < chain_cells.size(); ++i) {
    CHECK(chain_cells.at(i).at("mean").get<double>() ==
          exp_cells.at(i).at("mean").get<double>());
  }
}
