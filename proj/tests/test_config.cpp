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

#include <fstream>

#include <catch2/catch_amalgamated.hpp>

#include "demonsf/config.hpp"
#include "demonsf/microcorpus.hpp"
#include "testutil.hpp"

using namespace demonsf;
using namespace demonsf::cli;

namespace {

std::filesystem::path write_config(const std::filesystem::path& dir,
                                   const nlohmann::json& body) {
  auto path = dir / "config.json";
  std::ofstream(path) << body.dump(2);
  return path;
}

}  // namespace

TEST_CASE("defaults merge under the file tree") {
  auto dir = testutil::temp_dir("config");
  auto path = write_config(dir, {{"toymodel", {{"hidden", 32}}}});
  auto rc = RunConfig::load(path);
  CHECK(rc.tree.at("toymodel").at("hidden") == 32);
  CHECK(rc.tree.at("toymodel").at("d_emb") == 64);         // default kept
  CHECK(rc.tree.at("demos").at("k") == 2);                 // untouched section
  CHECK(rc.tree.at("auxtask").at("alpha").get<double>() ==
        Catch::Approx(1.0 / 3.0));
}

TEST_CASE("set overrides parse JSON values with string fallback") {
  auto dir = testutil::temp_dir("config_set");
  auto path = write_config(dir, nlohmann::json::object());
  auto rc = RunConfig::load(path, {"toymodel.hidden=48", "cli.seeds=[7,8]",
                                   "demos.source=mix",
                                   "evalkit.experiment.mode=sweep"});
  CHECK(rc.tree.at("toymodel").at("hidden") == 48);
  CHECK(rc.tree.at("cli").at("seeds").get<std::vector<int>>() ==
        std::vector<int>{7, 8});
  CHECK(rc.tree.at("demos").at("source") == "mix");
  CHECK(rc.tree.at("evalkit").at("experiment").at("mode") == "sweep");
  CHECK_THROWS_AS(RunConfig::load(path, {"no-equals-sign"}), ConfigError);
}

TEST_CASE("digest is stable and sensitive to every resolved key") {
  auto dir = testutil::temp_dir("config_digest");
  auto path = write_config(dir, {{"toymodel", {{"hidden", 32}}}});
  auto a = RunConfig::load(path);
  auto b = RunConfig::load(path);
  CHECK(a.digest() == b.digest());
  CHECK(a.digest().size() == 16);

  auto c = RunConfig::load(path, {"toymodel.hidden=33"});
  CHECK(a.digest() != c.digest());

  // an override equal to the file value leaves the digest unchanged
  auto d = RunConfig::load(path, {"toymodel.hidden=32"});
  CHECK(a.digest() == d.digest());
}

TEST_CASE("path validation reports the failing key") {
  auto dir = testutil::temp_dir("config_paths");
  auto path = write_config(dir, {{"corpus", {{"clean", "missing.jsonl"}}}});
  auto rc = RunConfig::load(path);
  try {
    rc.load_clean();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("corpus.") != std::string::npos);
  }
}

TEST_CASE("generated suite configs build deterministic suites") {
  auto dir = testutil::temp_dir("config_suites");
  auto test = microcorpus::generate(15, 4242, "t");
  corpus::save_jsonl(test, dir / "test.jsonl");
  {
    std::ofstream schema(dir / "schema.txt");
    for (const auto& t : microcorpus::schema().types) schema << t << "\n";
  }
  nlohmann::json body = {
      {"corpus", {{"schema", "schema.txt"}}},
      {"evalkit",
       {{"suites",
         {{{"name", "Clean"}, {"level", "clean"}, {"path", "test.jsonl"}},
          {{"name", "Typos"},
           {"level", "char"},
           {"from", "test.jsonl"},
           {"perturb",
            {{"level", "char"}, {"prob", 0.4}, {"seed", 77}}}}}}}}};
  auto path = write_config(dir, body);
  auto rc = RunConfig::load(path);
  auto schema = rc.schema();
  auto lex = microcorpus::lexicons();
  auto s1 = rc.suites(schema, lex);
  auto s2 = rc.suites(schema, lex);
  REQUIRE(s1.suites.size() == 2);
  CHECK(s1.suites[1].data.size() == 15);
  bool any_changed = false;
  for (std::size_t i = 0; i < 15; ++i) {
    CHECK(s1.suites[1].data.utterances[i].tokens ==
          s2.suites[1].data.utterances[i].tokens);
    if (s1.suites[1].data.utterances[i].tokens != test.utterances[i].tokens)
      any_changed = true;
    // suite keeps the original ids so predictions align with gold
    CHECK(s1.suites[1].data.utterances[i].id == test.utterances[i].id);
  }
  CHECK(any_changed);
}

TEST_CASE("experiment plan reflects the tree") {
  auto dir = testutil::temp_dir("config_plan");
  auto train = microcorpus::generate(12, 99, "m");
  corpus::save_jsonl(train, dir / "train.jsonl");
  corpus::save_jsonl(microcorpus::generate(6, 98, "t"), dir / "test.jsonl");
  {
    std::ofstream schema(dir / "schema.txt");
    for (const auto& t : microcorpus::schema().types) schema << t << "\n";
  }
  nlohmann::json body = {
      {"corpus", {{"clean", "train.jsonl"}, {"schema", "schema.txt"}}},
      {"toymodel", {{"pretrain_steps", 5}, {"finetune_steps", 7}}},
      {"cli", {{"seeds", {4, 5}}}},
      {"evalkit",
       {{"suites",
         {{{"name", "Clean"}, {"level", "clean"}, {"path", "test.jsonl"}}}},
        {"experiment",
         {{"mode", "grid"},
          {"recipes", {"baseline", "full"}},
          {"demo_sources", {"noisy"}},
          {"k_list", {1}}}}}}};
  auto path = write_config(dir, body);
  auto rc = RunConfig::load(path);
  auto plan = rc.experiment_plan();
  CHECK(plan.pretrain_steps == 5);
  CHECK(plan.finetune_steps == 7);
  CHECK(plan.seeds == std::vector<std::uint64_t>{4, 5});
  CHECK(plan.recipes == std::vector<std::string>{"baseline", "full"});
  CHECK(plan.digest == rc.digest());

  auto rows = evalkit::plan_rows(plan);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].display() == "baseline");
  CHECK(rows[1].display() == "full[aug,k=1]");
  CHECK(rows[1].pretrain);
  CHECK(rows[1].use_demos);
}

TEST_CASE("ablation mode expands the fixed row set") {
  evalkit::ExperimentPlan plan;
  plan.mode = "ablation";
  plan.k_list = {2};
  auto rows = evalkit::plan_rows(plan);
  REQUIRE(rows.size() == 9);
  CHECK(rows[0].name == "baseline");
  CHECK(rows[1].name == "+NR");
  CHECK(rows[1].weights.alpha == 1.0);
  CHECK(rows[1].weights.beta == 0.0);
  CHECK(rows[4].name == "+MT");
  CHECK(rows[5].name == "+CleanDemos");
  CHECK_FALSE(rows[5].pretrain);
  CHECK(rows[5].use_demos);
  CHECK(rows[8].name == "full");
  CHECK(rows[8].pretrain);
  CHECK(rows[8].use_demos);
}

TEST_CASE("sweep mode crosses sources and k values") {
  evalkit::ExperimentPlan plan;
  plan.mode = "sweep";
  plan.demo_sources = {"clean", "noisy", "mix"};
  plan.k_list = {0, 2, 4, 8};
  auto rows = evalkit::plan_rows(plan);
  CHECK(rows.size() == 10);  // k=0 collapses to one no-demo row
}
