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

#include <atomic>
#include <cstdlib>
#include <thread>

#include <catch2/catch_amalgamated.hpp>

#include "demonsf/remote.hpp"
#include "testutil.hpp"

using namespace demonsf;
using namespace demonsf::remote;

namespace {

// In-process scripted service. Handlers are swappable per test.
class MockService {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  MockService() {
    server_.Post("/v1/generate", [this](const httplib::Request& req,
                                        httplib::Response& res) {
      ++generate_calls_;
      int now = ++in_flight_;
      int prev = high_water_.load();
      while (now > prev && !high_water_.compare_exchange_weak(prev, now)) {
      }
      if (generate_handler_) generate_handler_(req, res);
      --in_flight_;
    });
    server_.Post("/v1/embed", [this](const httplib::Request& req,
                                     httplib::Response& res) {
      ++embed_calls_;
      if (embed_handler_) embed_handler_(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~MockService() {
    server_.stop();
    thread_.join();
  }

  ServiceConfig config() const {
    ServiceConfig cfg;
    cfg.base_url = "http://127.0.0.1:" + std::to_string(port_);
    cfg.auth_env = "";  // most tests run unauthenticated
    cfg.timeout_s = 5.0;
    cfg.retry.max_attempts = 3;
    cfg.retry.backoff_base_s = 0.001;
    return cfg;
  }

  void on_generate(Handler h) { generate_handler_ = std::move(h); }
  void on_embed(Handler h) { embed_handler_ = std::move(h); }

  int generate_calls() const { return generate_calls_; }
  int embed_calls() const { return embed_calls_; }
  int high_water() const { return high_water_; }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  Handler generate_handler_;
  Handler embed_handler_;
  std::atomic<int> generate_calls_{0};
  std::atomic<int> embed_calls_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> high_water_{0};
};

void reply_text(httplib::Response& res, const std::string& text) {
  res.set_content(nlohmann::json{{"text", text}}.dump(), "application/json");
}

corpus::Utterance utt(const std::string& id, const std::string& text,
                      const std::string& tag_type = "") {
  corpus::Utterance u;
  u.id = id;
  u.tokens = split_whitespace(text);
  u.tags.assign(u.tokens.size(), "O");
  if (!tag_type.empty()) u.tags.back() = "B-" + tag_type;
  return u;
}

demos::PoolSet small_pools() {
  corpus::Dataset clean;
  clean.schema = testutil::small_schema();
  clean.utterances.push_back(utt("c1", "play westbam", "artist"));
  clean.utterances.push_back(utt("c2", "order ramen", "dish"));
  clean.utterances.push_back(utt("c3", "book a table in paris", "city"));
  corpus::Dataset aug;
  aug.schema = clean.schema;
  aug.utterances.push_back(utt("c1:char", "play wstbam", "artist"));
  aug.utterances.push_back(utt("c2:char", "ordr ramen", "dish"));
  aug.utterances.push_back(utt("c3:char", "bok a table in paris", "city"));
  return demos::PoolSet::from(std::move(clean), std::move(aug));
}

}  // namespace

TEST_CASE("generate_remote passes text through") {
  MockService svc;
  svc.on_generate([](const httplib::Request& req, httplib::Response& res) {
    auto body = nlohmann::json::parse(req.body);
    REQUIRE(body.contains("prompt"));
    REQUIRE(body.contains("max_tokens"));
    reply_text(res, "westbam is artist");
  });
  auto out = generate_remote("some prompt", svc.config());
  CHECK(out.text == "westbam is artist");
  CHECK(out.attempts == 1);
}

TEST_CASE("generate_remote retries 5xx and succeeds") {
  MockService svc;
  std::atomic<int> calls{0};
  svc.on_generate([&](const httplib::Request&, httplib::Response& res) {
    if (++calls <= 2) {
      res.status = 500;
      return;
    }
    reply_text(res, "ok");
  });
  auto out = generate_remote("p", svc.config());
  CHECK(out.text == "ok");
  CHECK(out.attempts == 3);
  CHECK(svc.generate_calls() == 3);
}

TEST_CASE("generate_remote exhausts retries with the last status") {
  MockService svc;
  svc.on_generate([](const httplib::Request&, httplib::Response& res) {
    res.status = 503;
  });
  try {
    generate_remote("p", svc.config());
    FAIL("expected TransportError");
  } catch (const TransportError& e) {
    CHECK(e.last_status() == 503);
    CHECK(svc.generate_calls() == 3);
  }
}

TEST_CASE("4xx responses are not retried") {
  MockService svc;
  svc.on_generate([](const httplib::Request&, httplib::Response& res) {
    res.status = 400;
    res.set_content("bad request", "text/plain");
  });
  CHECK_THROWS_AS(generate_remote("p", svc.config()), RequestError);
  CHECK(svc.generate_calls() == 1);
}

TEST_CASE("missing auth variable fails before any request") {
  MockService svc;
  auto cfg = svc.config();
  cfg.auth_env = "DEMONSF_TEST_TOKEN_DOES_NOT_EXIST";
  ::unsetenv("DEMONSF_TEST_TOKEN_DOES_NOT_EXIST");
  CHECK_THROWS_AS(generate_remote("p", cfg), ConfigurationError);
  CHECK(svc.generate_calls() == 0);
}

TEST_CASE("auth token is sent as a bearer header") {
  MockService svc;
  std::string seen_auth;
  svc.on_generate([&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    reply_text(res, "x");
  });
  auto cfg = svc.config();
  cfg.auth_env = "DEMONSF_TEST_TOKEN";
  ::setenv("DEMONSF_TEST_TOKEN", "sekrit", 1);
  generate_remote("p", cfg);
  CHECK(seen_auth == "Bearer sekrit");
  ::unsetenv("DEMONSF_TEST_TOKEN");
}

TEST_CASE("embed_remote validates and normalizes") {
  MockService svc;

  SECTION("unit basis vectors stay unchanged") {
    svc.on_embed([](const httplib::Request&, httplib::Response& res) {
      res.set_content(
          nlohmann::json{{"vectors", {{1.0, 0.0}, {0.0, 1.0}}}}.dump(),
          "application/json");
    });
    auto vs = embed_remote({"a", "b"}, svc.config());
    CHECK(vs[0] == std::vector<double>{1.0, 0.0});
    CHECK(vs[1] == std::vector<double>{0.0, 1.0});
  }

  SECTION("vectors are L2-normalized client-side") {
    svc.on_embed([](const httplib::Request&, httplib::Response& res) {
      res.set_content(nlohmann::json{{"vectors", {{3.0, 4.0}}}}.dump(),
                      "application/json");
    });
    auto vs = embed_remote({"a"}, svc.config());
    CHECK(vs[0][0] == Catch::Approx(0.6));
    CHECK(vs[0][1] == Catch::Approx(0.8));
  }

  SECTION("count mismatch is a protocol error") {
    svc.on_embed([](const httplib::Request&, httplib::Response& res) {
      res.set_content(
          nlohmann::json{{"vectors", {{1.0, 0.0}, {0.0, 1.0}}}}.dump(),
          "application/json");
    });
    CHECK_THROWS_AS(embed_remote({"a", "b", "c"}, svc.config()), ProtocolError);
  }

  SECTION("dimension mismatch is a protocol error") {
    svc.on_embed([](const httplib::Request&, httplib::Response& res) {
      res.set_content(
          nlohmann::json{{"vectors", {{1.0, 0.0}, {0.0, 1.0, 0.0}}}}.dump(),
          "application/json");
    });
    CHECK_THROWS_AS(embed_remote({"a", "b"}, svc.config()), ProtocolError);
  }

  SECTION("empty input is rejected locally") {
    CHECK_THROWS_AS(embed_remote({}, svc.config()), std::invalid_argument);
    CHECK(svc.embed_calls() == 0);
  }
}

TEST_CASE("icl prompts follow the strategy") {
  MockService svc;
  svc.on_generate([](const httplib::Request&, httplib::Response& res) {
    reply_text(res, "none");
  });
  auto pools = small_pools();
  demos::BuiltinNgramEmbedder emb(256);

  corpus::Dataset test;
  test.schema = pools.clean.schema;
  test.utterances.push_back(utt("q1", "play wstbam", "artist"));
  test.utterances.push_back(utt("q2", "ordr ramen", "dish"));

  SECTION("zero shot has no demonstrations segment") {
    auto run = icl_run(test, pools, {IclMode::kZeroShot, 2}, svc.config(), emb);
    for (const auto& ex : run.transcript) {
      CHECK(ex.prompt.find("Demonstrations:") == std::string::npos);
      CHECK(ex.prompt.find("Input Utterance: ") != std::string::npos);
      CHECK(ex.prompt.rfind(std::string(kInstructionHeader), 0) == 0);
    }
  }

  SECTION("aug demos match an independent retrieval replay") {
    auto run = icl_run(test, pools, {IclMode::kAugDemos, 2}, svc.config(), emb);
    for (std::size_t i = 0; i < test.size(); ++i) {
      auto ranked = demos::rank_topk(test.utterances[i], pools.aug, 2, emb);
      for (const auto& item : ranked.items) {
        const auto* d = pools.aug.find(item.id);
        REQUIRE(d != nullptr);
        CHECK(run.transcript[i].prompt.find(demos::render_demonstration(*d)) !=
              std::string::npos);
      }
    }
  }

  SECTION("prompt construction is byte-deterministic") {
    auto a = icl_run(test, pools, {IclMode::kMixedDemos, 2}, svc.config(), emb);
    auto b = icl_run(test, pools, {IclMode::kMixedDemos, 2}, svc.config(), emb);
    for (std::size_t i = 0; i < test.size(); ++i)
      CHECK(a.transcript[i].prompt == b.transcript[i].prompt);
  }

  SECTION("all-none answers give empty predictions") {
    auto run = icl_run(test, pools, {IclMode::kCleanDemos, 1}, svc.config(), emb);
    for (const auto& [id, pairs] : run.predictions.by_id) CHECK(pairs.empty());
  }
}

TEST_CASE("icl failures degrade to empty predictions and the run completes") {
  MockService svc;
  svc.on_generate([](const httplib::Request& req, httplib::Response& res) {
    auto body = nlohmann::json::parse(req.body);
    std::string prompt = body.at("prompt");
    if (prompt.find("ordr") != std::string::npos) {
      res.status = 500;
      return;
    }
    reply_text(res, "wstbam is artist");
  });
  auto pools = small_pools();
  demos::BuiltinNgramEmbedder emb(256);
  corpus::Dataset test;
  test.schema = pools.clean.schema;
  test.utterances.push_back(utt("q1", "play wstbam", "artist"));
  test.utterances.push_back(utt("q2", "ordr ramen", "dish"));

  auto run = icl_run(test, pools, {IclMode::kZeroShot, 0}, svc.config(), emb);
  REQUIRE(run.transcript.size() == 2);
  CHECK_FALSE(run.transcript[0].failed);
  CHECK(run.transcript[0].parsed.size() == 1);
  CHECK(run.transcript[1].failed);
  CHECK(run.predictions.by_id.at("q2").empty());
}

TEST_CASE("in-flight requests never exceed the configured cap") {
  MockService svc;
  svc.on_generate([](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(15));
    reply_text(res, "none");
  });
  auto pools = small_pools();
  demos::BuiltinNgramEmbedder emb(128);
  corpus::Dataset test;
  test.schema = pools.clean.schema;
  for (int i = 0; i < 12; ++i)
    test.utterances.push_back(utt("q" + std::to_string(i), "play westbam"));

  auto cfg = svc.config();
  cfg.max_in_flight = 3;
  icl_run(test, pools, {IclMode::kZeroShot, 0}, cfg, emb);
  CHECK(svc.high_water() <= 3);
  CHECK(svc.generate_calls() == 12);
}

TEST_CASE("transcripts replay to identical scores offline") {
  MockService svc;
  svc.on_generate([](const httplib::Request& req, httplib::Response& res) {
    auto body = nlohmann::json::parse(req.body);
    std::string prompt = body.at("prompt");
    if (prompt.find("wstbam") != std::string::npos)
      reply_text(res, "wstbam is artist");
    else
      reply_text(res, "none");
  });
  auto pools = small_pools();
  demos::BuiltinNgramEmbedder emb(256);
  corpus::Dataset test;
  test.schema = pools.clean.schema;
  test.utterances.push_back(utt("q1", "play wstbam", "artist"));
  test.utterances.push_back(utt("q2", "ordr ramen", "dish"));

  auto run = icl_run(test, pools, {IclMode::kAugDemos, 1}, svc.config(), emb);

  // serialize, reload, re-parse raw generations
  std::vector<nlohmann::json> records;
  for (const auto& ex : run.transcript) records.push_back(icl_example_to_json(ex));
  std::vector<IclExample> reloaded;
  for (const auto& rec : records) reloaded.push_back(icl_example_from_json(rec));
  auto replayed = replay_transcript(reloaded, test.schema);

  auto live = evalkit::span_f1(run.predictions, test);
  auto offline = evalkit::span_f1(replayed, test);
  CHECK(live.precision == offline.precision);
  CHECK(live.recall == offline.recall);
  CHECK(live.f1 == offline.f1);
}
