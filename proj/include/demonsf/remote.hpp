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
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

// httplib pulls in <resolv.h>, whose _res compatibility macro breaks
// later template code (notably Eigen definitions).
#ifdef _res
#undef _res
#endif

#include <json.hpp>

#include "demonsf/corpus.hpp"
#include "demonsf/demos.hpp"
#include "demonsf/evalkit.hpp"

namespace demonsf::remote {

class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Exhausted retries or unreachable endpoint; carries the last status.
class TransportError : public std::runtime_error {
 public:
  TransportError(const std::string& msg, int last_status)
      : std::runtime_error(msg), last_status_(last_status) {}
  int last_status() const { return last_status_; }

 private:
  int last_status_;
};

// 4xx responses are not retried.
class RequestError : public std::runtime_error {
 public:
  RequestError(const std::string& msg, int status)
      : std::runtime_error(msg), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RetryPolicy {
  int max_attempts = 3;
  double backoff_base_s = 0.5;  // sleep base * 2^(attempt-1) between tries
};

struct ServiceConfig {
  std::string base_url;
  std::string auth_env = "DEMONSF_API_TOKEN";  // empty = no auth header
  double timeout_s = 30.0;
  int max_in_flight = 4;
  RetryPolicy retry;
  int max_tokens = 256;

  void validate() const {
    if (base_url.empty()) throw ConfigurationError("service: base_url not set");
    if (timeout_s <= 0) throw ConfigurationError("service: timeout must be > 0");
    if (max_in_flight < 1)
      throw ConfigurationError("service: max_in_flight must be >= 1");
    if (retry.max_attempts < 1)
      throw ConfigurationError("service: retry attempts must be >= 1");
  }

  // Resolved before any request is sent.
  std::optional<std::string> auth_token() const {
    if (auth_env.empty()) return std::nullopt;
    const char* v = std::getenv(auth_env.c_str());
    if (!v)
      throw ConfigurationError("auth token variable '" + auth_env +
                               "' is not set in the environment");
    return std::string(v);
  }
};

namespace detail {

inline httplib::Client make_client(const ServiceConfig& cfg) {
  httplib::Client client(cfg.base_url);
  auto secs = static_cast<time_t>(cfg.timeout_s);
  auto usecs = static_cast<time_t>((cfg.timeout_s - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  return client;
}

inline httplib::Headers make_headers(const ServiceConfig& cfg) {
  httplib::Headers headers;
  if (auto token = cfg.auth_token())
    headers.emplace("Authorization", "Bearer " + *token);
  return headers;
}

struct PostResult {
  nlohmann::json body;
  int attempts = 0;
};

// POST with retry on 5xx and transport failures; 4xx fails immediately.
inline PostResult post_json(httplib::Client& client, const ServiceConfig& cfg,
                            const std::string& path, const nlohmann::json& body,
                            const httplib::Headers& headers) {
  int last_status = 0;
  std::string last_error;
  for (int attempt = 1; attempt <= cfg.retry.max_attempts; ++attempt) {
    if (attempt > 1) {
      double sleep_s = cfg.retry.backoff_base_s * std::pow(2.0, attempt - 2);
      std::this_thread::sleep_for(std::chrono::duration<double>(sleep_s));
    }
    auto res = client.Post(path, headers, body.dump(), "application/json");
    if (!res) {
      last_status = 0;
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_status = res->status;
      last_error = "server error " + std::to_string(res->status);
      continue;
    }
    if (res->status >= 400)
      throw RequestError("request to " + path + " rejected with status " +
                             std::to_string(res->status) + ": " + res->body,
                         res->status);
    try {
      return PostResult{nlohmann::json::parse(res->body), attempt};
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError("invalid JSON from " + path + ": " + e.what());
    }
  }
  throw TransportError("request to " + path + " failed after " +
                           std::to_string(cfg.retry.max_attempts) +
                           " attempts: " + last_error,
                       last_status);
}

}  // namespace detail

struct GenerateOutcome {
  std::string text;
  int attempts = 1;
};

// POST /v1/generate {"prompt", "max_tokens"} -> {"text"}.
inline GenerateOutcome generate_remote(const std::string& prompt,
                                       const ServiceConfig& cfg) {
  cfg.validate();
  auto headers = detail::make_headers(cfg);  // resolves auth before any request
  auto client = detail::make_client(cfg);
  nlohmann::json body = {{"prompt", prompt}, {"max_tokens", cfg.max_tokens}};
  auto res = detail::post_json(client, cfg, "/v1/generate", body, headers);
  if (!res.body.is_object() || !res.body.contains("text") ||
      !res.body["text"].is_string())
    throw ProtocolError("generate response missing 'text' field");
  return GenerateOutcome{res.body["text"].get<std::string>(), res.attempts};
}

// POST /v1/embed {"texts": [...]} -> {"vectors": [[...]]}. Vectors are
// validated (count, uniform dimension) and L2-normalized client-side.
inline std::vector<std::vector<double>> embed_remote(
    const std::vector<std::string>& texts, const ServiceConfig& cfg) {
  if (texts.empty()) throw std::invalid_argument("embed_remote: empty text list");
  cfg.validate();
  auto headers = detail::make_headers(cfg);
  auto client = detail::make_client(cfg);
  nlohmann::json body = {{"texts", texts}};
  auto res = detail::post_json(client, cfg, "/v1/embed", body, headers);
  if (!res.body.is_object() || !res.body.contains("vectors"))
    throw ProtocolError("embed response missing 'vectors' field");
  std::vector<std::vector<double>> vectors;
  try {
    vectors = res.body["vectors"].get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("embed response malformed: ") + e.what());
  }
  if (vectors.size() != texts.size())
    throw ProtocolError("embed count mismatch: sent " +
                        std::to_string(texts.size()) + " texts, got " +
                        std::to_string(vectors.size()) + " vectors");
  for (auto& v : vectors) {
    if (v.size() != vectors.front().size())
      throw ProtocolError("embed dimension mismatch across vectors");
    double norm2 = 0.0;
    for (double x : v) norm2 += x * x;
    if (norm2 > 0.0) {
      double inv = 1.0 / std::sqrt(norm2);
      for (double& x : v) x *= inv;
    }
  }
  return vectors;
}

// Embedder backed by the /v1/embed endpoint.
class RemoteEmbedder final : public demos::Embedder {
 public:
  explicit RemoteEmbedder(ServiceConfig cfg) : cfg_(std::move(cfg)) {}

  std::vector<double> embed(std::string_view text) const override {
    auto vs = embed_remote({std::string(text)}, cfg_);
    dim_ = vs.front().size();
    return vs.front();
  }

  std::size_t dim() const override { return dim_; }

 private:
  ServiceConfig cfg_;
  mutable std::size_t dim_ = 0;
};

// ---------------------------------------------------------------------------
// In-context-learning evaluation
// ---------------------------------------------------------------------------

enum class IclMode { kZeroShot, kCleanDemos, kAugDemos, kMixedDemos };

inline std::string_view icl_mode_name(IclMode m) {
  switch (m) {
    case IclMode::kZeroShot: return "zero_shot";
    case IclMode::kCleanDemos: return "clean_demos";
    case IclMode::kAugDemos: return "aug_demos";
    case IclMode::kMixedDemos: return "mixed_demos";
  }
  return "?";
}

inline IclMode icl_mode_from_name(std::string_view s) {
  if (s == "zero_shot") return IclMode::kZeroShot;
  if (s == "clean_demos") return IclMode::kCleanDemos;
  if (s == "aug_demos") return IclMode::kAugDemos;
  if (s == "mixed_demos") return IclMode::kMixedDemos;
  throw std::invalid_argument("unknown ICL mode: " + std::string(s));
}

struct IclStrategy {
  IclMode mode = IclMode::kAugDemos;
  std::size_t k = 2;  // ignored for zero_shot
};

// Fixed, versioned instruction header prepended to every prompt.
inline constexpr std::string_view kInstructionHeader =
    "Extract all slot values and types. Answer as '<span> is <type>' "
    "fragments joined by '; ', or 'none'.";

struct IclExample {
  std::string id;
  std::string prompt;
  std::string raw;
  std::vector<corpus::SurfaceType> parsed;
  int attempts = 0;
  bool failed = false;
};

struct IclRun {
  std::vector<IclExample> transcript;  // in test-set order
  evalkit::PredictionSet predictions;
};

inline std::string build_icl_prompt(const corpus::Utterance& u,
                                    const IclStrategy& strat,
                                    const demos::EmbeddingIndex* index,
                                    const corpus::Dataset* pool,
                                    const demos::Embedder& emb) {
  demos::AssembledInput assembled;
  if (strat.mode == IclMode::kZeroShot || strat.k == 0 || !pool) {
    assembled = demos::assemble_input({}, u);
  } else {
    assembled = demos::retrieve_and_assemble(u, *pool, *index, strat.k, emb);
  }
  return std::string(kInstructionHeader) + "\n" + assembled.text;
}

// Evaluates a test set over the generate endpoint. Requests run
// concurrently up to max_in_flight; results keep test-set order; a
// failed example degrades to an empty prediction and the run completes.
inline IclRun icl_run(const corpus::Dataset& test, const demos::PoolSet& pools,
                      const IclStrategy& strat, const ServiceConfig& cfg,
                      const demos::Embedder& emb) {
  if (test.utterances.empty()) throw std::invalid_argument("icl_run: empty test set");
  cfg.validate();
  cfg.auth_token();  // fail before any request if the token is missing

  const corpus::Dataset* pool = nullptr;
  std::optional<demos::EmbeddingIndex> index;
  if (strat.mode != IclMode::kZeroShot && strat.k > 0) {
    switch (strat.mode) {
      case IclMode::kCleanDemos: pool = &pools.clean; break;
      case IclMode::kAugDemos: pool = &pools.aug; break;
      case IclMode::kMixedDemos: pool = &pools.mix; break;
      default: break;
    }
    index = demos::EmbeddingIndex::build(*pool, emb);
  }

  IclRun run;
  run.transcript.resize(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& u = test.utterances[i];
    run.transcript[i].id = u.id;
    run.transcript[i].prompt =
        build_icl_prompt(u, strat, index ? &*index : nullptr, pool, emb);
  }

  std::atomic<std::size_t> cursor{0};
  auto worker = [&] {
    auto client = detail::make_client(cfg);
    auto headers = detail::make_headers(cfg);
    while (true) {
      std::size_t i = cursor.fetch_add(1);
      if (i >= run.transcript.size()) break;
      IclExample& ex = run.transcript[i];
      nlohmann::json body = {{"prompt", ex.prompt}, {"max_tokens", cfg.max_tokens}};
      try {
        auto res = detail::post_json(client, cfg, "/v1/generate", body, headers);
        ex.attempts = res.attempts;
        if (!res.body.is_object() || !res.body.contains("text") ||
            !res.body["text"].is_string())
          throw ProtocolError("generate response missing 'text' field");
        ex.raw = res.body["text"].get<std::string>();
        ex.parsed = corpus::delinearize(ex.raw, test.schema).pairs;
      } catch (const RequestError&) {
        ex.failed = true;
      } catch (const TransportError&) {
        ex.failed = true;
        ex.attempts = cfg.retry.max_attempts;
      } catch (const ProtocolError&) {
        ex.failed = true;
      }
    }
  };

  std::size_t n_workers =
      std::min<std::size_t>(static_cast<std::size_t>(cfg.max_in_flight), test.size());
  std::vector<std::thread> threads;
  threads.reserve(n_workers);
  for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(worker);
  for (auto& t : threads) t.join();

  for (const auto& ex : run.transcript)
    run.predictions.by_id[ex.id] = ex.parsed;
  return run;
}

// Transcript persistence: raw generations are saved before scoring so
// runs can be replayed offline.
inline nlohmann::json icl_example_to_json(const IclExample& ex) {
  nlohmann::json parsed = nlohmann::json::array();
  for (const auto& [surface, type] : ex.parsed) parsed.push_back({surface, type});
  return nlohmann::json{{"id", ex.id},       {"prompt", ex.prompt},
                        {"raw", ex.raw},     {"parsed", parsed},
                        {"attempts", ex.attempts}, {"failed", ex.failed}};
}

inline IclExample icl_example_from_json(const nlohmann::json& rec) {
  IclExample ex;
  ex.id = rec.at("id").get<std::string>();
  ex.prompt = rec.at("prompt").get<std::string>();
  ex.raw = rec.at("raw").get<std::string>();
  for (const auto& p : rec.at("parsed"))
    ex.parsed.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
  ex.attempts = rec.at("attempts").get<int>();
  ex.failed = rec.value("failed", false);
  return ex;
}

// Re-parses raw generations from a saved transcript.
inline evalkit::PredictionSet replay_transcript(
    const std::vector<IclExample>& transcript, const corpus::SlotSchema& schema) {
  evalkit::PredictionSet preds;
  for (const auto& ex : transcript)
    preds.by_id[ex.id] =
        ex.failed ? std::vector<corpus::SurfaceType>{}
                  : corpus::delinearize(ex.raw, schema).pairs;
  return preds;
}

}  // namespace demonsf::remote
