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

#include <algorithm>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "demonsf/corpus.hpp"
#include "demonsf/embed.hpp"

namespace demonsf::demos {

enum class PoolSource { kClean, kAug, kMix };

inline std::string_view pool_source_name(PoolSource s) {
  switch (s) {
    case PoolSource::kClean: return "clean";
    case PoolSource::kAug: return "aug";
    case PoolSource::kMix: return "mix";
  }
  return "?";
}

inline PoolSource pool_source_from_name(std::string_view s) {
  if (s == "clean") return PoolSource::kClean;
  if (s == "aug" || s == "noisy") return PoolSource::kAug;
  if (s == "mix") return PoolSource::kMix;
  throw std::invalid_argument("unknown demo pool source: " + std::string(s));
}

// Clean corpus, its augmented pool, and their union by id.
struct PoolSet {
  corpus::Dataset clean;
  corpus::Dataset aug;
  corpus::Dataset mix;

  static PoolSet from(corpus::Dataset clean_ds, corpus::Dataset aug_ds) {
    PoolSet p;
    p.mix.name = clean_ds.name + ":mix";
    p.mix.schema = clean_ds.schema;
    p.mix.utterances = clean_ds.utterances;
    p.mix.utterances.insert(p.mix.utterances.end(), aug_ds.utterances.begin(),
                            aug_ds.utterances.end());
    p.clean = std::move(clean_ds);
    p.aug = std::move(aug_ds);
    p.mix.check_unique_ids();
    return p;
  }

  const corpus::Dataset& select(PoolSource s) const {
    switch (s) {
      case PoolSource::kClean: return clean;
      case PoolSource::kAug: return aug;
      case PoolSource::kMix: return mix;
    }
    throw std::logic_error("bad pool source");
  }
};

struct DemoConfig {
  std::size_t k = 2;
  PoolSource source = PoolSource::kAug;
};

// Pool embeddings computed once; immutable afterwards and safe to share.
struct EmbeddingIndex {
  std::vector<std::string> ids;
  std::vector<std::string> texts;
  std::vector<std::vector<double>> vectors;

  static EmbeddingIndex build(const corpus::Dataset& pool, const Embedder& emb) {
    EmbeddingIndex idx;
    idx.ids.reserve(pool.size());
    idx.vectors.reserve(pool.size());
    for (const auto& u : pool.utterances) {
      idx.ids.push_back(u.id);
      idx.texts.push_back(u.text());
      idx.vectors.push_back(emb.embed(idx.texts.back()));
    }
    return idx;
  }

  std::size_t size() const { return ids.size(); }
};

struct ScoredId {
  std::string id;
  double score;
};

struct RankResult {
  std::vector<ScoredId> items;
  bool zero_query = false;  // query embedded to the zero vector
};

// Cosine ranking against every pool item, descending, ties broken by
// ascending pool index. The query's own id (training-time retrieval) is
// excluded.
inline RankResult rank_topk(const corpus::Utterance& query,
                            const EmbeddingIndex& index, std::size_t k,
                            const Embedder& emb) {
  if (k > index.size())
    throw std::invalid_argument("rank_topk: k exceeds pool size");
  std::vector<double> q = emb.embed(query.text());
  RankResult out;
  out.zero_query =
      std::all_of(q.begin(), q.end(), [](double x) { return x == 0.0; });

  std::vector<std::size_t> order;
  std::vector<double> scores(index.size());
  order.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index.ids[i] == query.id) continue;
    scores[i] = out.zero_query ? 0.0 : cosine(q, index.vectors[i]);
    order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  std::size_t take = std::min(k, order.size());
  out.items.reserve(take);
  for (std::size_t i = 0; i < take; ++i)
    out.items.push_back({index.ids[order[i]], scores[order[i]]});
  return out;
}

inline RankResult rank_topk(const corpus::Utterance& query,
                            const corpus::Dataset& pool, std::size_t k,
                            const Embedder& emb) {
  return rank_topk(query, EmbeddingIndex::build(pool, emb), k, emb);
}

// "<utterance text>. <linearized slots>." with the trailing period
// normalized to exactly one.
inline std::string render_demonstration(const corpus::Utterance& u) {
  std::string text = u.text();
  while (!text.empty() && (text.back() == '.' || text.back() == ' '))
    text.pop_back();
  return text + ". " + corpus::linearize(u) + ".";
}

struct AssembledInput {
  std::string text;
  std::vector<std::string> demo_ids;
};

inline constexpr std::string_view kDemoMarker = "Demonstrations: ";
inline constexpr std::string_view kInputMarker = "Input Utterance: ";

// Joins rendered demonstrations (most similar first) with the input.
// With zero demos the text carries only the input segment.
inline AssembledInput assemble_input(const std::vector<corpus::Utterance>& demo_utts,
                                     const corpus::Utterance& x) {
  AssembledInput out;
  if (demo_utts.empty()) {
    out.text = std::string(kInputMarker) + x.text();
    return out;
  }
  std::vector<std::string> rendered;
  rendered.reserve(demo_utts.size());
  for (const auto& d : demo_utts) {
    rendered.push_back(render_demonstration(d));
    out.demo_ids.push_back(d.id);
  }
  out.text = std::string(kDemoMarker) + join(rendered, " ") + " " +
             std::string(kInputMarker) + x.text();
  return out;
}

// Retrieval + assembly in one step against a prebuilt index.
inline AssembledInput retrieve_and_assemble(const corpus::Utterance& x,
                                            const corpus::Dataset& pool,
                                            const EmbeddingIndex& index,
                                            std::size_t k, const Embedder& emb) {
  RankResult ranked = rank_topk(x, index, k, emb);
  std::vector<corpus::Utterance> demo_utts;
  demo_utts.reserve(ranked.items.size());
  for (const auto& item : ranked.items) {
    const corpus::Utterance* u = pool.find(item.id);
    if (!u) throw std::logic_error("retrieved id missing from pool: " + item.id);
    demo_utts.push_back(*u);
  }
  return assemble_input(demo_utts, x);
}

}  // namespace demonsf::demos
