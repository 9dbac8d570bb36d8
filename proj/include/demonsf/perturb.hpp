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

#include <array>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "demonsf/corpus.hpp"
#include "demonsf/lexicon.hpp"
#include "demonsf/rng.hpp"

namespace demonsf::perturb {

enum class Level { kChar, kWord, kSentence };

inline std::string_view level_name(Level l) {
  switch (l) {
    case Level::kChar: return "char";
    case Level::kWord: return "word";
    case Level::kSentence: return "sent";
  }
  return "?";
}

inline Level level_from_name(std::string_view s) {
  if (s == "char") return Level::kChar;
  if (s == "word") return Level::kWord;
  if (s == "sent" || s == "sentence") return Level::kSentence;
  throw std::invalid_argument("unknown perturbation level: " + std::string(s));
}

// entity_adjacent_only restricts word ops to O-tagged neighbours of
// entity spans (the Subword preset); the other two scopes follow their
// names.
enum class Scope { kAllTokens, kEntityTokensOnly, kEntityAdjacentOnly };

inline std::string_view scope_name(Scope s) {
  switch (s) {
    case Scope::kAllTokens: return "all_tokens";
    case Scope::kEntityTokensOnly: return "entity_tokens_only";
    case Scope::kEntityAdjacentOnly: return "entity_adjacent_only";
  }
  return "?";
}

inline Scope scope_from_name(std::string_view s) {
  if (s == "all_tokens") return Scope::kAllTokens;
  if (s == "entity_tokens_only") return Scope::kEntityTokensOnly;
  if (s == "entity_adjacent_only") return Scope::kEntityAdjacentOnly;
  throw std::invalid_argument("unknown perturbation scope: " + std::string(s));
}

inline const std::vector<std::string>& ops_for_level(Level l) {
  static const std::vector<std::string> char_ops = {"insert", "delete",
                                                    "substitute"};
  static const std::vector<std::string> word_ops = {"delete", "insert",
                                                    "replace", "homophone"};
  static const std::vector<std::string> sent_ops = {"synonym_rewrite",
                                                    "append_irrelevant"};
  switch (l) {
    case Level::kChar: return char_ops;
    case Level::kWord: return word_ops;
    case Level::kSentence: return sent_ops;
  }
  throw std::logic_error("bad level");
}

struct PerturbationSpec {
  Level level = Level::kChar;
  std::vector<std::string> ops = ops_for_level(Level::kChar);
  double prob = 0.3;
  Scope scope = Scope::kAllTokens;
  std::uint64_t seed = 0;

  void validate() const {
    if (prob < 0.0 || prob > 1.0)
      throw std::invalid_argument("perturbation prob must be in [0,1]");
    if (ops.empty()) throw std::invalid_argument("perturbation op set is empty");
    const auto& known = ops_for_level(level);
    for (const auto& op : ops)
      if (std::find(known.begin(), known.end(), op) == known.end())
        throw std::invalid_argument("op '" + op + "' is not a " +
                                    std::string(level_name(level)) + "-level op");
  }
};

struct AppliedOp {
  Level level;
  std::string op;
  std::size_t position;  // token index in the input of that pass
};

struct PerturbedUtterance {
  corpus::Utterance utterance;
  std::string source_id;
  std::vector<AppliedOp> applied;
};

namespace detail {

// Fixed QWERTY neighbourhood for the substitute op.
inline const std::map<char, std::string>& keyboard_adjacency() {
  static const std::map<char, std::string> table = {
      {'a', "qwsz"},   {'b', "vghn"},  {'c', "xdfv"},  {'d', "serfcx"},
      {'e', "wsdr"},   {'f', "drtgvc"}, {'g', "ftyhbv"}, {'h', "gyujnb"},
      {'i', "ujko"},   {'j', "huikmn"}, {'k', "jiolm"}, {'l', "kop"},
      {'m', "njk"},    {'n', "bhjm"},  {'o', "iklp"},  {'p', "ol"},
      {'q', "wa"},     {'r', "edft"},  {'s', "awedxz"}, {'t', "rfgy"},
      {'u', "yhji"},   {'v', "cfgb"},  {'w', "qase"},  {'x', "zsdc"},
      {'y', "tghu"},   {'z', "asx"}};
  return table;
}

inline bool is_entity_tag(std::string_view tag) { return tag != "O"; }

inline bool in_scope(const corpus::Utterance& u, std::size_t i, Scope scope) {
  switch (scope) {
    case Scope::kAllTokens:
      return true;
    case Scope::kEntityTokensOnly:
      return is_entity_tag(u.tags[i]);
    case Scope::kEntityAdjacentOnly:
      if (is_entity_tag(u.tags[i])) return false;
      if (i > 0 && is_entity_tag(u.tags[i - 1])) return true;
      if (i + 1 < u.tags.size() && is_entity_tag(u.tags[i + 1])) return true;
      return false;
  }
  return true;
}

inline char random_lowercase(Rng& rng) {
  return static_cast<char>('a' + rng.uniform(26));
}

// One edit on one token. Draw order: op choice, position, replacement.
inline std::optional<std::string> apply_char_op(const std::string& op,
                                                std::string token, Rng& rng) {
  if (op == "insert") {
    std::size_t pos = rng.uniform(token.size() + 1);
    token.insert(token.begin() + static_cast<long>(pos), random_lowercase(rng));
    return token;
  }
  if (op == "delete") {
    std::size_t pos = rng.uniform(token.size());
    token.erase(token.begin() + static_cast<long>(pos));
    return token;
  }
  if (op == "substitute") {
    std::size_t pos = rng.uniform(token.size());
    const auto& table = keyboard_adjacency();
    auto it = table.find(token[pos]);
    if (it != table.end()) {
      token[pos] = it->second[rng.uniform(it->second.size())];
    } else {
      token[pos] = random_lowercase(rng);  // no neighbours for this char
    }
    return token;
  }
  return std::nullopt;
}

}  // namespace detail

// Per-utterance stream: hash of (spec seed, utterance id), so utterances
// can be processed in any order or in parallel.
inline Rng utterance_rng(const PerturbationSpec& spec,
                         const corpus::Utterance& u) {
  return Rng(derive_seed(spec.seed, u.id));
}

// Token-level typos. Each in-scope token is selected independently with
// probability p and receives exactly one edit; length-1 tokens never
// receive delete. Token count and tags are preserved.
inline PerturbedUtterance perturb_char(const corpus::Utterance& u,
                                       const PerturbationSpec& spec) {
  if (spec.level != Level::kChar)
    throw std::invalid_argument("perturb_char: spec.level != char");
  spec.validate();
  Rng rng = utterance_rng(spec, u);
  PerturbedUtterance out{u, u.id, {}};
  for (std::size_t i = 0; i < u.tokens.size(); ++i) {
    if (!detail::in_scope(u, i, spec.scope)) continue;
    if (!rng.bernoulli(spec.prob)) continue;
    std::vector<std::string> eligible;
    for (const auto& op : spec.ops)
      if (!(op == "delete" && u.tokens[i].size() <= 1)) eligible.push_back(op);
    if (eligible.empty()) continue;
    const std::string& op = eligible[rng.uniform(eligible.size())];
    if (auto edited = detail::apply_char_op(op, u.tokens[i], rng)) {
      out.utterance.tokens[i] = *edited;
      out.applied.push_back({Level::kChar, op, i});
    }
  }
  return out;
}

// Word deletion/insertion/replacement/homophone substitution with BIO
// re-alignment. Homophone and replace are only eligible where the
// lexicon has an entry, and delete never empties the utterance.
inline PerturbedUtterance perturb_word(const corpus::Utterance& u,
                                       const PerturbationSpec& spec,
                                       const Lexicons& lex) {
  if (spec.level != Level::kWord)
    throw std::invalid_argument("perturb_word: spec.level != word");
  spec.validate();
  Rng rng = utterance_rng(spec, u);
  PerturbedUtterance out;
  out.source_id = u.id;
  out.utterance.id = u.id;

  auto& tokens = out.utterance.tokens;
  auto& tags = out.utterance.tags;
  const std::size_t n = u.tokens.size();
  for (std::size_t i = 0; i < n; ++i) {
    bool selected = detail::in_scope(u, i, spec.scope) && rng.bernoulli(spec.prob);
    if (!selected) {
      tokens.push_back(u.tokens[i]);
      tags.push_back(u.tags[i]);
      continue;
    }
    std::vector<std::string> eligible;
    for (const auto& op : spec.ops) {
      if (op == "delete" && tokens.empty() && i + 1 == n) continue;
      if (op == "insert" && lex.filler_words.empty()) continue;
      if (op == "replace" && lex.vocabulary.empty()) continue;
      if (op == "homophone" && !lex.homophones.count(to_lower(u.tokens[i])))
        continue;
      eligible.push_back(op);
    }
    if (eligible.empty()) {
      tokens.push_back(u.tokens[i]);
      tags.push_back(u.tags[i]);
      continue;
    }
    const std::string& op = eligible[rng.uniform(eligible.size())];
    if (op == "delete") {
      out.applied.push_back({Level::kWord, op, i});
      continue;  // drop token; orphan-I repair below re-aligns
    }
    if (op == "insert") {
      tokens.push_back(u.tokens[i]);
      tags.push_back(u.tags[i]);
      tokens.push_back(rng.pick(lex.filler_words));
      bool inside_span = detail::is_entity_tag(u.tags[i]) && i + 1 < n &&
                         u.tags[i + 1].size() > 1 && u.tags[i + 1][0] == 'I';
      tags.push_back(inside_span ? u.tags[i + 1] : std::string("O"));
      out.applied.push_back({Level::kWord, op, i});
      continue;
    }
    if (op == "replace") {
      tokens.push_back(rng.pick(lex.vocabulary));
      tags.push_back(u.tags[i]);
      out.applied.push_back({Level::kWord, op, i});
      continue;
    }
    // homophone
    tokens.push_back(rng.pick(lex.homophones.at(to_lower(u.tokens[i]))));
    tags.push_back(u.tags[i]);
    out.applied.push_back({Level::kWord, op, i});
  }
  corpus::repair_bio(out.utterance);
  return out;
}

// Sentence-level rewrite. One op per utterance: either every non-entity
// token with a synonym entry is rewritten, or one irrelevant phrase is
// attached (seeded coin: prepend or append). Entity surfaces and types
// are preserved exactly.
inline PerturbedUtterance perturb_sentence(const corpus::Utterance& u,
                                           const PerturbationSpec& spec,
                                           const Lexicons& lex) {
  if (spec.level != Level::kSentence)
    throw std::invalid_argument("perturb_sentence: spec.level != sentence");
  spec.validate();
  Rng rng = utterance_rng(spec, u);
  PerturbedUtterance out{u, u.id, {}};
  const std::string& op = spec.ops[rng.uniform(spec.ops.size())];
  if (op == "synonym_rewrite") {
    for (std::size_t i = 0; i < u.tokens.size(); ++i) {
      if (detail::is_entity_tag(u.tags[i])) continue;
      auto it = lex.synonyms.find(to_lower(u.tokens[i]));
      if (it == lex.synonyms.end()) continue;
      out.utterance.tokens[i] = it->second[rng.uniform(it->second.size())];
      out.applied.push_back({Level::kSentence, op, i});
    }
    return out;
  }
  // append_irrelevant
  if (lex.irrelevant_phrases.empty()) return out;
  bool append = rng.coin();
  const auto& phrase = lex.irrelevant_phrases[rng.uniform(lex.irrelevant_phrases.size())];
  auto& tokens = out.utterance.tokens;
  auto& tags = out.utterance.tags;
  if (append) {
    for (const auto& w : phrase) {
      tokens.push_back(w);
      tags.emplace_back("O");
    }
    out.applied.push_back({Level::kSentence, op, u.tokens.size()});
  } else {
    tokens.insert(tokens.begin(), phrase.begin(), phrase.end());
    tags.insert(tags.begin(), phrase.size(), "O");
    out.applied.push_back({Level::kSentence, op, 0});
  }
  return out;
}

inline PerturbedUtterance apply_spec(const corpus::Utterance& u,
                                     const PerturbationSpec& spec,
                                     const Lexicons& lex) {
  switch (spec.level) {
    case Level::kChar: return perturb_char(u, spec);
    case Level::kWord: return perturb_word(u, spec, lex);
    case Level::kSentence: return perturb_sentence(u, spec, lex);
  }
  throw std::logic_error("bad level");
}

// Threads the utterance through the specs left to right, concatenating
// provenance. Builds the mixed-perturbation suites.
inline PerturbedUtterance compose(const corpus::Utterance& u,
                                  const std::vector<PerturbationSpec>& specs,
                                  const Lexicons& lex) {
  if (specs.empty()) throw std::invalid_argument("compose: no specs");
  PerturbedUtterance acc{u, u.id, {}};
  for (const auto& spec : specs) {
    PerturbedUtterance step = apply_spec(acc.utterance, spec, lex);
    acc.utterance = std::move(step.utterance);
    acc.applied.insert(acc.applied.end(), step.applied.begin(), step.applied.end());
  }
  return acc;
}

struct PoolConfig {
  PerturbationSpec char_spec{Level::kChar, ops_for_level(Level::kChar), 0.3,
                             Scope::kAllTokens, 0};
  PerturbationSpec word_spec{Level::kWord, ops_for_level(Level::kWord), 0.3,
                             Scope::kAllTokens, 0};
  PerturbationSpec sent_spec{Level::kSentence, ops_for_level(Level::kSentence),
                             0.3, Scope::kAllTokens, 0};
};

// The noisy candidate pool: one variant per level per clean utterance,
// ids suffixed :char/:word/:sent. |pool| == 3 * |clean|.
inline std::vector<PerturbedUtterance> build_pool_with_provenance(
    const corpus::Dataset& clean, const PoolConfig& cfg, Lexicons& lex) {
  if (lex.vocabulary.empty()) lex.vocabulary = corpus_vocabulary(clean);
  std::vector<PerturbedUtterance> out;
  out.reserve(clean.size() * 3);
  for (const auto& u : clean.utterances) {
    for (const auto* spec : {&cfg.char_spec, &cfg.word_spec, &cfg.sent_spec}) {
      PerturbedUtterance p = apply_spec(u, *spec, lex);
      p.utterance.id = u.id + ":" + std::string(level_name(spec->level));
      corpus::validate_bio(p.utterance, clean.schema);
      out.push_back(std::move(p));
    }
  }
  return out;
}

inline corpus::Dataset build_pool(const corpus::Dataset& clean,
                                  const PoolConfig& cfg, Lexicons& lex) {
  corpus::Dataset pool;
  pool.name = clean.name + ":aug";
  pool.schema = clean.schema;
  for (auto& p : build_pool_with_provenance(clean, cfg, lex))
    pool.utterances.push_back(std::move(p.utterance));
  return pool;
}

// Provenance level of a pool id ("x:char" -> char); nullopt for clean ids.
inline std::optional<Level> pool_level(std::string_view id) {
  auto pos = id.rfind(':');
  if (pos == std::string_view::npos) return std::nullopt;
  auto suffix = id.substr(pos + 1);
  if (suffix == "char") return Level::kChar;
  if (suffix == "word") return Level::kWord;
  if (suffix == "sent") return Level::kSentence;
  return std::nullopt;
}

// Strips the :level suffix off a pool id.
inline std::string pool_source_id(std::string_view id) {
  if (pool_level(id)) return std::string(id.substr(0, id.rfind(':')));
  return std::string(id);
}

inline nlohmann::json perturbed_to_json(const PerturbedUtterance& p) {
  nlohmann::json applied = nlohmann::json::array();
  for (const auto& a : p.applied)
    applied.push_back({std::string(level_name(a.level)), a.op, a.position});
  nlohmann::json rec = corpus::utterance_to_json(p.utterance);
  rec["source_id"] = p.source_id;
  rec["applied"] = applied;
  return rec;
}

}  // namespace demonsf::perturb
