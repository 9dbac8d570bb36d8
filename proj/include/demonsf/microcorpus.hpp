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

#include <string>
#include <vector>

#include "demonsf/corpus.hpp"
#include "demonsf/lexicon.hpp"
#include "demonsf/rng.hpp"

namespace demonsf::microcorpus {

// A small grammar over five slot types for end-to-end runs. Everything
// is lowercase ASCII so the character vocabulary stays tiny.

inline corpus::SlotSchema schema() {
  return corpus::SlotSchema{{"artist", "city", "genre", "dish", "day"}};
}

namespace detail {

struct Values {
  std::vector<std::string> artist = {
      "westbam",      "dj shadow",    "norah jones", "daft punk",
      "miles davis",  "nina simone",  "tom waits",   "aphex twin",
      "burial",       "four tet",     "fat freddy",  "bonobo"};
  std::vector<std::string> city = {
      "paris",  "london", "tokyo",  "berlin", "madrid", "oslo",
      "porto",  "austin", "seattle", "dublin", "mumbai", "cairo"};
  std::vector<std::string> genre = {
      "jazz",  "techno", "ambient", "blues", "folk",
      "reggae", "disco", "metal",   "soul",  "house"};
  std::vector<std::string> dish = {
      "ramen", "tacos",   "paella",  "sushi", "pizza",
      "curry", "falafel", "noodles", "gnocchi", "pancakes"};
  std::vector<std::string> day = {
      "monday", "tuesday",  "wednesday", "thursday", "friday",
      "saturday", "sunday", "tomorrow",  "tonight"};

  const std::vector<std::string>& of(const std::string& type) const {
    if (type == "artist") return artist;
    if (type == "city") return city;
    if (type == "genre") return genre;
    if (type == "dish") return dish;
    return day;
  }
};

// Templates as token lists; "{type}" expands to a slot value.
inline const std::vector<std::vector<std::string>>& templates() {
  static const std::vector<std::vector<std::string>> t = {
      {"play", "{artist}"},
      {"play", "some", "{genre}"},
      {"play", "{genre}", "by", "{artist}"},
      {"put", "on", "something", "by", "{artist}"},
      {"queue", "{genre}", "music", "for", "{day}"},
      {"book", "a", "table", "in", "{city}", "on", "{day}"},
      {"book", "a", "table", "for", "{day}"},
      {"find", "me", "{dish}", "in", "{city}"},
      {"order", "{dish}", "for", "{day}"},
      {"order", "some", "{dish}"},
      {"what", "is", "the", "weather", "in", "{city}"},
      {"remind", "me", "to", "call", "on", "{day}"},
      {"skip", "this", "song"},
      {"stop", "the", "music"},
      {"cancel", "my", "order"},
  };
  return t;
}

}  // namespace detail

inline corpus::Utterance generate_one(Rng& rng, const std::string& id) {
  static const detail::Values values;
  const auto& tmpl = detail::templates()[rng.uniform(detail::templates().size())];
  corpus::Utterance u;
  u.id = id;
  for (const auto& piece : tmpl) {
    if (piece.size() > 2 && piece.front() == '{' && piece.back() == '}') {
      std::string type = piece.substr(1, piece.size() - 2);
      const auto& pool = values.of(type);
      auto words = split_whitespace(pool[rng.uniform(pool.size())]);
      for (std::size_t i = 0; i < words.size(); ++i) {
        u.tokens.push_back(words[i]);
        u.tags.push_back((i == 0 ? "B-" : "I-") + type);
      }
    } else {
      u.tokens.push_back(piece);
      u.tags.emplace_back("O");
    }
  }
  return u;
}

inline corpus::Dataset generate(std::size_t count, std::uint64_t seed,
                                const std::string& id_prefix) {
  corpus::Dataset ds;
  ds.name = id_prefix;
  ds.schema = schema();
  Rng rng(derive_seed(seed, "microcorpus"));
  for (std::size_t i = 0; i < count; ++i) {
    std::string id = id_prefix + std::to_string(i + 1);
    ds.utterances.push_back(generate_one(rng, id));
  }
  return ds;
}

// Companion lexicons sized to the grammar's function words.
inline perturb::Lexicons lexicons() {
  perturb::Lexicons lex;
  lex.homophones = {
      {"for", {"four", "fore"}}, {"to", {"too", "two"}},
      {"by", {"buy", "bye"}},    {"in", {"inn"}},
      {"some", {"sum"}},         {"on", {"onn"}},
      {"me", {"mee"}},           {"the", {"thee"}},
  };
  lex.synonyms = {
      {"play", {"start", "spin"}},    {"book", {"reserve", "grab"}},
      {"find", {"locate", "get"}},    {"order", {"fetch", "bring"}},
      {"music", {"tunes", "tracks"}}, {"table", {"spot", "seat"}},
      {"call", {"phone", "ring"}},    {"weather", {"forecast"}},
      {"song", {"track", "tune"}},    {"remind", {"alert"}},
      {"cancel", {"drop", "scrap"}},  {"stop", {"halt", "end"}},
      {"skip", {"pass"}},             {"queue", {"line", "cue"}},
  };
  lex.filler_words = {"please", "um", "uh", "just", "kindly"};
  lex.irrelevant_phrases = {
      {"by", "the", "way"},
      {"if", "you", "can"},
      {"real", "quick"},
      {"when", "you", "get", "a", "chance"},
      {"thanks", "a", "lot"},
  };
  lex.validate();
  return lex;
}

}  // namespace demonsf::microcorpus
