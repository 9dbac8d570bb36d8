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
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "demonsf/corpus.hpp"
#include "demonsf/util.hpp"

namespace demonsf::perturb {

// Self-contained replacement resources for the word/sentence perturbers.
// `vocabulary` is the word-replacement pool; when left empty it is filled
// from the clean corpus at pool-build time.
struct Lexicons {
  std::map<std::string, std::vector<std::string>> homophones;
  std::map<std::string, std::vector<std::string>> synonyms;
  std::vector<std::vector<std::string>> irrelevant_phrases;
  std::vector<std::string> filler_words;
  std::vector<std::string> vocabulary;

  void validate() const {
    auto check_map = [](const auto& m, const char* name) {
      for (const auto& [word, variants] : m) {
        if (variants.empty())
          throw corpus::ValidationError(std::string(name) + ": empty variant list for '" +
                                        word + "'");
        if (word != to_lower(word))
          throw corpus::ValidationError(std::string(name) + ": entry '" + word +
                                        "' is not lowercase");
        for (const auto& v : variants)
          if (v != to_lower(v))
            throw corpus::ValidationError(std::string(name) + ": variant '" + v +
                                          "' is not lowercase");
      }
    };
    check_map(homophones, "homophones");
    check_map(synonyms, "synonyms");
    for (const auto& p : irrelevant_phrases)
      if (p.empty())
        throw corpus::ValidationError("irrelevant_phrases: empty phrase");
  }
};

namespace detail {

// "word<TAB>variant1,variant2" per line; '#' comments.
inline std::map<std::string, std::vector<std::string>> load_variant_map(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open lexicon file: " + path.string());
  std::map<std::string, std::vector<std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw ParseError(path.string() + ":" + std::to_string(lineno) +
                       ": expected 'word<TAB>variants'");
    std::string word = trim(line.substr(0, tab));
    std::vector<std::string> variants;
    for (const auto& v : split(line.substr(tab + 1), ","))
      if (!trim(v).empty()) variants.push_back(trim(v));
    if (word.empty() || variants.empty())
      throw ParseError(path.string() + ":" + std::to_string(lineno) +
                       ": empty word or variant list");
    out[word] = std::move(variants);
  }
  return out;
}

}  // namespace detail

inline void load_homophones(Lexicons& lex, const std::filesystem::path& path) {
  lex.homophones = detail::load_variant_map(path);
}

inline void load_synonyms(Lexicons& lex, const std::filesystem::path& path) {
  lex.synonyms = detail::load_variant_map(path);
}

// One space-separated phrase per line.
inline void load_irrelevant_phrases(Lexicons& lex,
                                    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open phrase file: " + path.string());
  lex.irrelevant_phrases.clear();
  std::string line;
  while (std::getline(in, line)) {
    auto tokens = split_whitespace(line);
    if (!tokens.empty()) lex.irrelevant_phrases.push_back(std::move(tokens));
  }
}

// One word per line.
inline void load_filler_words(Lexicons& lex, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open filler file: " + path.string());
  lex.filler_words.clear();
  std::string line;
  while (std::getline(in, line)) {
    std::string w = trim(line);
    if (!w.empty()) lex.filler_words.push_back(std::move(w));
  }
}

// Deduplicated, sorted token vocabulary of a dataset.
inline std::vector<std::string> corpus_vocabulary(const corpus::Dataset& ds) {
  std::set<std::string> words;
  for (const auto& u : ds.utterances)
    for (const auto& t : u.tokens) words.insert(t);
  return {words.begin(), words.end()};
}

}  // namespace demonsf::perturb
