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
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "demonsf/jsonl.hpp"
#include "demonsf/util.hpp"

namespace demonsf::corpus {

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Separators of the linearized target format. The fragment separator is
// reserved: slot-type names may not contain either string.
inline constexpr std::string_view kTypeSep = " is ";
inline constexpr std::string_view kFragmentSep = "; ";
inline constexpr std::string_view kEmptyTarget = "none";

struct SlotSchema {
  std::vector<std::string> types;

  bool contains(std::string_view t) const {
    for (const auto& s : types)
      if (s == t) return true;
    return false;
  }

  void validate() const {
    if (types.empty()) throw ValidationError("schema: no slot types");
    std::set<std::string> seen;
    for (const auto& t : types) {
      if (!seen.insert(t).second)
        throw ValidationError("schema: duplicate slot type '" + t + "'");
      if (t.find(kTypeSep) != std::string::npos ||
          t.find(kFragmentSep) != std::string::npos)
        throw ValidationError("schema: slot type '" + t +
                              "' contains a reserved separator");
    }
  }

  // One slot-type name per line; '#' starts a comment.
  static SlotSchema from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open schema file: " + path.string());
    SlotSchema schema;
    std::string line;
    while (std::getline(in, line)) {
      auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      std::string name = trim(line);
      if (!name.empty()) schema.types.push_back(std::move(name));
    }
    schema.validate();
    return schema;
  }
};

struct Utterance {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<std::string> tags;

  std::string text() const { return join(tokens, " "); }
};

struct SlotSpan {
  std::size_t start = 0;  // token indices, end inclusive
  std::size_t end = 0;
  std::string slot_type;
  std::string surface;
};

enum class BioMode { kStrict, kLenient };

namespace detail {

struct ParsedTag {
  char kind;  // 'O', 'B' or 'I'
  std::string_view type;
};

inline std::optional<ParsedTag> parse_tag(std::string_view tag) {
  if (tag == "O") return ParsedTag{'O', {}};
  if (tag.size() > 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-')
    return ParsedTag{tag[0], tag.substr(2)};
  return std::nullopt;
}

}  // namespace detail

// Returns an error message, or nullopt when the utterance is valid.
inline std::optional<std::string> bio_violation(const Utterance& u,
                                                const SlotSchema& schema) {
  if (u.tokens.empty()) return "utterance '" + u.id + "': no tokens";
  if (u.tokens.size() != u.tags.size())
    return "utterance '" + u.id + "': " + std::to_string(u.tokens.size()) +
           " tokens but " + std::to_string(u.tags.size()) + " tags";
  std::string_view prev_type;
  char prev_kind = 'O';
  for (std::size_t i = 0; i < u.tags.size(); ++i) {
    auto parsed = detail::parse_tag(u.tags[i]);
    if (!parsed)
      return "utterance '" + u.id + "': malformed tag '" + u.tags[i] + "'";
    if (parsed->kind != 'O' && !schema.contains(parsed->type))
      return "utterance '" + u.id + "': unknown slot type in tag '" +
             u.tags[i] + "'";
    if (parsed->kind == 'I') {
      bool continues = (prev_kind == 'B' || prev_kind == 'I') &&
                       prev_type == parsed->type;
      if (!continues)
        return "utterance '" + u.id + "': orphan '" + u.tags[i] +
               "' at token " + std::to_string(i);
    }
    prev_kind = parsed->kind;
    prev_type = parsed->type;
  }
  return std::nullopt;
}

inline void validate_bio(const Utterance& u, const SlotSchema& schema) {
  if (auto err = bio_violation(u, schema)) throw ValidationError(*err);
}

// Rewrites orphan I-x tags to B-x in place; returns the repair count.
// Only the orphan-continuation rule is repaired; malformed tags and
// unknown types still fail validation afterwards.
inline std::size_t repair_bio(Utterance& u) {
  std::size_t repairs = 0;
  std::string_view prev_type;
  char prev_kind = 'O';
  for (auto& tag : u.tags) {
    auto parsed = detail::parse_tag(tag);
    if (!parsed) {
      prev_kind = 'O';
      prev_type = {};
      continue;
    }
    if (parsed->kind == 'I') {
      bool continues = (prev_kind == 'B' || prev_kind == 'I') &&
                       prev_type == parsed->type;
      if (!continues) {
        tag[0] = 'B';
        ++repairs;
        parsed->kind = 'B';
      }
    }
    prev_kind = parsed->kind;
    prev_type = parsed->type;
  }
  return repairs;
}

struct Dataset {
  std::string name;
  std::vector<Utterance> utterances;
  SlotSchema schema;

  std::size_t size() const { return utterances.size(); }

  const Utterance* find(std::string_view id) const {
    for (const auto& u : utterances)
      if (u.id == id) return &u;
    return nullptr;
  }

  void check_unique_ids() const {
    std::set<std::string_view> seen;
    for (const auto& u : utterances)
      if (!seen.insert(u.id).second)
        throw ValidationError("dataset '" + name + "': duplicate id '" +
                              u.id + "'");
  }
};

inline std::vector<SlotSpan> spans_from_bio(const Utterance& u) {
  std::vector<SlotSpan> spans;
  std::optional<SlotSpan> open;
  auto close = [&] {
    if (open) {
      std::vector<std::string> surface(u.tokens.begin() + static_cast<long>(open->start),
                                       u.tokens.begin() + static_cast<long>(open->end) + 1);
      open->surface = join(surface, " ");
      spans.push_back(std::move(*open));
      open.reset();
    }
  };
  for (std::size_t i = 0; i < u.tags.size(); ++i) {
    auto parsed = detail::parse_tag(u.tags[i]);
    if (!parsed || parsed->kind == 'O') {
      close();
    } else if (parsed->kind == 'B') {
      close();
      open = SlotSpan{i, i, std::string(parsed->type), {}};
    } else {  // 'I' continues the open span (input is validated)
      open->end = i;
    }
  }
  close();
  return spans;
}

// "<surface> is <type>" fragments joined by "; "; no entities -> "none".
inline std::string linearize(const Utterance& u) {
  auto spans = spans_from_bio(u);
  if (spans.empty()) return std::string(kEmptyTarget);
  std::vector<std::string> fragments;
  fragments.reserve(spans.size());
  for (const auto& s : spans)
    fragments.push_back(s.surface + std::string(kTypeSep) + s.slot_type);
  return join(fragments, kFragmentSep);
}

using SurfaceType = std::pair<std::string, std::string>;

struct Delinearized {
  std::vector<SurfaceType> pairs;
  std::size_t dropped = 0;  // fragments that failed to parse
};

// Inverse of linearize over arbitrary model output. Fragments split on
// "; "; each parses at the LAST " is " so surfaces may contain the
// separator themselves. Anything unparseable degrades to a drop.
inline Delinearized delinearize(std::string_view s, const SlotSchema& schema) {
  Delinearized out;
  std::string whole = trim(s);
  if (whole.empty() || to_lower(whole) == kEmptyTarget) return out;
  for (const auto& piece : split(whole, kFragmentSep)) {
    std::string frag = trim(piece);
    if (frag.empty()) continue;
    std::size_t pos = frag.rfind(kTypeSep);
    if (pos == std::string::npos) {
      ++out.dropped;
      continue;
    }
    std::string surface = trim(std::string_view(frag).substr(0, pos));
    std::string type = trim(std::string_view(frag).substr(pos + kTypeSep.size()));
    if (surface.empty() || !schema.contains(type)) {
      ++out.dropped;
      continue;
    }
    out.pairs.emplace_back(std::move(surface), std::move(type));
  }
  return out;
}

enum class CorpusFormat { kJsonl, kConll };

struct LoadStats {
  std::size_t repairs = 0;  // lenient-mode orphan-I fixes
};

inline Dataset load_dataset(const std::filesystem::path& path,
                            CorpusFormat format, const SlotSchema& schema,
                            BioMode mode, LoadStats* stats = nullptr) {
  schema.validate();
  Dataset ds;
  ds.name = path.stem().string();
  ds.schema = schema;
  LoadStats local;

  auto admit = [&](Utterance&& u, std::size_t lineno) {
    if (mode == BioMode::kLenient) local.repairs += repair_bio(u);
    if (auto err = bio_violation(u, schema))
      throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                            ": " + *err);
    ds.utterances.push_back(std::move(u));
  };

  if (format == CorpusFormat::kJsonl) {
    for_each_jsonl_record(path, [&](const nlohmann::json& rec, std::size_t lineno) {
      Utterance u;
      try {
        u.id = rec.at("id").get<std::string>();
        u.tokens = rec.at("tokens").get<std::vector<std::string>>();
        u.tags = rec.at("tags").get<std::vector<std::string>>();
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ":" + std::to_string(lineno) +
                         ": bad record: " + e.what());
      }
      admit(std::move(u), lineno);
    });
  } else {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open file: " + path.string());
    std::string line;
    std::size_t lineno = 0, index = 0;
    Utterance u;
    std::size_t block_start = 1;
    auto flush = [&] {
      if (u.tokens.empty()) return;
      u.id = "u" + std::to_string(++index);
      admit(std::move(u), block_start);
      u = Utterance{};
    };
    while (std::getline(in, line)) {
      ++lineno;
      if (trim(line).empty()) {
        flush();
        continue;
      }
      if (u.tokens.empty()) block_start = lineno;
      auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw ParseError(path.string() + ":" + std::to_string(lineno) +
                         ": expected 'token<TAB>tag'");
      u.tokens.push_back(trim(line.substr(0, tab)));
      u.tags.push_back(trim(line.substr(tab + 1)));
    }
    flush();
  }

  ds.check_unique_ids();
  if (stats) *stats = local;
  return ds;
}

inline nlohmann::json utterance_to_json(const Utterance& u) {
  return nlohmann::json{
      {"id", u.id}, {"tokens", u.tokens}, {"tags", u.tags}, {"text", u.text()}};
}

inline void save_jsonl(const Dataset& ds, const std::filesystem::path& path,
                       const nlohmann::json& meta = nullptr) {
  JsonlWriter w(path);
  if (!meta.is_null()) w.write_meta(meta);
  for (const auto& u : ds.utterances) w.write(utterance_to_json(u));
}

}  // namespace demonsf::corpus
