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
#include <functional>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace demonsf {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Streams one parsed record per non-empty line. Lines holding a "_meta"
// object (artifact headers carrying the config digest) are skipped.
// The callback receives (record, 1-based line number).
inline void for_each_jsonl_record(
    const std::filesystem::path& path,
    const std::function<void(const nlohmann::json&, std::size_t)>& fn) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open file: " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) +
                       ": invalid JSON: " + e.what());
    }
    if (rec.is_object() && rec.contains("_meta")) continue;
    fn(rec, lineno);
  }
}

class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path) : out_(path) {
    if (!out_) throw std::runtime_error("cannot write file: " + path.string());
  }

  // Artifact header; loaders skip it, tooling can audit it.
  void write_meta(const nlohmann::json& meta) {
    nlohmann::json rec;
    rec["_meta"] = meta;
    write(rec);
  }

  void write(const nlohmann::json& rec) { out_ << rec.dump() << '\n'; }

 private:
  std::ofstream out_;
};

}  // namespace demonsf
