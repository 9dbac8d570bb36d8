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

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "demonsf/corpus.hpp"
#include "demonsf/rng.hpp"

namespace testutil {

inline demonsf::corpus::SlotSchema small_schema() {
  return demonsf::corpus::SlotSchema{{"artist", "city", "genre", "dish", "day"}};
}

// Random valid utterance over lowercase tokens; spans are random
// contiguous runs, so every BIO shape (B, B-I, adjacent spans) occurs.
inline demonsf::corpus::Utterance random_utterance(demonsf::Rng& rng,
                                                   const demonsf::corpus::SlotSchema& schema,
                                                   const std::string& id,
                                                   std::size_t max_tokens = 10) {
  demonsf::corpus::Utterance u;
  u.id = id;
  std::size_t n = 1 + rng.uniform(max_tokens);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t len = 1 + rng.uniform(7);
    std::string tok;
    for (std::size_t c = 0; c < len; ++c)
      tok += static_cast<char>('a' + rng.uniform(26));
    u.tokens.push_back(tok);
  }
  u.tags.assign(n, "O");
  std::size_t i = 0;
  while (i < n) {
    if (rng.bernoulli(0.35)) {
      const std::string& type = rng.pick(schema.types);
      std::size_t span_len = 1 + rng.uniform(std::min<std::size_t>(3, n - i));
      u.tags[i] = "B-" + type;
      for (std::size_t j = 1; j < span_len; ++j) u.tags[i + j] = "I-" + type;
      i += span_len;
    } else {
      ++i;
    }
  }
  return u;
}

// Unique scratch directory under the build tree.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() /
             ("demonsf_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
