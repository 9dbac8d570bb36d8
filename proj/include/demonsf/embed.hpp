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

#include <cmath>
#include <string_view>
#include <vector>

#include "demonsf/util.hpp"

namespace demonsf::demos {

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<double> embed(std::string_view text) const = 0;
  virtual std::size_t dim() const = 0;
};

// Hashed character 3/4/5-gram term frequencies, L2-normalized.
// Deterministic, dependency-free stand-in for a sentence encoder;
// empty or whitespace-only text maps to the zero vector.
class BuiltinNgramEmbedder final : public Embedder {
 public:
  explicit BuiltinNgramEmbedder(std::size_t dim = 1024) : dim_(dim) {}

  std::vector<double> embed(std::string_view text) const override {
    std::vector<double> v(dim_, 0.0);
    if (trim(text).empty()) return v;
    for (std::size_t n = 3; n <= 5; ++n) {
      if (text.size() < n) break;
      for (std::size_t i = 0; i + n <= text.size(); ++i)
        v[fnv1a64(text.substr(i, n)) % dim_] += 1.0;
    }
    double norm2 = 0.0;
    for (double x : v) norm2 += x * x;
    if (norm2 > 0.0) {
      double inv = 1.0 / std::sqrt(norm2);
      for (double& x : v) x *= inv;
    }
    return v;
  }

  std::size_t dim() const override { return dim_; }

 private:
  std::size_t dim_;
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace demonsf::demos
