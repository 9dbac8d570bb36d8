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

#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "demonsf/corpus.hpp"
#include "demonsf/perturb.hpp"
#include "demonsf/rng.hpp"

namespace demonsf::aux {

enum class Task { kNR, kRM, kHD, kMain };

inline std::string_view task_name(Task t) {
  switch (t) {
    case Task::kNR: return "NR";
    case Task::kRM: return "RM";
    case Task::kHD: return "HD";
    case Task::kMain: return "main";
  }
  return "?";
}

inline Task task_from_name(std::string_view s) {
  if (s == "NR") return Task::kNR;
  if (s == "RM") return Task::kRM;
  if (s == "HD") return Task::kHD;
  if (s == "main") return Task::kMain;
  throw std::invalid_argument("unknown task: " + std::string(s));
}

// One decoder serves every task, disambiguated by an input prefix.
inline std::string_view task_prefix(Task t) {
  switch (t) {
    case Task::kNR: return "recover: ";
    case Task::kRM: return "fill: ";
    case Task::kHD: return "discriminate: ";
    case Task::kMain: return "extract: ";
  }
  return "";
}

inline constexpr std::string_view kMaskToken = "[MASK]";

// Four discrimination classes: clean plus the three perturbation levels.
inline const std::vector<std::string>& hd_classes() {
  static const std::vector<std::string> classes = {"<clean>", "<char>", "<word>",
                                                   "<sent>"};
  return classes;
}

inline std::string hd_class_for(std::string_view id) {
  auto level = perturb::pool_level(id);
  if (!level) return "<clean>";
  switch (*level) {
    case perturb::Level::kChar: return "<char>";
    case perturb::Level::kWord: return "<word>";
    case perturb::Level::kSentence: return "<sent>";
  }
  return "<clean>";
}

struct AuxInstance {
  Task task = Task::kMain;
  std::string input_text;
  std::string target_text;
};

struct LossWeights {
  double alpha = 1.0 / 3.0;
  double beta = 1.0 / 3.0;
  double gamma = 1.0 / 3.0;

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0)
      throw std::invalid_argument("loss weights must be non-negative");
    if (alpha + beta + gamma <= 0)
      throw std::invalid_argument("loss weights must not all be zero");
  }
};

inline double joint_loss(double l_nr, double l_rm, double l_hd,
                         const LossWeights& w) {
  w.validate();
  return w.alpha * l_nr + w.beta * l_rm + w.gamma * l_hd;
}

// Noisy recovery: one instance per char-level pool variant, mapping the
// perturbed text back to its clean source text.
inline std::vector<AuxInstance> build_nr(const corpus::Dataset& clean,
                                         const corpus::Dataset& pool) {
  std::map<std::string_view, const corpus::Utterance*> by_id;
  for (const auto& u : clean.utterances) by_id[u.id] = &u;
  std::vector<AuxInstance> out;
  for (const auto& u : pool.utterances) {
    if (perturb::pool_level(u.id) != perturb::Level::kChar) continue;
    std::string source_id = perturb::pool_source_id(u.id);
    auto it = by_id.find(source_id);
    if (it == by_id.end())
      throw corpus::ValidationError("NR build: dangling source id '" + source_id +
                                    "' for pool utterance '" + u.id + "'");
    out.push_back({Task::kNR, std::string(task_prefix(Task::kNR)) + u.text(),
                   it->second->text()});
  }
  return out;
}

struct RmBuild {
  std::vector<AuxInstance> instances;
  std::size_t skipped = 0;  // utterances with no entity span
};

// Random mask: one uniformly chosen entity span per utterance replaced
// by the single [MASK] token; the target is the masked surface.
inline RmBuild build_rm(const corpus::Dataset& pool_mix, std::uint64_t seed) {
  RmBuild out;
  for (const auto& u : pool_mix.utterances) {
    auto spans = corpus::spans_from_bio(u);
    if (spans.empty()) {
      ++out.skipped;
      continue;
    }
    Rng rng(derive_seed(seed, u.id));
    const auto& span = spans[rng.uniform(spans.size())];
    std::vector<std::string> masked;
    masked.reserve(u.tokens.size());
    for (std::size_t i = 0; i < u.tokens.size(); ++i) {
      if (i == span.start) masked.emplace_back(kMaskToken);
      if (i >= span.start && i <= span.end) continue;
      masked.push_back(u.tokens[i]);
    }
    out.instances.push_back({Task::kRM,
                             std::string(task_prefix(Task::kRM)) + join(masked, " "),
                             span.surface});
  }
  return out;
}

struct HdBuild {
  std::vector<AuxInstance> instances;
  std::map<std::string, std::size_t> class_counts;
};

// Hybrid discrimination over the mixed dataset: input text -> class
// token per provenance, order shuffled with the given seed.
inline HdBuild build_hd(const corpus::Dataset& clean, const corpus::Dataset& pool,
                        std::uint64_t seed) {
  HdBuild out;
  std::vector<const corpus::Utterance*> mixed;
  mixed.reserve(clean.size() + pool.size());
  for (const auto& u : clean.utterances) mixed.push_back(&u);
  for (const auto& u : pool.utterances) mixed.push_back(&u);
  Rng rng(derive_seed(seed, "hd-shuffle"));
  rng.shuffle(mixed);
  for (const auto* u : mixed) {
    std::string cls = hd_class_for(u->id);
    ++out.class_counts[cls];
    out.instances.push_back(
        {Task::kHD, std::string(task_prefix(Task::kHD)) + u->text(), cls});
  }
  return out;
}

inline nlohmann::json aux_to_json(const AuxInstance& a) {
  return nlohmann::json{{"task", std::string(task_name(a.task))},
                        {"input", a.input_text},
                        {"target", a.target_text}};
}

inline AuxInstance aux_from_json(const nlohmann::json& rec) {
  return AuxInstance{task_from_name(rec.at("task").get<std::string>()),
                     rec.at("input").get<std::string>(),
                     rec.at("target").get<std::string>()};
}

}  // namespace demonsf::aux
