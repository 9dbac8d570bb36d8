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
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "demonsf/corpus.hpp"
#include "demonsf/util.hpp"

namespace demonsf::evalkit {

using SurfaceType = corpus::SurfaceType;

struct PredictionSet {
  std::map<std::string, std::vector<SurfaceType>> by_id;
};

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct MatchOptions {
  // Lowercase and collapse whitespace before comparing surfaces.
  bool normalize = true;
};

namespace detail {

inline std::map<SurfaceType, std::size_t> pair_multiset(
    const std::vector<SurfaceType>& pairs, const MatchOptions& opt) {
  std::map<SurfaceType, std::size_t> out;
  for (const auto& [surface, type] : pairs) {
    SurfaceType key = opt.normalize
                          ? SurfaceType{normalize_surface(surface), type}
                          : SurfaceType{surface, type};
    ++out[key];
  }
  return out;
}

}  // namespace detail

// Micro-averaged precision/recall/F1 over multisets of (surface, type)
// pairs, pooled across the whole dataset. Ids absent from the
// predictions score as empty.
inline Prf span_f1(const PredictionSet& pred, const corpus::Dataset& gold,
                   const MatchOptions& opt = {}) {
  if (gold.utterances.empty())
    throw std::invalid_argument("span_f1: empty gold dataset");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& u : gold.utterances) {
    std::vector<SurfaceType> gold_pairs;
    for (const auto& s : corpus::spans_from_bio(u))
      gold_pairs.emplace_back(s.surface, s.slot_type);
    auto gold_ms = detail::pair_multiset(gold_pairs, opt);

    auto it = pred.by_id.find(u.id);
    auto pred_ms = detail::pair_multiset(
        it == pred.by_id.end() ? std::vector<SurfaceType>{} : it->second, opt);

    for (const auto& [key, count] : pred_ms) {
      auto git = gold_ms.find(key);
      std::size_t matched = git == gold_ms.end() ? 0 : std::min(count, git->second);
      tp += matched;
      fp += count - matched;
    }
    for (const auto& [key, count] : gold_ms) {
      auto pit = pred_ms.find(key);
      std::size_t matched = pit == pred_ms.end() ? 0 : std::min(count, pit->second);
      fn += count - matched;
    }
  }
  Prf out;
  out.precision = (tp + fp) ? static_cast<double>(tp) / (tp + fp) : 0.0;
  out.recall = (tp + fn) ? static_cast<double>(tp) / (tp + fn) : 0.0;
  out.f1 = (out.precision + out.recall) > 0
               ? 2 * out.precision * out.recall / (out.precision + out.recall)
               : 0.0;
  return out;
}

// Suites ordered for reporting: Clean first, then sentence-, character-
// and word-level columns.
struct Suite {
  std::string name;
  std::string level;  // "clean", "sent", "char" or "word"
  corpus::Dataset data;
};

struct SuiteSet {
  std::vector<Suite> suites;

  const Suite* find(std::string_view name) const {
    for (const auto& s : suites)
      if (s.name == name) return &s;
    return nullptr;
  }

  void validate() const {
    if (!find("Clean"))
      throw std::invalid_argument("suite set must include a suite named 'Clean'");
  }

  // Report column order.
  std::vector<const Suite*> ordered() const {
    std::vector<const Suite*> out;
    auto take = [&](std::string_view level) {
      for (const auto& s : suites)
        if (s.level == level) out.push_back(&s);
    };
    take("clean");
    take("sent");
    take("char");
    take("word");
    return out;
  }
};

inline constexpr std::string_view kPerturbedAvg = "Perturbed-Avg";

using PredictFn =
    std::function<std::vector<SurfaceType>(const corpus::Utterance&)>;

struct EvalRow {
  // suite name -> scores, plus the Perturbed-Avg aggregate
  std::vector<std::pair<std::string, Prf>> by_suite;
  double perturbed_avg = 0.0;
  std::size_t predictor_errors = 0;

  double f1_of(std::string_view suite) const {
    for (const auto& [name, prf] : by_suite)
      if (name == suite) return prf.f1;
    throw std::out_of_range("no such suite: " + std::string(suite));
  }
};

// Runs the predictor over every suite. A predictor exception scores
// that example as empty and the run continues.
inline EvalRow evaluate_suite(const PredictFn& predict, const SuiteSet& suites) {
  suites.validate();
  EvalRow row;
  double perturbed_sum = 0.0;
  std::size_t perturbed_count = 0;
  for (const Suite* s : suites.ordered()) {
    PredictionSet preds;
    for (const auto& u : s->data.utterances) {
      try {
        preds.by_id[u.id] = predict(u);
      } catch (const std::exception&) {
        preds.by_id[u.id] = {};
        ++row.predictor_errors;
      }
    }
    Prf prf = span_f1(preds, s->data);
    row.by_suite.emplace_back(s->name, prf);
    if (s->name != "Clean") {
      perturbed_sum += prf.f1;
      ++perturbed_count;
    }
  }
  row.perturbed_avg = perturbed_count ? perturbed_sum / perturbed_count : 0.0;
  return row;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct ReportCell {
  double mean = 0.0;
  double stddev = 0.0;  // sample std; meaningful only when n >= 2
  int n = 0;
};

inline ReportCell aggregate(const std::vector<double>& values) {
  ReportCell c;
  c.n = static_cast<int>(values.size());
  if (values.empty()) return c;
  double sum = 0.0;
  for (double v : values) sum += v;
  c.mean = sum / c.n;
  if (c.n >= 2) {
    double sq = 0.0;
    for (double v : values) sq += (v - c.mean) * (v - c.mean);
    c.stddev = std::sqrt(sq / (c.n - 1));
  }
  return c;
}

struct RobustnessReport {
  std::vector<std::string> columns;  // Clean, ..., Perturbed-Avg
  struct Row {
    std::string name;
    std::vector<ReportCell> cells;
  };
  std::vector<Row> rows;
  std::vector<std::uint64_t> seeds;
  std::string config_digest;

  // F1 cells are reported on the 0-100 scale with two decimals.
  static std::string format_cell(const ReportCell& c) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * c.mean;
    if (c.n >= 2)
      os << "(±" << std::fixed << std::setprecision(2) << 100.0 * c.stddev << ")";
    return os.str();
  }

  std::string to_text() const {
    std::vector<std::size_t> widths;
    widths.push_back(7);  // "Method"
    for (const auto& r : rows) widths[0] = std::max(widths[0], r.name.size());
    for (std::size_t c = 0; c < columns.size(); ++c) {
      std::size_t w = columns[c].size();
      for (const auto& r : rows)
        w = std::max(w, format_cell(r.cells[c]).size());
      widths.push_back(w);
    }
    std::ostringstream os;
    os << "# config_digest=" << config_digest << " seeds=";
    for (std::size_t i = 0; i < seeds.size(); ++i)
      os << (i ? "," : "") << seeds[i];
    os << "\n";
    auto pad = [](const std::string& s, std::size_t w) {
      return s + std::string(w > s.size() ? w - s.size() : 0, ' ');
    };
    os << pad("Method", widths[0]);
    for (std::size_t c = 0; c < columns.size(); ++c)
      os << "  " << pad(columns[c], widths[c + 1]);
    os << "\n";
    for (const auto& r : rows) {
      os << pad(r.name, widths[0]);
      for (std::size_t c = 0; c < r.cells.size(); ++c)
        os << "  " << pad(format_cell(r.cells[c]), widths[c + 1]);
      os << "\n";
    }
    return os.str();
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "# config_digest=" << config_digest << "\n";
    os << "method";
    for (const auto& c : columns) os << "," << c << "," << c << "_std";
    os << "\n";
    os << std::setprecision(17);
    for (const auto& r : rows) {
      os << r.name;
      for (const auto& cell : r.cells)
        os << "," << 100.0 * cell.mean << "," << 100.0 * cell.stddev;
      os << "\n";
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["config_digest"] = config_digest;
    j["seeds"] = seeds;
    j["columns"] = columns;
    nlohmann::json jrows = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json cells = nlohmann::json::array();
      for (const auto& c : r.cells)
        cells.push_back({{"mean", c.mean}, {"stddev", c.stddev}, {"n", c.n}});
      jrows.push_back({{"name", r.name}, {"cells", cells}});
    }
    j["rows"] = jrows;
    return j;
  }
};

// Builds the report from per-seed evaluation rows. Column order comes
// from the suite set; Perturbed-Avg is always the last column.
inline RobustnessReport make_report(
    const SuiteSet& suites,
    const std::vector<std::pair<std::string, std::vector<EvalRow>>>& named_rows,
    const std::vector<std::uint64_t>& seeds, const std::string& digest) {
  RobustnessReport rep;
  rep.seeds = seeds;
  rep.config_digest = digest;
  for (const Suite* s : suites.ordered()) rep.columns.push_back(s->name);
  rep.columns.push_back(std::string(kPerturbedAvg));
  for (const auto& [name, seed_rows] : named_rows) {
    RobustnessReport::Row row;
    row.name = name;
    for (const auto& col : rep.columns) {
      std::vector<double> values;
      for (const auto& er : seed_rows)
        values.push_back(col == kPerturbedAvg ? er.perturbed_avg : er.f1_of(col));
      row.cells.push_back(aggregate(values));
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

inline nlohmann::json predictions_to_json(const PredictionSet& preds) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [id, pairs] : preds.by_id) {
    nlohmann::json jp = nlohmann::json::array();
    for (const auto& [surface, type] : pairs) jp.push_back({surface, type});
    out.push_back({{"id", id}, {"pred", jp}});
  }
  return out;
}

}  // namespace demonsf::evalkit
