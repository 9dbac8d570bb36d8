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

// Regenerates the shipped micro corpus under data/micro. The outputs
// are committed; rerunning with the same arguments reproduces them
// byte for byte.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "demonsf/microcorpus.hpp"

namespace fs = std::filesystem;
using namespace demonsf;

int main(int argc, char** argv) {
  CLI::App app{"micro corpus generator"};
  std::string out_dir = "data/micro";
  std::size_t train_count = 500;
  std::size_t test_count = 120;
  std::uint64_t train_seed = 20240901;
  std::uint64_t test_seed = 20240902;
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--train", train_count, "training utterances");
  app.add_option("--test", test_count, "test utterances");
  app.add_option("--train-seed", train_seed, "training generator seed");
  app.add_option("--test-seed", test_seed, "test generator seed");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(fs::path(out_dir) / "lexicons");

  auto train = microcorpus::generate(train_count, train_seed, "m");
  auto test = microcorpus::generate(test_count, test_seed, "t");
  corpus::save_jsonl(train, fs::path(out_dir) / "train.jsonl");
  corpus::save_jsonl(test, fs::path(out_dir) / "test_clean.jsonl");

  {
    std::ofstream schema(fs::path(out_dir) / "schema.txt");
    schema << "# slot types\n";
    for (const auto& t : microcorpus::schema().types) schema << t << "\n";
  }

  auto lex = microcorpus::lexicons();
  {
    std::ofstream out(fs::path(out_dir) / "lexicons" / "homophones.tsv");
    for (const auto& [word, variants] : lex.homophones)
      out << word << "\t" << join(variants, ",") << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "lexicons" / "synonyms.tsv");
    for (const auto& [word, variants] : lex.synonyms)
      out << word << "\t" << join(variants, ",") << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "lexicons" / "fillers.txt");
    for (const auto& w : lex.filler_words) out << w << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "lexicons" / "irrelevant.txt");
    for (const auto& p : lex.irrelevant_phrases) out << join(p, " ") << "\n";
  }

  std::cout << "wrote " << train.size() << " train / " << test.size()
            << " test utterances under " << out_dir << "\n";
  return 0;
}
