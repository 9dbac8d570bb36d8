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

#include <cmath>

#include <catch2/catch_amalgamated.hpp>

#include "demonsf/model.hpp"
#include "testutil.hpp"

using namespace demonsf;
using namespace demonsf::model;

namespace {

Vocab micro_vocab() {
  return Vocab::from_tokens(
      {"<pad>", "<bos>", "<eos>", "<unk>", "a", "b", "c", " "});
}

ModelParams micro_params(const Vocab& vocab, std::uint64_t seed = 7) {
  ModelConfig cfg;
  cfg.d_emb = 5;
  cfg.hidden = 6;
  cfg.max_src_len = 32;
  cfg.max_tgt_len = 16;
  return ModelParams::init(vocab, cfg, seed);
}

std::vector<aux::AuxInstance> toy_instances() {
  return {
      {aux::Task::kMain, "extract: play westbam", "westbam is artist"},
      {aux::Task::kMain, "extract: stop the music", "none"},
      {aux::Task::kMain, "extract: order ramen", "ramen is dish"},
      {aux::Task::kMain, "extract: book in paris", "paris is city"},
      {aux::Task::kMain, "extract: play jazz now", "jazz is genre"},
      {aux::Task::kMain, "extract: cancel that", "none"},
      {aux::Task::kMain, "extract: find tacos", "tacos is dish"},
      {aux::Task::kMain, "extract: queue blues", "blues is genre"},
  };
}

}  // namespace

TEST_CASE("vocab building is deterministic and covers specials") {
  std::vector<std::string> texts = {"play westbam", "fill: a [MASK] b"};
  auto a = Vocab::build(texts);
  auto b = Vocab::build(texts);
  CHECK(a.tokens() == b.tokens());

  // specials encode as single ids
  auto ids = a.encode("fill: x");
  REQUIRE(!ids.empty());
  CHECK(a.token(ids[0]) == "fill:");
  // unseen char becomes <unk>
  auto unk = a.encode("Z");
  REQUIRE(unk.size() == 1);
  CHECK(unk[0] == Vocab::kUnk);
  // mask token is one id
  auto mask = a.encode("[MASK]");
  REQUIRE(mask.size() == 1);
  CHECK(a.token(mask[0]) == "[MASK]");
}

TEST_CASE("vocab longest-match prefers multi-character specials") {
  auto v = Vocab::build({"<char>x <clean>"});
  auto ids = v.encode("<char>");
  REQUIRE(ids.size() == 1);
  CHECK(v.token(ids[0]) == "<char>");
  // decode skips structural tokens only
  CHECK(v.decode(v.encode("<char> x")) == "<char> x");
}

TEST_CASE("ce_loss matches closed forms") {
  SECTION("uniform logits give ln(V)") {
    Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(10, 3);
    CHECK(ce_loss(logits, {1, 5, 9}) ==
          Catch::Approx(std::log(10.0)).epsilon(1e-12));
  }

  SECTION("margin drives loss toward zero monotonically") {
    double prev = 1e9;
    for (double margin : {1.0, 5.0, 10.0}) {
      Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(4, 1);
      logits(2, 0) = margin;
      double loss = ce_loss(logits, {2});
      CHECK(loss < prev);
      prev = loss;
    }
    CHECK(prev < 1e-4);
  }

  SECTION("extended-precision oracle on random logits") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      Eigen::MatrixXd logits(5, 3);
      for (int i = 0; i < logits.size(); ++i)
        logits.data()[i] = (rng.real01() * 2 - 1) * 8;
      std::vector<int> targets = {static_cast<int>(rng.uniform(5)),
                                  static_cast<int>(rng.uniform(5)),
                                  static_cast<int>(rng.uniform(5))};
      // direct formula in long double
      long double total = 0;
      for (int j = 0; j < 3; ++j) {
        long double denom = 0;
        for (int i = 0; i < 5; ++i)
          denom += expl(static_cast<long double>(logits(i, j)));
        total += logl(denom) - static_cast<long double>(logits(targets[j], j));
      }
      double want = static_cast<double>(total / 3);
      CHECK(ce_loss(logits, targets) ==
            Catch::Approx(want).epsilon(1e-9));
    }
  }

  SECTION("PAD positions are excluded and all-PAD errors") {
    Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(10, 2);
    CHECK(ce_loss(logits, {3, Vocab::kPad}) ==
          Catch::Approx(std::log(10.0)).epsilon(1e-12));
    CHECK_THROWS_AS(ce_loss(logits, {Vocab::kPad, Vocab::kPad}),
                    std::invalid_argument);
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  auto vocab = micro_vocab();
  auto params = micro_params(vocab);
  std::vector<int> src = vocab.encode("ab cab");
  src.push_back(Vocab::kEos);
  std::vector<int> tgt = vocab.encode("bca");
  tgt.push_back(Vocab::kEos);

  Tensors grad = params.zeros_like();
  seq_loss_grad(params, src, tgt, grad, 1.0);

  const std::size_t total = params.t.count();
  Rng rng(19);
  const double h = 1e-5;
  int checked = 0;
  int draws = 0;
  while (checked < 25 && draws < 4000) {
    ++draws;
    std::size_t idx = rng.uniform(total);
    double analytic = get_flat(grad, idx);
    add_flat(params.t, idx, h);
    double plus = seq_loss(params, src, tgt);
    add_flat(params.t, idx, -2 * h);
    double minus = seq_loss(params, src, tgt);
    add_flat(params.t, idx, h);
    double fd = (plus - minus) / (2 * h);
    if (std::abs(analytic) < 1e-8 && std::abs(fd) < 1e-8) continue;
    double rel = std::abs(analytic - fd) /
                 std::max({std::abs(analytic), std::abs(fd), 1e-8});
    INFO("coordinate " << idx << " analytic " << analytic << " fd " << fd);
    CHECK(rel < 1e-4);
    ++checked;
  }
  CHECK(checked >= 20);
}

TEST_CASE("one-hot pretrain weights bit-match the single-task step") {
  std::vector<aux::AuxInstance> nr_only;
  std::vector<aux::AuxInstance> all;
  for (int i = 0; i < 6; ++i) {
    aux::AuxInstance inst{aux::Task::kNR,
                          "recover: abc" + std::to_string(i), "abc"};
    nr_only.push_back(inst);
    all.push_back(inst);
  }
  all.push_back({aux::Task::kRM, "fill: a [MASK]", "b"});
  all.push_back({aux::Task::kHD, "discriminate: ab", "<clean>"});

  std::vector<std::string> texts;
  for (const auto& i : all) {
    texts.push_back(i.input_text);
    texts.push_back(i.target_text);
  }
  auto vocab = Vocab::build(texts);
  ModelConfig mcfg;
  mcfg.d_emb = 8;
  mcfg.hidden = 8;
  auto a = ModelParams::init(vocab, mcfg, 5);
  auto b = ModelParams::init(vocab, mcfg, 5);

  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.steps = 3;
  tcfg.eval_every = 3;
  tcfg.learning_rate = 1e-2;
  tcfg.seed = 77;
  tcfg.weights = {1, 0, 0};

  auto ha = train(all, a, vocab, tcfg, TrainMode::kPretrainMultitask);
  auto hb = train(nr_only, b, vocab, tcfg, TrainMode::kPretrainMultitask);

  REQUIRE(ha.history.size() == hb.history.size());
  for (std::size_t i = 0; i < ha.history.size(); ++i)
    CHECK(ha.history[i].total == hb.history[i].total);  // bitwise

  auto va = a.t.views();
  auto vb = b.t.views();
  for (std::size_t i = 0; i < va.size(); ++i)
    for (Eigen::Index j = 0; j < va[i].size(); ++j)
      REQUIRE(va[i][j] == vb[i][j]);  // bitwise
}

TEST_CASE("pretrain requires instances for every weighted task") {
  std::vector<aux::AuxInstance> only_nr = {
      {aux::Task::kNR, "recover: ab", "ab"}};
  auto vocab = Vocab::build({"recover: ab"});
  auto params = micro_params(vocab);
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.steps = 1;
  cfg.eval_every = 1;
  CHECK_THROWS_AS(
      train(only_nr, params, vocab, cfg, TrainMode::kPretrainMultitask),
      TrainError);
}

TEST_CASE("training is deterministic per seed") {
  auto instances = toy_instances();
  std::vector<std::string> texts;
  for (const auto& i : instances) {
    texts.push_back(i.input_text);
    texts.push_back(i.target_text);
  }
  auto vocab = Vocab::build(texts);
  ModelConfig mcfg;
  mcfg.d_emb = 12;
  mcfg.hidden = 12;
  auto a = ModelParams::init(vocab, mcfg, 3);
  auto b = ModelParams::init(vocab, mcfg, 3);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.steps = 30;
  cfg.eval_every = 30;
  cfg.learning_rate = 3e-3;
  cfg.seed = 11;
  auto ha = train(instances, a, vocab, cfg, TrainMode::kFinetuneMain);
  auto hb = train(instances, b, vocab, cfg, TrainMode::kFinetuneMain);
  REQUIRE(ha.history.size() == hb.history.size());
  for (std::size_t i = 0; i < ha.history.size(); ++i)
    CHECK(ha.history[i].total == hb.history[i].total);
}

TEST_CASE("a short run overfits a tiny corpus") {
  auto instances = toy_instances();
  std::vector<std::string> texts;
  for (const auto& i : instances) {
    texts.push_back(i.input_text);
    texts.push_back(i.target_text);
  }
  auto vocab = Vocab::build(texts);
  ModelConfig mcfg;
  mcfg.d_emb = 24;
  mcfg.hidden = 32;
  auto params = ModelParams::init(vocab, mcfg, 1);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.steps = 500;
  cfg.eval_every = 100;
  cfg.learning_rate = 3e-3;
  cfg.seed = 5;
  auto result = train(instances, params, vocab, cfg, TrainMode::kFinetuneMain);
  double initial = result.history.front().total;
  double best = initial;
  for (const auto& e : result.history) best = std::min(best, e.total);
  CHECK(best < 0.1 * initial);
}

TEST_CASE("generate memorizes a single overfit pair and is deterministic") {
  std::vector<aux::AuxInstance> one = {
      {aux::Task::kMain, "extract: play westbam", "westbam is artist"}};
  auto vocab = Vocab::build({"extract: play westbam", "westbam is artist"});
  ModelConfig mcfg;
  mcfg.d_emb = 16;
  mcfg.hidden = 24;
  auto params = ModelParams::init(vocab, mcfg, 2);
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.steps = 250;
  cfg.eval_every = 50;
  cfg.learning_rate = 5e-3;
  cfg.seed = 9;
  train(one, params, vocab, cfg, TrainMode::kFinetuneMain);

  CHECK(generate(params, vocab, "extract: play westbam", 0) == "");
  auto g1 = generate(params, vocab, "extract: play westbam", 64);
  auto g2 = generate(params, vocab, "extract: play westbam", 64);
  CHECK(g1 == g2);
  CHECK(g1 == "westbam is artist");
}

TEST_CASE("loss trend is non-increasing across windows on the overfit corpus") {
  auto instances = toy_instances();
  std::vector<std::string> texts;
  for (const auto& i : instances) {
    texts.push_back(i.input_text);
    texts.push_back(i.target_text);
  }
  auto vocab = Vocab::build(texts);
  ModelConfig mcfg;
  mcfg.d_emb = 24;
  mcfg.hidden = 32;
  auto params = ModelParams::init(vocab, mcfg, 4);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.steps = 400;
  cfg.eval_every = 100;
  cfg.learning_rate = 3e-3;
  cfg.seed = 21;
  auto result = train(instances, params, vocab, cfg, TrainMode::kFinetuneMain);
  auto median_of = [&](std::size_t begin, std::size_t len) {
    std::vector<double> w;
    for (std::size_t i = begin; i < begin + len; ++i)
      w.push_back(result.history[i].total);
    std::sort(w.begin(), w.end());
    return w[w.size() / 2];
  };
  double prev = 1e300;
  for (std::size_t start = 0; start + 50 <= result.history.size(); start += 50) {
    double med = median_of(start, 50);
    CHECK(med <= prev + 1e-9);
    prev = med;
  }
}

TEST_CASE("checkpoints round-trip bitwise") {
  auto dir = testutil::temp_dir("ckpt");
  auto vocab = micro_vocab();
  auto params = micro_params(vocab, 123);
  auto path = dir / "model.json";
  save_checkpoint(path, params, vocab, {{"stage", "test"}});
  auto loaded = load_checkpoint(path);

  CHECK(loaded.vocab.tokens() == vocab.tokens());
  auto va = params.t.views();
  auto vb = loaded.params.t.views();
  REQUIRE(va.size() == vb.size());
  for (std::size_t i = 0; i < va.size(); ++i) {
    REQUIRE(va[i].size() == vb[i].size());
    for (Eigen::Index j = 0; j < va[i].size(); ++j)
      REQUIRE(va[i][j] == vb[i][j]);
  }

  // config echo survives
  CHECK(loaded.params.cfg.d_emb == params.cfg.d_emb);
  CHECK(loaded.params.cfg.hidden == params.cfg.hidden);

  // re-saving produces identical bytes
  auto path2 = dir / "model2.json";
  save_checkpoint(path2, loaded.params, loaded.vocab, {{"stage", "test"}});
  std::ifstream f1(path), f2(path2);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
}

TEST_CASE("checkpoint shape validation") {
  auto dir = testutil::temp_dir("ckpt_bad");
  auto vocab = micro_vocab();
  auto params = micro_params(vocab);
  auto path = dir / "model.json";
  save_checkpoint(path, params, vocab);

  std::ifstream in(path);
  nlohmann::json j = nlohmann::json::parse(in);
  j["params"]["attn_w"]["rows"] = 999;
  auto bad = dir / "bad.json";
  std::ofstream(bad) << j.dump();
  CHECK_THROWS(load_checkpoint(bad));
}
