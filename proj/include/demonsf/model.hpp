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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "demonsf/auxtask.hpp"
#include "demonsf/rng.hpp"
#include "demonsf/util.hpp"

namespace demonsf::model {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

// Character-level vocabulary plus multi-character special tokens (mask,
// task prefixes, discrimination classes). Encoding matches specials
// greedily (longest first) before falling back to single characters.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  static const std::vector<std::string>& standard_specials() {
    static const std::vector<std::string> s = {
        "<pad>", "<bos>", "<eos>", "<unk>",
        std::string(aux::kMaskToken),
        "<clean>", "<char>", "<word>", "<sent>",
        "recover:", "fill:", "discriminate:", "extract:"};
    return s;
  }

  // Specials plus every character observed in the texts, sorted by
  // codepoint. Deterministic for a given corpus.
  static Vocab build(const std::vector<std::string>& texts) {
    if (texts.empty()) throw std::invalid_argument("build_vocab: no texts");
    std::set<unsigned char> chars;
    for (const auto& t : texts)
      for (unsigned char c : t) chars.insert(c);
    std::vector<std::string> tokens = standard_specials();
    for (unsigned char c : chars) tokens.emplace_back(1, static_cast<char>(c));
    return Vocab(std::move(tokens));
  }

  // For micro models in tests: caller supplies the full token list.
  // The four core specials must occupy their fixed slots.
  static Vocab from_tokens(std::vector<std::string> tokens) {
    return Vocab(std::move(tokens));
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  const std::vector<std::string>& tokens() const { return tokens_; }

  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    std::size_t i = 0;
    while (i < text.size()) {
      bool matched = false;
      for (const auto& [len, specials] : specials_by_length_) {
        if (i + len > text.size()) continue;
        auto it = specials.find(std::string(text.substr(i, len)));
        if (it != specials.end()) {
          out.push_back(it->second);
          i += len;
          matched = true;
          break;
        }
      }
      if (matched) continue;
      auto it = index_.find(std::string(1, text[i]));
      out.push_back(it == index_.end() ? kUnk : it->second);
      ++i;
    }
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kPad || id == kBos || id == kEos) continue;
      out += token(id);
    }
    return out;
  }

 private:
  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 4 || tokens_[0] != "<pad>" || tokens_[1] != "<bos>" ||
        tokens_[2] != "<eos>" || tokens_[3] != "<unk>")
      throw std::invalid_argument("vocab must start with <pad>,<bos>,<eos>,<unk>");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
        throw std::invalid_argument("vocab: duplicate token '" + tokens_[i] + "'");
      if (tokens_[i].size() > 1)
        specials_by_length_[tokens_[i].size()][tokens_[i]] =
            static_cast<int>(i);
    }
  }

  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
  // length -> token -> id, longest first
  std::map<std::size_t, std::map<std::string, int>, std::greater<>> specials_by_length_;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ModelConfig {
  int d_emb = 64;
  int hidden = 128;
  int max_src_len = 320;  // source positions before the closing <eos>
  int max_tgt_len = 96;
};

// GRU gate blocks are stacked [update; reset; candidate] along rows.
struct Tensors {
  Eigen::MatrixXd emb;     // d_emb x V, one column per token
  Eigen::MatrixXd enc_w;   // 3H x d_emb
  Eigen::MatrixXd enc_u;   // 3H x H
  Eigen::VectorXd enc_bi;  // 3H
  Eigen::VectorXd enc_bh;  // 3H
  Eigen::MatrixXd dec_w;
  Eigen::MatrixXd dec_u;
  Eigen::VectorXd dec_bi;
  Eigen::VectorXd dec_bh;
  Eigen::MatrixXd attn_w;  // H x H
  Eigen::MatrixXd comb_w;  // H x 2H
  Eigen::VectorXd comb_b;  // H
  Eigen::MatrixXd out_w;   // V x H
  Eigen::VectorXd out_b;   // V

  template <typename F>
  void for_each(F&& f) {
    f("emb", emb); f("enc_w", enc_w); f("enc_u", enc_u);
    f("enc_bi", enc_bi); f("enc_bh", enc_bh);
    f("dec_w", dec_w); f("dec_u", dec_u);
    f("dec_bi", dec_bi); f("dec_bh", dec_bh);
    f("attn_w", attn_w); f("comb_w", comb_w); f("comb_b", comb_b);
    f("out_w", out_w); f("out_b", out_b);
  }

  template <typename F>
  void for_each(F&& f) const {
    const_cast<Tensors*>(this)->for_each([&](const char* name, auto& m) {
      f(name, std::as_const(m));
    });
  }

  void setZero() {
    for_each([](const char*, auto& m) { m.setZero(); });
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&](const char*, const auto& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  // Flat views over each tensor's storage, in for_each order.
  std::vector<Eigen::Map<Eigen::VectorXd>> views() {
    std::vector<Eigen::Map<Eigen::VectorXd>> v;
    for_each([&](const char*, auto& m) {
      v.emplace_back(m.data(), m.size());
    });
    return v;
  }

  std::vector<Eigen::Map<const Eigen::VectorXd>> views() const {
    std::vector<Eigen::Map<const Eigen::VectorXd>> v;
    for_each([&](const char*, const auto& m) {
      v.emplace_back(m.data(), m.size());
    });
    return v;
  }
};

struct ModelParams {
  ModelConfig cfg;
  int vocab_size = 0;
  Tensors t;

  static ModelParams init(const Vocab& vocab, const ModelConfig& cfg,
                          std::uint64_t seed) {
    ModelParams p;
    p.cfg = cfg;
    p.vocab_size = vocab.size();
    const int V = vocab.size(), E = cfg.d_emb, H = cfg.hidden;
    p.t.emb.resize(E, V);
    p.t.enc_w.resize(3 * H, E);
    p.t.enc_u.resize(3 * H, H);
    p.t.enc_bi.resize(3 * H);
    p.t.enc_bh.resize(3 * H);
    p.t.dec_w.resize(3 * H, E);
    p.t.dec_u.resize(3 * H, H);
    p.t.dec_bi.resize(3 * H);
    p.t.dec_bh.resize(3 * H);
    p.t.attn_w.resize(H, H);
    p.t.comb_w.resize(H, 2 * H);
    p.t.comb_b.resize(H);
    p.t.out_w.resize(V, H);
    p.t.out_b.resize(V);
    // uniform(-0.08, 0.08), filled in a fixed traversal order
    Rng rng(derive_seed(seed, "param-init"));
    p.t.for_each([&](const char*, auto& m) {
      double* data = m.data();
      for (Eigen::Index i = 0; i < m.size(); ++i)
        data[i] = (rng.real01() * 2.0 - 1.0) * 0.08;
    });
    return p;
  }

  Tensors zeros_like() const {
    Tensors g = t;
    g.setZero();
    return g;
  }
};

// Flat-coordinate access across all tensors, used by the finite-difference
// checks. Order follows Tensors::for_each, column-major within each tensor.
inline double get_flat(const Tensors& t, std::size_t idx) {
  double out = 0.0;
  bool found = false;
  t.for_each([&](const char*, const auto& m) {
    if (found) return;
    auto n = static_cast<std::size_t>(m.size());
    if (idx < n) {
      out = m.data()[idx];
      found = true;
    } else {
      idx -= n;
    }
  });
  if (!found) throw std::out_of_range("get_flat: index out of range");
  return out;
}

inline void add_flat(Tensors& t, std::size_t idx, double delta) {
  bool found = false;
  t.for_each([&](const char*, auto& m) {
    if (found) return;
    auto n = static_cast<std::size_t>(m.size());
    if (idx < n) {
      m.data()[idx] += delta;
      found = true;
    } else {
      idx -= n;
    }
  });
  if (!found) throw std::out_of_range("add_flat: index out of range");
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean token-level cross-entropy over non-PAD positions. logits is
// vocab x positions; targets holds one token id per position.
inline double ce_loss(const Eigen::MatrixXd& logits,
                      const std::vector<int>& targets, int pad_id = Vocab::kPad) {
  if (static_cast<std::size_t>(logits.cols()) != targets.size())
    throw std::invalid_argument("ce_loss: logits/target length mismatch");
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t j = 0; j < targets.size(); ++j) {
    if (targets[j] == pad_id) continue;
    if (targets[j] < 0 || targets[j] >= logits.rows())
      throw std::invalid_argument("ce_loss: target id out of vocabulary");
    const auto col = logits.col(static_cast<Eigen::Index>(j));
    double m = col.maxCoeff();
    double lse = m + std::log((col.array() - m).exp().sum());
    total += lse - col(targets[j]);
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("ce_loss: no non-PAD targets");
  return total / static_cast<double>(counted);
}

// ---------------------------------------------------------------------------
// Sequence-to-sequence forward/backward
// ---------------------------------------------------------------------------

namespace detail {

inline Eigen::ArrayXd sigmoid(const Eigen::ArrayXd& x) {
  return 1.0 / (1.0 + (-x).exp());
}

struct GruCache {
  Eigen::MatrixXd z, r, n, gh_n;  // H x steps
  Eigen::MatrixXd h;              // H x (steps + 1), column 0 = initial state
};

// One GRU pass over a token sequence. Returns caches needed for BPTT.
inline GruCache gru_forward(const Eigen::MatrixXd& emb, const Eigen::MatrixXd& w,
                            const Eigen::MatrixXd& u, const Eigen::VectorXd& bi,
                            const Eigen::VectorXd& bh,
                            const std::vector<int>& tokens,
                            const Eigen::VectorXd& h0) {
  const int H = static_cast<int>(u.cols());
  const int T = static_cast<int>(tokens.size());
  GruCache c;
  c.z.resize(H, T);
  c.r.resize(H, T);
  c.n.resize(H, T);
  c.gh_n.resize(H, T);
  c.h.resize(H, T + 1);
  c.h.col(0) = h0;
  for (int t = 0; t < T; ++t) {
    Eigen::VectorXd gi = w * emb.col(tokens[static_cast<std::size_t>(t)]) + bi;
    Eigen::VectorXd gh = u * c.h.col(t) + bh;
    Eigen::ArrayXd z = sigmoid(gi.segment(0, H).array() + gh.segment(0, H).array());
    Eigen::ArrayXd r =
        sigmoid(gi.segment(H, H).array() + gh.segment(H, H).array());
    Eigen::ArrayXd n =
        (gi.segment(2 * H, H).array() + r * gh.segment(2 * H, H).array()).tanh();
    c.z.col(t) = z.matrix();
    c.r.col(t) = r.matrix();
    c.n.col(t) = n.matrix();
    c.gh_n.col(t) = gh.segment(2 * H, H);
    c.h.col(t + 1) =
        ((1.0 - z) * n + z * c.h.col(t).array()).matrix();
  }
  return c;
}

// Backward through one GRU step. dh_out is the gradient arriving at
// h_{t+1}; returns the gradient for h_t and accumulates the rest.
struct GruStepGrads {
  Eigen::VectorXd dh_prev;
  Eigen::VectorXd dx;
};

inline GruStepGrads gru_backward_step(
    const Eigen::MatrixXd& emb, const Eigen::MatrixXd& w,
    const Eigen::MatrixXd& u, const GruCache& c, int t, int token,
    const Eigen::VectorXd& dh_out, Eigen::MatrixXd& dw, Eigen::MatrixXd& du,
    Eigen::VectorXd& dbi, Eigen::VectorXd& dbh) {
  const int H = static_cast<int>(u.cols());
  Eigen::ArrayXd z = c.z.col(t).array();
  Eigen::ArrayXd r = c.r.col(t).array();
  Eigen::ArrayXd n = c.n.col(t).array();
  Eigen::ArrayXd h_prev = c.h.col(t).array();
  Eigen::ArrayXd dho = dh_out.array();

  Eigen::ArrayXd dn = dho * (1.0 - z);
  Eigen::ArrayXd dz = dho * (h_prev - n);
  Eigen::ArrayXd dh_prev = dho * z;

  Eigen::ArrayXd dpre_n = dn * (1.0 - n * n);
  Eigen::ArrayXd dr = dpre_n * c.gh_n.col(t).array();
  Eigen::ArrayXd dgh_n = dpre_n * r;
  Eigen::ArrayXd dpre_z = dz * z * (1.0 - z);
  Eigen::ArrayXd dpre_r = dr * r * (1.0 - r);

  Eigen::VectorXd dgi(3 * H), dgh(3 * H);
  dgi.segment(0, H) = dpre_z.matrix();
  dgi.segment(H, H) = dpre_r.matrix();
  dgi.segment(2 * H, H) = dpre_n.matrix();
  dgh.segment(0, H) = dpre_z.matrix();
  dgh.segment(H, H) = dpre_r.matrix();
  dgh.segment(2 * H, H) = dgh_n.matrix();

  dw.noalias() += dgi * emb.col(token).transpose();
  du.noalias() += dgh * c.h.col(t).transpose();
  dbi += dgi;
  dbh += dgh;

  GruStepGrads g;
  g.dh_prev = dh_prev.matrix();
  g.dh_prev.noalias() += u.transpose() * dgh;
  g.dx = w.transpose() * dgi;
  return g;
}

}  // namespace detail

struct SeqForward {
  double loss = 0.0;
  // caches for backward
  detail::GruCache enc, dec;
  Eigen::MatrixXd g;       // attn_w * enc states, H x T
  Eigen::MatrixXd alpha;   // T x U
  Eigen::MatrixXd ctx;     // H x U
  Eigen::MatrixXd comb;    // H x U
  Eigen::MatrixXd probs;   // V x U
  std::vector<int> dec_in;
};

// Teacher-forced forward pass; loss is the positional mean NLL of the
// target sequence. src and tgt must be non-empty (callers append <eos>).
inline SeqForward seq_forward(const ModelParams& p, const std::vector<int>& src,
                              const std::vector<int>& tgt) {
  if (src.empty() || tgt.empty())
    throw std::invalid_argument("seq_forward: empty sequence");
  const int H = p.cfg.hidden;
  const int T = static_cast<int>(src.size());
  const int U = static_cast<int>(tgt.size());

  SeqForward f;
  f.enc = detail::gru_forward(p.t.emb, p.t.enc_w, p.t.enc_u, p.t.enc_bi,
                              p.t.enc_bh, src, Eigen::VectorXd::Zero(H));
  f.dec_in.resize(static_cast<std::size_t>(U));
  f.dec_in[0] = Vocab::kBos;
  for (int u = 1; u < U; ++u) f.dec_in[static_cast<std::size_t>(u)] = tgt[static_cast<std::size_t>(u - 1)];
  f.dec = detail::gru_forward(p.t.emb, p.t.dec_w, p.t.dec_u, p.t.dec_bi,
                              p.t.dec_bh, f.dec_in, f.enc.h.col(T));

  const auto enc_states = f.enc.h.rightCols(T);  // H x T
  f.g.noalias() = p.t.attn_w * enc_states;
  f.alpha.resize(T, U);
  f.ctx.resize(H, U);
  f.comb.resize(H, U);
  f.probs.resize(p.vocab_size, U);

  double total = 0.0;
  for (int u = 0; u < U; ++u) {
    Eigen::VectorXd d = f.dec.h.col(u + 1);
    Eigen::VectorXd scores = f.g.transpose() * d;  // T
    double m = scores.maxCoeff();
    Eigen::ArrayXd a = (scores.array() - m).exp();
    a /= a.sum();
    f.alpha.col(u) = a.matrix();
    f.ctx.col(u).noalias() = enc_states * f.alpha.col(u);
    Eigen::VectorXd cat(2 * H);
    cat << d, f.ctx.col(u);
    f.comb.col(u) = ((p.t.comb_w * cat + p.t.comb_b).array().tanh()).matrix();
    Eigen::VectorXd logits = p.t.out_w * f.comb.col(u) + p.t.out_b;
    double lm = logits.maxCoeff();
    Eigen::ArrayXd e = (logits.array() - lm).exp();
    double sum = e.sum();
    f.probs.col(u) = (e / sum).matrix();
    total += lm + std::log(sum) - logits(tgt[static_cast<std::size_t>(u)]);
  }
  f.loss = total / U;
  return f;
}

inline double seq_loss(const ModelParams& p, const std::vector<int>& src,
                       const std::vector<int>& tgt) {
  return seq_forward(p, src, tgt).loss;
}

// Accumulates scale * dLoss/dParams into grad and returns the loss.
inline double seq_loss_grad(const ModelParams& p, const std::vector<int>& src,
                            const std::vector<int>& tgt, Tensors& grad,
                            double scale) {
  SeqForward f = seq_forward(p, src, tgt);
  const int H = p.cfg.hidden;
  const int T = static_cast<int>(src.size());
  const int U = static_cast<int>(tgt.size());
  const auto enc_states = f.enc.h.rightCols(T);

  Eigen::MatrixXd denc = Eigen::MatrixXd::Zero(H, T);  // grads into enc states
  Eigen::MatrixXd dG = Eigen::MatrixXd::Zero(H, T);    // grads into g columns
  Eigen::VectorXd dd_carry = Eigen::VectorXd::Zero(H);

  for (int u = U - 1; u >= 0; --u) {
    // output layer
    Eigen::VectorXd dlogits = f.probs.col(u) * scale / U;
    dlogits(tgt[static_cast<std::size_t>(u)]) -= scale / U;
    grad.out_w.noalias() += dlogits * f.comb.col(u).transpose();
    grad.out_b += dlogits;
    Eigen::VectorXd dcomb = p.t.out_w.transpose() * dlogits;
    Eigen::ArrayXd dpre =
        dcomb.array() * (1.0 - f.comb.col(u).array().square());
    Eigen::VectorXd d = f.dec.h.col(u + 1);
    Eigen::VectorXd cat(2 * H);
    cat << d, f.ctx.col(u);
    grad.comb_w.noalias() += dpre.matrix() * cat.transpose();
    grad.comb_b += dpre.matrix();
    Eigen::VectorXd dcat = p.t.comb_w.transpose() * dpre.matrix();
    Eigen::VectorXd dd = dcat.segment(0, H);
    Eigen::VectorXd dctx = dcat.segment(H, H);

    // context: ctx = enc_states * alpha
    Eigen::VectorXd dalpha = enc_states.transpose() * dctx;
    denc.noalias() += dctx * f.alpha.col(u).transpose();

    // softmax over scores
    const auto a = f.alpha.col(u).array();
    double dot = (a * dalpha.array()).sum();
    Eigen::VectorXd dscores = (a * (dalpha.array() - dot)).matrix();

    // scores(t) = d . g_t
    dd.noalias() += f.g * dscores;
    dG.noalias() += d * dscores.transpose();

    // decoder GRU step
    dd += dd_carry;
    auto g = detail::gru_backward_step(p.t.emb, p.t.dec_w, p.t.dec_u, f.dec, u,
                                       f.dec_in[static_cast<std::size_t>(u)], dd,
                                       grad.dec_w, grad.dec_u, grad.dec_bi,
                                       grad.dec_bh);
    grad.emb.col(f.dec_in[static_cast<std::size_t>(u)]) += g.dx;
    dd_carry = g.dh_prev;
  }

  // attention projection and its path into the encoder states
  grad.attn_w.noalias() += dG * enc_states.transpose();
  denc.noalias() += p.t.attn_w.transpose() * dG;

  // decoder initial state was the last encoder state
  denc.col(T - 1) += dd_carry;

  Eigen::VectorXd de_carry = Eigen::VectorXd::Zero(H);
  for (int t = T - 1; t >= 0; --t) {
    Eigen::VectorXd dh = denc.col(t) + de_carry;
    auto g = detail::gru_backward_step(p.t.emb, p.t.enc_w, p.t.enc_u, f.enc, t,
                                       src[static_cast<std::size_t>(t)], dh,
                                       grad.enc_w, grad.enc_u, grad.enc_bi,
                                       grad.enc_bh);
    grad.emb.col(src[static_cast<std::size_t>(t)]) += g.dx;
    de_carry = g.dh_prev;
  }
  return f.loss;
}

// Greedy argmax decoding from <bos> until <eos> or max_len tokens.
inline std::string generate(const ModelParams& p, const Vocab& vocab,
                            std::string_view input, int max_len) {
  if (max_len < 0) throw std::invalid_argument("generate: max_len < 0");
  if (max_len == 0) return "";
  const int H = p.cfg.hidden;
  std::vector<int> src = vocab.encode(input);
  if (static_cast<int>(src.size()) > p.cfg.max_src_len)
    src.resize(static_cast<std::size_t>(p.cfg.max_src_len));
  src.push_back(Vocab::kEos);

  auto enc = detail::gru_forward(p.t.emb, p.t.enc_w, p.t.enc_u, p.t.enc_bi,
                                 p.t.enc_bh, src, Eigen::VectorXd::Zero(H));
  const int T = static_cast<int>(src.size());
  const auto enc_states = enc.h.rightCols(T);
  Eigen::MatrixXd g = p.t.attn_w * enc_states;

  std::vector<int> out_tokens;
  Eigen::VectorXd d = enc.h.col(T);
  int prev = Vocab::kBos;
  for (int step = 0; step < max_len; ++step) {
    std::vector<int> one = {prev};
    auto cell = detail::gru_forward(p.t.emb, p.t.dec_w, p.t.dec_u, p.t.dec_bi,
                                    p.t.dec_bh, one, d);
    d = cell.h.col(1);
    Eigen::VectorXd scores = g.transpose() * d;
    double m = scores.maxCoeff();
    Eigen::ArrayXd a = (scores.array() - m).exp();
    a /= a.sum();
    Eigen::VectorXd ctx = enc_states * a.matrix();
    Eigen::VectorXd cat(2 * H);
    cat << d, ctx;
    Eigen::VectorXd comb = ((p.t.comb_w * cat + p.t.comb_b).array().tanh()).matrix();
    Eigen::VectorXd logits = p.t.out_w * comb + p.t.out_b;
    int best = 0;
    logits.maxCoeff(&best);
    if (best == Vocab::kEos) break;
    out_tokens.push_back(best);
    prev = best;
  }
  return vocab.decode(out_tokens);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Optimizer { kSgd, kAdaptiveMoment };

enum class TrainMode { kPretrainMultitask, kFinetuneMain };

struct TrainConfig {
  int batch_size = 8;
  int steps = 2000;
  double learning_rate = 3e-3;
  int eval_every = 200;
  std::uint64_t seed = 0;
  aux::LossWeights weights;
  Optimizer optimizer = Optimizer::kAdaptiveMoment;
  double clip_norm = 5.0;

  void validate() const {
    if (batch_size <= 0 || steps <= 0 || learning_rate <= 0 || eval_every <= 0)
      throw std::invalid_argument("train config: positive values required");
    if (eval_every > steps)
      throw std::invalid_argument("train config: eval_every > steps");
    weights.validate();
  }
};

struct StepLoss {
  int step = 0;
  double total = 0.0;
  double nr = 0.0, rm = 0.0, hd = 0.0;
};

struct TrainResult {
  std::vector<StepLoss> history;
};

namespace detail {

struct EncodedInstance {
  std::vector<int> src;
  std::vector<int> tgt;
};

inline EncodedInstance encode_instance(const Vocab& vocab, const ModelConfig& cfg,
                                       const aux::AuxInstance& inst) {
  EncodedInstance e;
  e.src = vocab.encode(inst.input_text);
  if (static_cast<int>(e.src.size()) > cfg.max_src_len)
    e.src.resize(static_cast<std::size_t>(cfg.max_src_len));
  e.src.push_back(Vocab::kEos);
  e.tgt = vocab.encode(inst.target_text);
  if (static_cast<int>(e.tgt.size()) > cfg.max_tgt_len - 1)
    e.tgt.resize(static_cast<std::size_t>(cfg.max_tgt_len - 1));
  e.tgt.push_back(Vocab::kEos);
  return e;
}

// Reshuffling batch queue; every epoch is a fresh seeded permutation.
class BatchQueue {
 public:
  BatchQueue(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    rng_.shuffle(order_);
  }

  std::size_t next() {
    if (pos_ == order_.size()) {
      rng_.shuffle(order_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline void clip_grad(Tensors& g, double max_norm) {
  double sq = 0.0;
  g.for_each([&](const char*, const auto& m) { sq += m.squaredNorm(); });
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    g.for_each([&](const char*, auto& m) { m *= s; });
  }
}

class AdamState {
 public:
  explicit AdamState(const ModelParams& p)
      : m_(p.zeros_like()), v_(p.zeros_like()) {}

  void update(Tensors& params, const Tensors& grad, double lr) {
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double c1 = 1.0 - std::pow(b1, t_);
    double c2 = 1.0 - std::pow(b2, t_);
    auto pv = params.views();
    auto gv = grad.views();
    auto mv = m_.views();
    auto vv = v_.views();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mv[i] = b1 * mv[i] + (1.0 - b1) * gv[i];
      vv[i] = (b2 * vv[i].array() + (1.0 - b2) * gv[i].array().square()).matrix();
      pv[i] -= (lr * (mv[i].array() / c1) / ((vv[i].array() / c2).sqrt() + eps))
                   .matrix();
    }
  }

 private:
  Tensors m_, v_;
  long t_ = 0;
};

}  // namespace detail

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EvalCallback = std::function<void(int step, const ModelParams&)>;

// Teacher-forced training. Pretraining interleaves the three noisy
// tasks round-robin each step and combines their batch losses with the
// configured weights; zero-weight tasks are skipped entirely so their
// random streams never advance. Fine-tuning runs the main task alone.
// Deterministic given the seed.
inline TrainResult train(const std::vector<aux::AuxInstance>& instances,
                         ModelParams& params, const Vocab& vocab,
                         const TrainConfig& cfg, TrainMode mode,
                         const EvalCallback& on_eval = nullptr) {
  cfg.validate();
  using aux::Task;

  std::map<Task, std::vector<detail::EncodedInstance>> encoded;
  for (const auto& inst : instances)
    encoded[inst.task].push_back(
        detail::encode_instance(vocab, params.cfg, inst));

  std::vector<std::pair<Task, double>> active;
  if (mode == TrainMode::kPretrainMultitask) {
    const std::pair<Task, double> all[] = {{Task::kNR, cfg.weights.alpha},
                                           {Task::kRM, cfg.weights.beta},
                                           {Task::kHD, cfg.weights.gamma}};
    for (const auto& [task, w] : all) {
      if (w == 0.0) continue;
      if (!encoded.count(task) || encoded[task].empty())
        throw TrainError("pretrain: no instances for weighted task " +
                         std::string(aux::task_name(task)));
      active.emplace_back(task, w);
    }
    if (active.empty()) throw TrainError("pretrain: all task weights are zero");
  } else {
    if (!encoded.count(Task::kMain) || encoded[Task::kMain].empty())
      throw TrainError("finetune: no main-task instances");
    active.emplace_back(Task::kMain, 1.0);
  }

  std::map<Task, detail::BatchQueue> queues;
  for (const auto& [task, _] : active)
    queues.emplace(task,
                   detail::BatchQueue(encoded[task].size(),
                                      derive_seed(cfg.seed, std::string("task:") +
                                                                std::string(aux::task_name(task)))));

  detail::AdamState adam(params);
  Tensors grad = params.zeros_like();
  TrainResult result;
  result.history.reserve(static_cast<std::size_t>(cfg.steps));

  for (int step = 1; step <= cfg.steps; ++step) {
    grad.setZero();
    StepLoss entry;
    entry.step = step;
    double l_nr = 0, l_rm = 0, l_hd = 0, l_main = 0;
    for (const auto& [task, w] : active) {
      auto& queue = queues.at(task);
      const auto& data = encoded[task];
      double batch_loss = 0.0;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const auto& inst = data[queue.next()];
        batch_loss += seq_loss_grad(params, inst.src, inst.tgt, grad,
                                    w / cfg.batch_size);
      }
      batch_loss /= cfg.batch_size;
      if (!std::isfinite(batch_loss))
        throw TrainError("non-finite loss at step " + std::to_string(step) +
                         " on task " + std::string(aux::task_name(task)));
      switch (task) {
        case Task::kNR: l_nr = batch_loss; break;
        case Task::kRM: l_rm = batch_loss; break;
        case Task::kHD: l_hd = batch_loss; break;
        case Task::kMain: l_main = batch_loss; break;
      }
    }
    entry.nr = l_nr;
    entry.rm = l_rm;
    entry.hd = l_hd;
    entry.total = mode == TrainMode::kPretrainMultitask
                      ? aux::joint_loss(l_nr, l_rm, l_hd, cfg.weights)
                      : l_main;

    detail::clip_grad(grad, cfg.clip_norm);
    if (cfg.optimizer == Optimizer::kAdaptiveMoment) {
      adam.update(params.t, grad, cfg.learning_rate);
    } else {
      auto pv = params.t.views();
      auto gv = grad.views();
      for (std::size_t i = 0; i < pv.size(); ++i)
        pv[i] -= cfg.learning_rate * gv[i];
    }
    result.history.push_back(entry);
    if (on_eval && step % cfg.eval_every == 0) on_eval(step, params);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_to_json(const ModelParams& p, const Vocab& vocab,
                                         const nlohmann::json& extra = nullptr) {
  nlohmann::json j;
  j["format"] = "demonsf-checkpoint";
  j["version"] = kCheckpointVersion;
  j["model"] = {{"d_emb", p.cfg.d_emb},
                {"hidden", p.cfg.hidden},
                {"max_src_len", p.cfg.max_src_len},
                {"max_tgt_len", p.cfg.max_tgt_len}};
  j["vocab"] = vocab.tokens();
  nlohmann::json params = nlohmann::json::object();
  p.t.for_each([&](const char* name, const auto& m) {
    std::vector<double> data(m.data(), m.data() + m.size());  // column-major
    params[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
  });
  j["params"] = params;
  if (!extra.is_null()) j["extra"] = extra;
  return j;
}

inline void save_checkpoint(const std::filesystem::path& path,
                            const ModelParams& p, const Vocab& vocab,
                            const nlohmann::json& extra = nullptr) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out << checkpoint_to_json(p, vocab, extra).dump() << '\n';
}

struct Checkpoint {
  ModelParams params;
  Vocab vocab;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("format", "") != "demonsf-checkpoint" ||
      j.value("version", 0) != kCheckpointVersion)
    throw std::runtime_error("unrecognized checkpoint format: " + path.string());
  ModelConfig cfg;
  cfg.d_emb = j.at("model").at("d_emb").get<int>();
  cfg.hidden = j.at("model").at("hidden").get<int>();
  cfg.max_src_len = j.at("model").at("max_src_len").get<int>();
  cfg.max_tgt_len = j.at("model").at("max_tgt_len").get<int>();
  Vocab vocab = Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
  ModelParams p = ModelParams::init(vocab, cfg, 0);
  p.t.for_each([&](const char* name, auto& m) {
    const auto& entry = j.at("params").at(name);
    auto rows = entry.at("rows").get<Eigen::Index>();
    auto cols = entry.at("cols").get<Eigen::Index>();
    if (rows != m.rows() || cols != m.cols())
      throw std::runtime_error(std::string("checkpoint shape mismatch for ") +
                               name);
    auto data = entry.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != m.size())
      throw std::runtime_error(std::string("checkpoint size mismatch for ") +
                               name);
    std::copy(data.begin(), data.end(), m.data());
  });
  return Checkpoint{std::move(p), std::move(vocab)};
}

}  // namespace demonsf::model
