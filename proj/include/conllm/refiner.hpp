#pragma once

// Non-causal pre-layer-norm transformer over the three modality tokens of
// each sample. Token rows are laid out sample-major: row = sample * 3 + m.

#include "conllm/autograd.hpp"
#include "conllm/dataio.hpp"
#include "conllm/errors.hpp"
#include "conllm/init.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace conllm {

// softmax(Q K^T / sqrt(d_k)) V on plain tensors; Q, K, V are [t x d_k].
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  require_matrix(q, "attention");
  require_same_shape(q, k, "attention");
  require_matrix(v, "attention");
  if (q.cols() == 0) throw ParameterError("attention: d_k must be positive");
  if (q.rows() == 0) throw ContractError("attention: need at least one token");
  if (v.rows() != q.rows()) throw DimensionError("attention: V has a different token count");
  Tensor s = matmul(q, transpose(k));
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  for (double& x : s.storage()) x *= inv;
  return matmul(softmax_rows(s), v);
}

// Same formula composed from differentiable primitives.
inline Var attention(const Var& q, const Var& k, const Var& v) {
  if (q.value().cols() == 0) throw ParameterError("attention: d_k must be positive");
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.value().cols()));
  return matmul(softmax_rows(scale(matmul(q, transpose(k)), inv)), v);
}

// Attention weights of every (group, head) from one forward pass.
struct AttentionRecord {
  std::vector<Tensor> weights;
};

// Multi-head attention applied independently to consecutive groups of
// `tokens` rows. Q, K, V are [groups*tokens x d_model]; head h uses columns
// [h*d_k, (h+1)*d_k). Head outputs are written back into the same columns,
// which is their concatenation. Dropout (train only) acts on the weights.
inline Var grouped_attention(const Var& q, const Var& k, const Var& v, std::size_t tokens,
                             std::size_t heads, double dropout_p = 0.0, CounterRng* rng = nullptr,
                             bool train = false, AttentionRecord* record = nullptr) {
  const Tensor& qv = q.value();
  require_matrix(qv, "grouped_attention");
  require_same_shape(qv, k.value(), "grouped_attention");
  require_same_shape(qv, v.value(), "grouped_attention");
  const std::size_t rows = qv.rows(), dm = qv.cols();
  if (heads == 0 || dm % heads != 0)
    throw ParameterError("grouped_attention: model width " + std::to_string(dm) +
                         " not divisible by " + std::to_string(heads) + " heads");
  if (tokens == 0 || rows % tokens != 0)
    throw DimensionError("grouped_attention: " + std::to_string(rows) + " rows do not split into groups of " +
                         std::to_string(tokens));
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ParameterError("grouped_attention: bad dropout rate");
  const bool drop = train && dropout_p > 0.0;
  if (drop && !rng) throw ContractError("grouped_attention: dropout needs an rng");

  const std::size_t dk = dm / heads, groups = rows / tokens, t = tokens;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  // Per (group, head): softmax weights P and the dropout-masked weights.
  std::vector<double> probs(groups * heads * t * t), masked(groups * heads * t * t);
  Tensor out = Tensor::matrix(rows, dm);
  std::vector<double> srow(t);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs.data() + (g * heads + h) * t * t;
      double* pm = masked.data() + (g * heads + h) * t * t;
      const std::size_t c0 = h * dk;
      for (std::size_t i = 0; i < t; ++i) {
        const double* qi = &qv(g * t + i, c0);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < t; ++j) {
          const double* kj = &kv(g * t + j, c0);
          double s = 0.0;
          for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
          srow[j] = s * inv;
          mx = std::max(mx, srow[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < t; ++j) z += (p[i * t + j] = std::exp(srow[j] - mx));
        for (std::size_t j = 0; j < t; ++j) {
          p[i * t + j] /= z;
          pm[i * t + j] = p[i * t + j];
          if (drop) pm[i * t + j] *= rng->uniform() >= dropout_p ? 1.0 / (1.0 - dropout_p) : 0.0;
        }
        double* oi = &out(g * t + i, c0);
        for (std::size_t j = 0; j < t; ++j) {
          const double w = pm[i * t + j];
          const double* vj = &vv(g * t + j, c0);
          for (std::size_t c = 0; c < dk; ++c) oi[c] += w * vj[c];
        }
      }
      if (record) record->weights.emplace_back(Shape{t, t}, std::vector<double>(p, p + t * t));
    }

  Tape& tape = *q.tape;
  return tape.push(
      "grouped_attention", {q, k, v}, std::move(out),
      [q, k, v, probs = std::move(probs), masked = std::move(masked), t, heads, dk, groups, inv,
       drop](Tape& tp, const Tensor& gout) {
        const Tensor& qv = q.value();
        const Tensor& kv = k.value();
        const Tensor& vv = v.value();
        Tensor& gq = tp.grad(q);
        Tensor& gk = tp.grad(k);
        Tensor& gv = tp.grad(v);
        std::vector<double> dp(t * t), ds(t * t);
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs.data() + (g * heads + h) * t * t;
            const double* pm = masked.data() + (g * heads + h) * t * t;
            const std::size_t c0 = h * dk;
            for (std::size_t i = 0; i < t; ++i) {
              const double* go = &gout(g * t + i, c0);
              for (std::size_t j = 0; j < t; ++j) {
                const double* vj = &vv(g * t + j, c0);
                double* gvj = &gv(g * t + j, c0);
                double acc = 0.0;
                for (std::size_t c = 0; c < dk; ++c) {
                  acc += go[c] * vj[c];
                  gvj[c] += pm[i * t + j] * go[c];
                }
                // Through the dropout mask: pm = p * mask_scale.
                const double mask = p[i * t + j] > 0.0 ? pm[i * t + j] / p[i * t + j] : 0.0;
                dp[i * t + j] = drop ? acc * mask : acc;
              }
              double rs = 0.0;
              for (std::size_t j = 0; j < t; ++j) rs += dp[i * t + j] * p[i * t + j];
              for (std::size_t j = 0; j < t; ++j) ds[i * t + j] = p[i * t + j] * (dp[i * t + j] - rs) * inv;
            }
            for (std::size_t i = 0; i < t; ++i)
              for (std::size_t j = 0; j < t; ++j) {
                const double w = ds[i * t + j];
                if (w == 0.0) continue;
                const double* qi = &qv(g * t + i, c0);
                const double* kj = &kv(g * t + j, c0);
                double* gqi = &gq(g * t + i, c0);
                double* gkj = &gk(g * t + j, c0);
                for (std::size_t c = 0; c < dk; ++c) {
                  gqi[c] += w * kj[c];
                  gkj[c] += w * qi[c];
                }
              }
          }
      });
}

struct RefinerLayer {
  Parameter ln1_gamma, ln1_beta;
  Parameter wq, wk, wv, wo;  // [d_s x d_s], bias-free
  Parameter ln2_gamma, ln2_beta;
  Parameter ffn1_w, ffn1_b;  // d_s -> ffn_mult * d_s
  Parameter ffn2_w, ffn2_b;  // back to d_s
};

struct RefinerBlock {
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  Parameter type_embedding;  // [3 x d_s], one row per modality
  std::vector<RefinerLayer> layers;

  std::size_t head_dim() const noexcept { return d_model / n_heads; }
};

inline RefinerBlock init_refiner(std::size_t d_s, std::size_t n_heads, std::size_t n_layers,
                                 std::uint64_t seed, std::size_t ffn_mult = 4) {
  if (d_s == 0) throw ParameterError("init_refiner: width must be positive");
  if (n_heads == 0 || d_s % n_heads != 0)
    throw ParameterError("init_refiner: width " + std::to_string(d_s) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  if (ffn_mult == 0) throw ParameterError("init_refiner: ffn expansion must be positive");
  RefinerBlock b;
  b.d_model = d_s;
  b.n_heads = n_heads;
  b.type_embedding = Parameter("refiner.type_embedding", Tensor::matrix(kNumModalities, d_s));
  const std::size_t hidden = ffn_mult * d_s;
  for (std::size_t l = 0; l < n_layers; ++l) {
    CounterRng rng(derive_seed(seed, "init.refiner", l));
    const std::string p = "refiner.layer" + std::to_string(l) + ".";
    RefinerLayer L;
    L.ln1_gamma = Parameter(p + "ln1.gamma", Tensor({d_s}, 1.0));
    L.ln1_beta = Parameter(p + "ln1.beta", Tensor({d_s}));
    L.wq = Parameter(p + "attn.wq", xavier_uniform(d_s, d_s, rng));
    L.wk = Parameter(p + "attn.wk", xavier_uniform(d_s, d_s, rng));
    L.wv = Parameter(p + "attn.wv", xavier_uniform(d_s, d_s, rng));
    L.wo = Parameter(p + "attn.wo", xavier_uniform(d_s, d_s, rng));
    L.ln2_gamma = Parameter(p + "ln2.gamma", Tensor({d_s}, 1.0));
    L.ln2_beta = Parameter(p + "ln2.beta", Tensor({d_s}));
    L.ffn1_w = Parameter(p + "ffn1.weight", xavier_uniform(hidden, d_s, rng));
    L.ffn1_b = Parameter(p + "ffn1.bias", Tensor({hidden}));
    L.ffn2_w = Parameter(p + "ffn2.weight", xavier_uniform(d_s, hidden, rng));
    L.ffn2_b = Parameter(p + "ffn2.bias", Tensor({d_s}));
    b.layers.push_back(std::move(L));
  }
  return b;
}

inline std::vector<Parameter*> parameters(RefinerBlock& b) {
  std::vector<Parameter*> ps{&b.type_embedding};
  for (auto& L : b.layers)
    for (Parameter* p : {&L.ln1_gamma, &L.ln1_beta, &L.wq, &L.wk, &L.wv, &L.wo, &L.ln2_gamma,
                         &L.ln2_beta, &L.ffn1_w, &L.ffn1_b, &L.ffn2_w, &L.ffn2_b})
      ps.push_back(p);
  return ps;
}

struct RefineOptions {
  bool train = false;
  double dropout = 0.0;
  CounterRng* rng = nullptr;
  AttentionRecord* record = nullptr;
};

namespace detail {

inline Var linear_nobias(Tape& tape, const Var& x, Parameter& w) {
  return linear(x, tape.param(w), tape.constant(Tensor({w.value.rows()})));
}

}  // namespace detail

// Refines tokens [n*3 x d_s]. With zero layers this is the identity.
inline Var refine(Tape& tape, RefinerBlock& block, const Var& tokens, const RefineOptions& opt = {}) {
  const Tensor& tv = tokens.value();
  if (tv.rank() != 2 || tv.cols() != block.d_model || tv.rows() % kNumModalities != 0 || tv.rows() == 0)
    throw ContractError("refine: expected [n*3 x " + std::to_string(block.d_model) + "] tokens, got " +
                        shape_str(tv.shape()));
  if (block.layers.empty()) return tokens;
  if (opt.train && opt.dropout > 0.0 && !opt.rng) throw ContractError("refine: dropout needs an rng");

  Var x = add_tiled_rows(tokens, tape.param(block.type_embedding));
  for (RefinerLayer& L : block.layers) {
    Var a = layer_norm(x, tape.param(L.ln1_gamma), tape.param(L.ln1_beta));
    Var q = detail::linear_nobias(tape, a, L.wq);
    Var k = detail::linear_nobias(tape, a, L.wk);
    Var v = detail::linear_nobias(tape, a, L.wv);
    Var att = grouped_attention(q, k, v, kNumModalities, block.n_heads, opt.dropout, opt.rng,
                                opt.train, opt.record);
    x = add(x, detail::linear_nobias(tape, att, L.wo));

    Var b = layer_norm(x, tape.param(L.ln2_gamma), tape.param(L.ln2_beta));
    Var f = relu(linear(b, tape.param(L.ffn1_w), tape.param(L.ffn1_b)));
    f = linear(f, tape.param(L.ffn2_w), tape.param(L.ffn2_b));
    if (opt.train && opt.dropout > 0.0) f = dropout(f, opt.dropout, *opt.rng, true);
    x = add(x, f);
  }
  return x;
}

}  // namespace conllm
