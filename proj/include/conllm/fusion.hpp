#pragma once

// Fusion of the refined modality tokens, the sigmoid classification head,
// and the classification / total losses.

#include "conllm/autograd.hpp"
#include "conllm/dataio.hpp"
#include "conllm/errors.hpp"
#include "conllm/init.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace conllm {

enum class FusionKind { concat, mean, weighted };

struct FusionStrategy {
  FusionKind kind = FusionKind::concat;
  std::array<double, kNumModalities> weights{1.0 / 3, 1.0 / 3, 1.0 / 3};  // weighted only

  static FusionStrategy concat() { return {}; }
  static FusionStrategy mean() { return {FusionKind::mean, {1.0 / 3, 1.0 / 3, 1.0 / 3}}; }
  static FusionStrategy weighted(double wa, double wv, double wav) {
    return {FusionKind::weighted, {wa, wv, wav}};
  }
};

inline std::string_view to_string(FusionKind k) {
  switch (k) {
    case FusionKind::concat: return "concat";
    case FusionKind::mean: return "mean";
    case FusionKind::weighted: return "weighted";
  }
  return "?";
}

inline void validate(const FusionStrategy& f) {
  if (f.kind != FusionKind::weighted) return;
  double total = 0.0;
  for (double w : f.weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ParameterError("fusion: weights must be finite and >= 0");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ParameterError("fusion: weights must sum to 1");
}

inline std::size_t fused_width(const FusionStrategy& f, std::size_t d_s) {
  return f.kind == FusionKind::concat ? kNumModalities * d_s : d_s;
}

// Refined tokens [n*3 x d_s] -> fused rows [n x fused_width].
inline Var fuse(const Var& refined, const FusionStrategy& f) {
  validate(f);
  const Tensor& r = refined.value();
  if (r.rank() != 2 || r.rows() % kNumModalities != 0 || r.rows() == 0)
    throw ContractError("fuse: expected [n*3 x d] tokens, got " + shape_str(r.shape()));
  const std::size_t n = r.rows() / kNumModalities;
  switch (f.kind) {
    case FusionKind::concat:
      // Rows are sample-major, so the row-major reshape is exactly [h_a | h_v | h_av].
      return reshape(refined, {n, kNumModalities * r.cols()});
    case FusionKind::mean:
      return group_weighted_sum(refined, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    case FusionKind::weighted:
      return group_weighted_sum(refined, {f.weights.begin(), f.weights.end()});
  }
  throw ParameterError("fuse: unknown strategy");
}

// Vector-level fusion of three refined tokens.
inline std::vector<double> fuse(const std::array<std::vector<double>, kNumModalities>& tokens,
                                const FusionStrategy& f) {
  validate(f);
  const std::size_t d = tokens[0].size();
  for (const auto& t : tokens)
    if (t.size() != d) throw DimensionError("fuse: tokens differ in length");
  std::vector<double> out;
  if (f.kind == FusionKind::concat) {
    for (const auto& t : tokens) out.insert(out.end(), t.begin(), t.end());
    return out;
  }
  const auto w = f.kind == FusionKind::mean ? std::array<double, 3>{1.0 / 3, 1.0 / 3, 1.0 / 3} : f.weights;
  out.assign(d, 0.0);
  for (std::size_t m = 0; m < kNumModalities; ++m)
    for (std::size_t c = 0; c < d; ++c) out[c] += w[m] * tokens[m][c];
  return out;
}

inline constexpr std::size_t kClassifierHidden = 64;

struct ClassifierHead {
  Parameter hidden_w, hidden_b;  // [64 x d_in], [64]
  Parameter out_w, out_b;        // [1 x 64], [1]

  std::size_t in_dim() const noexcept { return hidden_w.value.cols(); }
};

inline ClassifierHead init_classifier(std::size_t d_in, std::uint64_t seed,
                                      std::size_t hidden = kClassifierHidden) {
  CounterRng rng(derive_seed(seed, "init.classifier"));
  ClassifierHead h;
  h.hidden_w = Parameter("cls.hidden.weight", xavier_uniform(hidden, d_in, rng));
  h.hidden_b = Parameter("cls.hidden.bias", Tensor({hidden}));
  h.out_w = Parameter("cls.out.weight", xavier_uniform(1, hidden, rng));
  h.out_b = Parameter("cls.out.bias", Tensor({1}));
  return h;
}

inline std::vector<Parameter*> parameters(ClassifierHead& h) {
  return {&h.hidden_w, &h.hidden_b, &h.out_w, &h.out_b};
}

// Pre-sigmoid logits [n x 1]: out(dropout(relu(hidden(fused)))).
inline Var classify_logits(Tape& tape, ClassifierHead& head, const Var& fused, double dropout_p = 0.0,
                           CounterRng* rng = nullptr, bool train = false) {
  if (fused.value().rank() != 2 || fused.value().cols() != head.in_dim())
    throw ContractError("classify: fused input " + shape_str(fused.value().shape()) +
                        " does not match classifier width " + std::to_string(head.in_dim()));
  Var h = relu(linear(fused, tape.param(head.hidden_w), tape.param(head.hidden_b)));
  if (train && dropout_p > 0.0) {
    if (!rng) throw ContractError("classify: dropout needs an rng");
    h = dropout(h, dropout_p, *rng, true);
  }
  return linear(h, tape.param(head.out_w), tape.param(head.out_b));
}

// Manipulation probabilities in (0, 1), eval mode.
inline Var classify(Tape& tape, ClassifierHead& head, const Var& fused) {
  return sigmoid(classify_logits(tape, head, fused));
}

inline double classify(const ClassifierHead& head, std::span<const double> fused) {
  if (fused.size() != head.in_dim())
    throw ContractError("classify: input length " + std::to_string(fused.size()) +
                        " does not match classifier width " + std::to_string(head.in_dim()));
  const Tensor& w1 = head.hidden_w.value;
  double logit = head.out_b.value[0];
  for (std::size_t r = 0; r < w1.rows(); ++r) {
    const double a = dot(w1.row(r), fused) + head.hidden_b.value[r];
    if (a > 0.0) logit += head.out_w.value[r] * a;
  }
  return sigmoid(logit);
}

// Binary cross-entropy of a probability against a 0/1 target.
inline double bce_loss(double prob, Label y) {
  if (!(prob > 0.0 && prob < 1.0)) throw ContractError("bce_loss: probability must lie in (0, 1)");
  return y == Label::manipulated ? -std::log(prob) : -std::log1p(-prob);
}

// lambda * contrastive + (1 - lambda) * classification.
inline Var total_loss(const Var& contrastive, const Var& classification, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ParameterError("total_loss: lambda must lie in [0, 1], got " + std::to_string(lambda));
  return weighted_sum(contrastive, lambda, classification, 1.0 - lambda);
}

inline double total_loss(double contrastive, double classification, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ParameterError("total_loss: lambda must lie in [0, 1], got " + std::to_string(lambda));
  return lambda * contrastive + (1.0 - lambda) * classification;
}

}  // namespace conllm
