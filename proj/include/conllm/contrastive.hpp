#pragma once

// Cross-modal contrastive alignment over a batch.
//
// Embeddings are indexed on the flattened (sample, modality) grid of the
// batch: index = sample * 3 + modality. For a positive pair (i, j) with
// negatives N(i), the per-pair term is
//   standard:      -log( e^{s_ij/t} / (e^{s_ij/t} + sum_k e^{s_ik/t}) )
//   paper_literal: -log( e^{s_ij/t} / sum_k e^{s_ik/t} )
// with s the cosine similarity; the loss is the mean over positive pairs.

#include "conllm/autograd.hpp"
#include "conllm/dataio.hpp"
#include "conllm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace conllm {

enum class DenominatorMode { standard, paper_literal };
enum class PairPolicy { same_sample_authentic, supervised_label };

struct ContrastiveConfig {
  double temperature = 0.07;
  DenominatorMode denominator = DenominatorMode::standard;
  PairPolicy policy = PairPolicy::same_sample_authentic;
};

inline void validate(const ContrastiveConfig& c) {
  if (!(c.temperature > 0.0) || !std::isfinite(c.temperature))
    throw ParameterError("contrastive: temperature must be positive, got " +
                         std::to_string(c.temperature));
}

struct PairSet {
  // Size of the flattened index space (3 * batch size).
  std::size_t n = 0;
  // Ordered (anchor, partner) pairs.
  std::vector<std::pair<std::size_t, std::size_t>> positives;
  // negatives[i]: ascending indices contrasted against anchor i.
  std::vector<std::vector<std::size_t>> negatives;

  bool empty() const noexcept { return positives.empty(); }
};

// Throws ContractError if the set breaks its invariants.
inline void validate(const PairSet& p) {
  if (p.negatives.size() != p.n) throw ContractError("pair set: negatives table has wrong size");
  for (auto [i, j] : p.positives) {
    if (i >= p.n || j >= p.n) throw ContractError("pair set: positive index out of range");
    if (i == j) throw ContractError("pair set: self pair");
    if (p.negatives[i].empty()) throw ContractError("pair set: positive anchor without negatives");
  }
  for (std::size_t i = 0; i < p.n; ++i)
    for (std::size_t k : p.negatives[i]) {
      if (k >= p.n) throw ContractError("pair set: negative index out of range");
      if (k == i) throw ContractError("pair set: anchor listed as its own negative");
    }
}

inline constexpr std::size_t grid_index(std::size_t sample, Modality m) noexcept {
  return sample * kNumModalities + index_of(m);
}

// labels[s] and presence[s] (bit m set when modality m is present) describe
// each sample of the batch.
inline PairSet build_pairs(std::span<const Label> labels, std::span<const std::uint8_t> presence,
                           PairPolicy policy = PairPolicy::same_sample_authentic) {
  if (labels.size() != presence.size())
    throw DimensionError("build_pairs: labels and presence differ in length");
  const std::size_t b = labels.size();
  if (b < 2) throw ParameterError("build_pairs: batch size must be >= 2, got " + std::to_string(b));
  auto present = [&](std::size_t s, std::size_t m) { return (presence[s] >> m) & 1u; };

  PairSet p;
  p.n = b * kNumModalities;
  p.negatives.resize(p.n);
  std::vector<std::vector<std::size_t>> partners(p.n);

  for (std::size_t s = 0; s < b; ++s) {
    if (labels[s] != Label::authentic) continue;
    for (std::size_t m1 = 0; m1 < kNumModalities; ++m1)
      for (std::size_t m2 = 0; m2 < kNumModalities; ++m2)
        if (m1 != m2 && present(s, m1) && present(s, m2))
          partners[s * 3 + m1].push_back(s * 3 + m2);
  }
  if (policy == PairPolicy::supervised_label) {
    for (std::size_t s1 = 0; s1 < b; ++s1)
      for (std::size_t s2 = 0; s2 < b; ++s2) {
        if (s1 == s2 || labels[s1] != Label::authentic || labels[s2] != Label::authentic) continue;
        for (std::size_t m = 0; m < kNumModalities; ++m)
          if (present(s1, m) && present(s2, m)) partners[s1 * 3 + m].push_back(s2 * 3 + m);
      }
  }
  for (std::size_t i = 0; i < p.n; ++i) {
    std::sort(partners[i].begin(), partners[i].end());
    for (std::size_t j : partners[i]) p.positives.emplace_back(i, j);
  }

  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      if (!present(s, m)) continue;
      const std::size_t i = s * 3 + m;
      auto& neg = p.negatives[i];
      for (std::size_t s2 = 0; s2 < b; ++s2)
        for (std::size_t m2 = 0; m2 < kNumModalities; ++m2) {
          if (!present(s2, m2)) continue;
          const std::size_t k = s2 * 3 + m2;
          if (k == i) continue;
          if (s2 == s && labels[s] == Label::authentic) continue;
          if (std::binary_search(partners[i].begin(), partners[i].end(), k)) continue;
          neg.push_back(k);
        }
    }
  // An anchor left with no negatives cannot be contrasted; its pairs are dropped.
  std::erase_if(p.positives, [&](const auto& pr) { return p.negatives[pr.first].empty(); });
  return p;
}

inline PairSet build_pairs(const EmbeddingBundle& bundle, const Batch& batch,
                           PairPolicy policy = PairPolicy::same_sample_authentic) {
  std::vector<Label> labels;
  std::vector<std::uint8_t> presence;
  for (std::size_t i : batch) {
    labels.push_back(bundle.samples.at(i).label);
    presence.push_back(bundle.samples.at(i).presence_mask());
  }
  return build_pairs(labels, presence, policy);
}

inline double cosine_sim(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw DimensionError("cosine_sim: lengths " + std::to_string(u.size()) + " and " +
                         std::to_string(v.size()));
  const double nu = l2_norm(u), nv = l2_norm(v);
  if (!(nu > 0.0) || !(nv > 0.0)) throw DomainError("cosine_sim: zero vector");
  return dot(u, v) / (nu * nv);
}

struct ContrastiveResult {
  double loss = 0.0;
  Tensor dloss_dsim;  // [n x n], filled only when requested
};

namespace detail {

// Stable log-sum-exp over values sorted ascending, so that the result does
// not depend on the order in which the terms were listed.
inline double sorted_logsumexp(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  const double mx = v.back();
  double z = 0.0;
  for (double x : v) z += std::exp(x - mx);
  return mx + std::log(z);
}

}  // namespace detail

// Loss from a precomputed similarity matrix S [n x n] (only the entries named
// by the pair set are read).
inline ContrastiveResult contrastive_from_similarities(const Tensor& sim, const PairSet& pairs,
                                                       const ContrastiveConfig& cfg,
                                                       bool want_grad = false) {
  validate(cfg);
  ContrastiveResult out;
  if (want_grad) out.dloss_dsim = Tensor::matrix(pairs.n, pairs.n);
  if (pairs.empty()) return out;
  if (sim.rows() != pairs.n || sim.cols() != pairs.n)
    throw DimensionError("contrastive: similarity matrix " + shape_str(sim.shape()) +
                         " does not match pair set of size " + std::to_string(pairs.n));

  const double inv_t = 1.0 / cfg.temperature;
  const bool standard = cfg.denominator == DenominatorMode::standard;
  const double inv_p = 1.0 / static_cast<double>(pairs.positives.size());
  std::vector<double> terms;
  double total = 0.0;
  for (auto [i, j] : pairs.positives) {
    const auto& neg = pairs.negatives[i];
    const double a = sim(i, j) * inv_t;
    terms.clear();
    if (standard) terms.push_back(a);
    for (std::size_t k : neg) terms.push_back(sim(i, k) * inv_t);
    const double lse = detail::sorted_logsumexp(terms);
    total += lse - a;
    if (!want_grad) continue;
    // d(lse - a): softmax weights on each term, minus one on the positive.
    const double w = inv_p * inv_t;
    out.dloss_dsim(i, j) += w * ((standard ? std::exp(a - lse) : 0.0) - 1.0);
    for (std::size_t k : neg) out.dloss_dsim(i, k) += w * std::exp(sim(i, k) * inv_t - lse);
  }
  out.loss = total * inv_p;
  return out;
}

// Differentiable loss over embeddings H [n x d] (n = 3 * batch size).
// An empty positive set yields a constant zero.
inline Var contrastive_loss(const Var& h, const PairSet& pairs, const ContrastiveConfig& cfg) {
  validate(cfg);
  validate(pairs);
  const Tensor& hv = h.value();
  require_matrix(hv, "contrastive_loss");
  if (hv.rows() != pairs.n)
    throw DimensionError("contrastive_loss: " + std::to_string(hv.rows()) +
                         " embeddings for a pair set of size " + std::to_string(pairs.n));
  if (pairs.empty()) return h.tape->constant(Tensor::scalar(0.0));

  const std::size_t n = pairs.n, d = hv.cols();
  std::vector<char> used(n, 0);
  for (auto [i, j] : pairs.positives) {
    used[i] = used[j] = 1;
    for (std::size_t k : pairs.negatives[i]) used[k] = 1;
  }
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!used[i]) continue;
    norms[i] = l2_norm(hv.row(i));
    if (!(norms[i] > 0.0))
      throw DomainError("contrastive_loss: zero embedding at index " + std::to_string(i));
  }
  Tensor sim = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!used[i]) continue;
    for (std::size_t k = i; k < n; ++k) {
      if (!used[k]) continue;
      sim(i, k) = sim(k, i) = dot(hv.row(i), hv.row(k)) / (norms[i] * norms[k]);
    }
  }
  ContrastiveResult r = contrastive_from_similarities(sim, pairs, cfg, true);
  Tensor dsim = std::move(r.dloss_dsim);
  return h.tape->push(
      "contrastive_loss", {h}, Tensor::scalar(r.loss),
      [h, sim, dsim, norms, n, d](Tape& tp, const Tensor& g) {
        Tensor& gh = tp.grad(h);
        const Tensor& hv = h.value();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < n; ++k) {
            const double c = g[0] * dsim(i, k);
            if (c == 0.0) continue;
            // ds/du = v/(|u||v|) - s u/|u|^2, and symmetrically for v.
            const double s = sim(i, k), nn = norms[i] * norms[k];
            const double ui = s / (norms[i] * norms[i]), uk = s / (norms[k] * norms[k]);
            for (std::size_t c2 = 0; c2 < d; ++c2) {
              gh(i, c2) += c * (hv(k, c2) / nn - ui * hv(i, c2));
              gh(k, c2) += c * (hv(i, c2) / nn - uk * hv(k, c2));
            }
          }
      });
}

}  // namespace conllm
