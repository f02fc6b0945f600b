#pragma once

// The full detector: per-modality projection -> (contrastive alignment on the
// projected tokens) -> transformer refinement -> fusion -> sigmoid classifier.

#include "conllm/autograd.hpp"
#include "conllm/contrastive.hpp"
#include "conllm/dataio.hpp"
#include "conllm/fusion.hpp"
#include "conllm/projection.hpp"
#include "conllm/refiner.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace conllm {

struct ModelConfig {
  Dims dims{64, 96, 80};
  std::size_t shared_dim = 32;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t ffn_mult = 4;
  bool normalize_projection = true;
  FusionStrategy fusion;
};

struct Model {
  ModelConfig config;
  ProjectionHeads heads;
  // Stand-in token for a missing modality, one row per modality.
  Parameter absent;
  RefinerBlock refiner;
  ClassifierHead classifier;

  // Declaration order; this is also the checkpoint order.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (auto& h : heads) {
      ps.push_back(&h.weight);
      ps.push_back(&h.bias);
    }
    ps.push_back(&absent);
    for (Parameter* p : conllm::parameters(refiner)) ps.push_back(p);
    for (Parameter* p : conllm::parameters(classifier)) ps.push_back(p);
    return ps;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (Parameter* p : parameters()) n += p->value.size();
    return n;
  }
};

inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg.fusion);
  Model m;
  m.config = cfg;
  m.heads = init_heads(cfg.dims, cfg.shared_dim, derive_seed(seed, "model.projection"),
                       cfg.normalize_projection);
  m.absent = Parameter("absent_embedding", Tensor::matrix(kNumModalities, cfg.shared_dim));
  m.refiner = init_refiner(cfg.shared_dim, cfg.n_heads, cfg.n_layers, derive_seed(seed, "model.refiner"),
                           cfg.ffn_mult);
  m.classifier = init_classifier(fused_width(cfg.fusion, cfg.shared_dim), derive_seed(seed, "model.classifier"));
  return m;
}

// Throws DimensionError naming the first modality whose dimension disagrees
// with the model, for any modality the bundle actually uses.
inline void check_compatible(const Model& model, const EmbeddingBundle& bundle) {
  for (Modality m : kModalities) {
    const bool used = std::any_of(bundle.samples.begin(), bundle.samples.end(),
                                  [m](const Sample& s) { return s.has(m); });
    if (!used) continue;
    const std::size_t want = model.heads[index_of(m)].in_dim();
    if (bundle.dims[index_of(m)] != want)
      throw DimensionError("modality " + std::string(to_string(m)) + ": data has dimension " +
                           std::to_string(bundle.dims[index_of(m)]) + ", model expects " +
                           std::to_string(want));
  }
}

struct ForwardOptions {
  bool train = false;
  double dropout = 0.0;
  CounterRng* rng = nullptr;
  AttentionRecord* record = nullptr;
};

struct ForwardResult {
  Var tokens;  // projected tokens [n*3 x d_s], absent modalities substituted
  Var logits;  // [n x 1]
  std::vector<Label> labels;
  std::vector<std::uint8_t> presence;
  std::size_t projection_fallbacks = 0;
};

// Stacks the present embeddings of one modality into a [rows x d_m] matrix.
inline Tensor stack_modality(const EmbeddingBundle& bundle, std::span<const std::size_t> batch, Modality m,
                             std::vector<std::size_t>& row_of) {
  const std::size_t d = bundle.dims[index_of(m)];
  std::vector<double> data;
  std::size_t rows = 0;
  row_of.assign(batch.size(), SIZE_MAX);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const Sample& smp = bundle.samples.at(batch[s]);
    if (!smp.has(m)) continue;
    const auto& z = smp.embedding(m);
    data.insert(data.end(), z.begin(), z.end());
    row_of[s] = rows++;
  }
  return Tensor({rows, d}, std::move(data));
}

inline ForwardResult forward(Tape& tape, Model& model, const EmbeddingBundle& bundle,
                             std::span<const std::size_t> batch, const ForwardOptions& opt = {}) {
  if (batch.empty()) throw ContractError("forward: empty batch");
  ForwardResult r;
  std::vector<Var> sources;
  std::array<std::size_t, kNumModalities> source_of{};
  std::array<std::vector<std::size_t>, kNumModalities> row_of;
  for (Modality m : kModalities) {
    Tensor z = stack_modality(bundle, batch, m, row_of[index_of(m)]);
    if (z.rows() == 0) continue;
    source_of[index_of(m)] = sources.size();
    sources.push_back(project(tape, model.heads[index_of(m)], tape.constant(std::move(z)),
                              &r.projection_fallbacks));
  }
  const std::size_t absent_source = sources.size();
  sources.push_back(tape.param(model.absent));

  std::vector<RowRef> layout;
  layout.reserve(batch.size() * kNumModalities);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const Sample& smp = bundle.samples.at(batch[s]);
    r.labels.push_back(smp.label);
    r.presence.push_back(smp.presence_mask());
    for (Modality m : kModalities) {
      const std::size_t mi = index_of(m);
      if (smp.has(m)) layout.push_back({source_of[mi], row_of[mi][s]});
      else layout.push_back({absent_source, mi});
    }
  }
  r.tokens = gather_rows(sources, layout);

  Var refined = refine(tape, model.refiner, r.tokens, {opt.train, opt.dropout, opt.rng, opt.record});
  Var fused = fuse(refined, model.config.fusion);
  r.logits = classify_logits(tape, model.classifier, fused, opt.dropout, opt.rng, opt.train);
  return r;
}

// Eval-mode manipulation probabilities for every sample, in bundle order.
inline std::vector<double> predict(Model& model, const EmbeddingBundle& bundle, std::size_t chunk = 256) {
  check_compatible(model, bundle);
  std::vector<double> scores;
  scores.reserve(bundle.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < bundle.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(bundle.size(), start + chunk); ++i) idx.push_back(i);
    Tape tape;
    ForwardResult r = forward(tape, model, bundle, idx);
    for (double z : r.logits.value().data()) scores.push_back(sigmoid(z));
  }
  return scores;
}

}  // namespace conllm
