#pragma once

// Per-modality affine projection into the shared latent space, optionally
// followed by L2 normalization.

#include "conllm/autograd.hpp"
#include "conllm/dataio.hpp"
#include "conllm/errors.hpp"
#include "conllm/init.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace conllm {

struct ProjectionHead {
  Modality modality = Modality::audio;
  Parameter weight;  // [d_s x d_m]
  Parameter bias;    // [d_s]
  bool normalize_output = true;

  std::size_t in_dim() const noexcept { return weight.value.cols(); }
  std::size_t out_dim() const noexcept { return weight.value.rows(); }
};

using ProjectionHeads = std::array<ProjectionHead, kNumModalities>;

inline ProjectionHead make_head(Modality m, std::size_t d_m, std::size_t d_s, CounterRng& rng,
                                bool normalize = true) {
  const std::string prefix = "proj." + std::string(to_string(m));
  ProjectionHead h;
  h.modality = m;
  h.weight = Parameter(prefix + ".weight", xavier_uniform(d_s, d_m, rng));
  h.bias = Parameter(prefix + ".bias", Tensor({d_s}));
  h.normalize_output = normalize;
  return h;
}

inline ProjectionHeads init_heads(const Dims& dims, std::size_t d_s, std::uint64_t seed,
                                  bool normalize = true) {
  if (d_s < 2) throw ParameterError("init_heads: shared dimension must be >= 2");
  ProjectionHeads heads;
  for (Modality m : kModalities) {
    CounterRng rng(derive_seed(seed, "init.projection", index_of(m)));
    heads[index_of(m)] = make_head(m, dims[index_of(m)], d_s, rng, normalize);
  }
  return heads;
}

inline void check_input(const ProjectionHead& head, std::size_t got) {
  if (got != head.in_dim())
    throw DimensionError("projection " + std::string(to_string(head.modality)) + ": expected input of length " +
                         std::to_string(head.in_dim()) + ", got " + std::to_string(got));
}

// Differentiable batch projection of Z [n x d_m] -> H [n x d_s]. Rows whose
// pre-normalization norm is below 1e-12 become e_1 and are tallied in *fallbacks.
inline Var project(Tape& tape, ProjectionHead& head, const Var& z, std::size_t* fallbacks = nullptr) {
  check_input(head, z.value().cols());
  Var h = linear(z, tape.param(head.weight), tape.param(head.bias));
  return head.normalize_output ? l2_normalize_rows(h, fallbacks) : h;
}

// Single-vector evaluation, h = W z + b (then normalized).
inline std::vector<double> project(const ProjectionHead& head, std::span<const double> z,
                                   std::size_t* fallbacks = nullptr) {
  check_input(head, z.size());
  const Tensor& w = head.weight.value;
  std::vector<double> h(head.out_dim());
  for (std::size_t r = 0; r < h.size(); ++r) h[r] = dot(w.row(r), z) + head.bias.value[r];
  if (head.normalize_output) {
    const double n = l2_norm(h);
    if (n < 1e-12) {
      std::fill(h.begin(), h.end(), 0.0);
      h[0] = 1.0;
      if (fallbacks) ++*fallbacks;
    } else {
      for (double& v : h) v /= n;
    }
  }
  return h;
}

}  // namespace conllm
