#pragma once

// Synthetic stand-in for pretrained-model embeddings.
//
// Each modality m has a fixed mixing matrix M_m [d_m x k] with N(0, 1/k)
// entries. An authentic sample draws one latent u ~ N(0, I_k) and emits
// z_m = M_m u + sigma * eta_m for every modality. Manipulated samples:
//   hard: independent latents per modality, so every marginal matches the
//         authentic one and only cross-modal agreement is broken;
//   easy: shared latent, plus fake_shift along a fixed unit direction on z_av.

#include "conllm/dataio.hpp"
#include "conllm/errors.hpp"
#include "conllm/rng.hpp"
#include "conllm/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>

namespace conllm {

enum class SynthMode { easy, hard };

inline std::string_view to_string(SynthMode m) { return m == SynthMode::easy ? "easy" : "hard"; }

struct SynthConfig {
  std::size_t n_real = 1000;
  std::size_t n_fake = 1000;
  std::size_t latent_dim = 16;
  Dims dims{64, 96, 80};
  double noise_sigma = 0.3;
  SynthMode mode = SynthMode::hard;
  double fake_shift = 3.0;
  std::uint64_t seed = 0;
};

inline void validate(const SynthConfig& c) {
  if (c.n_real < 1) throw ParameterError("synth: n_real must be >= 1");
  if (c.n_fake < 1) throw ParameterError("synth: n_fake must be >= 1");
  if (c.latent_dim < 1) throw ParameterError("synth: latent_dim must be >= 1");
  for (Modality m : kModalities)
    if (c.dims[index_of(m)] == 0)
      throw ParameterError("synth: dims." + std::string(to_string(m)) + " must be positive");
  if (c.latent_dim > *std::min_element(c.dims.begin(), c.dims.end()))
    throw ParameterError("synth: latent_dim must not exceed the smallest modality dimension");
  if (!(c.noise_sigma >= 0.0) || !std::isfinite(c.noise_sigma))
    throw ParameterError("synth: noise_sigma must be finite and >= 0");
  if (!std::isfinite(c.fake_shift)) throw ParameterError("synth: fake_shift must be finite");
}

// The mixing matrices M_m, reproducible from the seed alone.
inline std::array<Tensor, kNumModalities> synth_mixing(const SynthConfig& c) {
  std::array<Tensor, kNumModalities> mix;
  const double sd = 1.0 / std::sqrt(static_cast<double>(c.latent_dim));
  for (Modality m : kModalities) {
    CounterRng rng(derive_seed(c.seed, "synth.mixing", index_of(m)));
    Tensor t = Tensor::matrix(c.dims[index_of(m)], c.latent_dim);
    for (double& v : t.storage()) v = sd * rng.normal();
    mix[index_of(m)] = std::move(t);
  }
  return mix;
}

// Unit direction along which easy-mode fakes are displaced in z_av.
inline std::vector<double> synth_shift_direction(const SynthConfig& c) {
  CounterRng rng(derive_seed(c.seed, "synth.shift"));
  std::vector<double> d(c.dims[index_of(Modality::audiovisual)]);
  for (double& v : d) v = rng.normal();
  const double n = l2_norm(d);
  for (double& v : d) v /= n;
  return d;
}

inline EmbeddingBundle synth_generate(const SynthConfig& c) {
  validate(c);
  const auto mix = synth_mixing(c);
  const auto shift_dir = synth_shift_direction(c);
  const std::size_t k = c.latent_dim;

  EmbeddingBundle b;
  b.dims = c.dims;
  char prov[256];
  std::snprintf(prov, sizeof prov,
                "synth mode=%s seed=%llu n_real=%zu n_fake=%zu k=%zu sigma=%.17g fake_shift=%.17g "
                "mixing=N(0,1/k) streams derive_seed(seed,\"synth.mixing\",m)",
                std::string(to_string(c.mode)).c_str(), static_cast<unsigned long long>(c.seed),
                c.n_real, c.n_fake, k, c.noise_sigma, c.fake_shift);
  b.provenance = prov;

  const std::size_t total = c.n_real + c.n_fake;
  b.samples.reserve(total);
  std::vector<double> latent(k);
  for (std::size_t i = 0; i < total; ++i) {
    const bool fake = i >= c.n_real;
    CounterRng rng(derive_seed(c.seed, "synth.sample", i));
    Sample s;
    char id[32];
    std::snprintf(id, sizeof id, "%s-%06zu", fake ? "fake" : "real", fake ? i - c.n_real : i);
    s.id = id;
    s.label = fake ? Label::manipulated : Label::authentic;

    for (double& u : latent) u = rng.normal();
    for (Modality m : kModalities) {
      if (fake && c.mode == SynthMode::hard && m != Modality::audio)
        for (double& u : latent) u = rng.normal();
      const Tensor& mm = mix[index_of(m)];
      std::vector<float> z(mm.rows());
      for (std::size_t r = 0; r < mm.rows(); ++r) {
        double v = c.noise_sigma * rng.normal();
        for (std::size_t j = 0; j < k; ++j) v += mm(r, j) * latent[j];
        if (fake && c.mode == SynthMode::easy && m == Modality::audiovisual)
          v += c.fake_shift * shift_dir[r];
        z[r] = static_cast<float>(v);
      }
      s.z[index_of(m)] = std::move(z);
    }
    b.samples.push_back(std::move(s));
  }
  return b;
}

}  // namespace conllm
