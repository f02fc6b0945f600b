#pragma once

// Hand-rolled random generators for property tests.

#include "conllm/dataio.hpp"
#include "conllm/metrics.hpp"
#include "conllm/rng.hpp"
#include "conllm/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace conllm::testing {

inline Tensor random_tensor(CounterRng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = scale * rng.normal();
  return t;
}

inline std::size_t between(CounterRng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

// Scores drawn from a coarse grid so that ties are common; both labels present.
inline ScoreSet random_scores(CounterRng& rng, std::size_t n, std::size_t levels) {
  ScoreSet s;
  for (std::size_t i = 0; i < n; ++i) {
    const Label l = i == 0 ? Label::authentic : i == 1 ? Label::manipulated
                                                        : (rng.below(2) ? Label::manipulated : Label::authentic);
    const double shift = l == Label::manipulated ? 0.3 * static_cast<double>(levels) : 0.0;
    double v = static_cast<double>(rng.below(levels)) + (rng.below(2) ? shift : 0.0);
    s.push_back({std::floor(v) / static_cast<double>(levels), l});
  }
  CounterRng shuffler(rng.next_u64());
  shuffle(s.begin(), s.end(), shuffler);
  return s;
}

inline std::vector<float> random_embedding(CounterRng& rng, std::size_t d) {
  std::vector<float> z(d);
  for (float& v : z) v = static_cast<float>(rng.normal());
  return z;
}

// Bundle with random labels, random (never empty) presence masks and random
// float payloads, including awkward ids.
inline EmbeddingBundle random_bundle(CounterRng& rng, std::size_t n, Dims dims, bool all_present = false) {
  EmbeddingBundle b;
  b.dims = dims;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = "s" + std::to_string(i) + (rng.below(3) == 0 ? "-\xc3\xa9t\xc3\xa9" : "");
    s.label = rng.below(2) ? Label::manipulated : Label::authentic;
    const std::uint8_t mask = all_present ? 7 : static_cast<std::uint8_t>(1 + rng.below(7));
    for (Modality m : kModalities)
      if ((mask >> index_of(m)) & 1u) s.z[index_of(m)] = random_embedding(rng, dims[index_of(m)]);
    b.samples.push_back(std::move(s));
  }
  return b;
}

}  // namespace conllm::testing
