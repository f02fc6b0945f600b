#pragma once

#include "conllm/rng.hpp"
#include "conllm/tensor.hpp"

#include <cmath>
#include <cstddef>

namespace conllm {

// Xavier/Glorot uniform for a [fan_out x fan_in] weight.
inline Tensor xavier_uniform(std::size_t fan_out, std::size_t fan_in, CounterRng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w = Tensor::matrix(fan_out, fan_in);
  for (double& v : w.storage()) v = rng.uniform(-bound, bound);
  return w;
}

}  // namespace conllm
