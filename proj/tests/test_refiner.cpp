#include "conllm/refiner.hpp"
#include "support/gen.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace conllm;
using namespace conllm::testing;

TEST(Attention, RowsOfWeightsSumToOne) {
  CounterRng rng(1);
  RefinerBlock block = init_refiner(8, 2, 2, 5);
  AttentionRecord rec;
  Tape tape;
  refine(tape, block, tape.constant(random_tensor(rng, {12, 8}, 3.0)), {false, 0.0, nullptr, &rec});
  ASSERT_EQ(rec.weights.size(), 2u * 4 * 2);  // layers x groups x heads
  for (const Tensor& w : rec.weights)
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double s = 0;
      for (double v : w.row(r)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Attention, MatchesDirectFormulaOnThreeByFour) {
  CounterRng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor q = random_tensor(rng, {3, 4}), k = random_tensor(rng, {3, 4}), v = random_tensor(rng, {3, 4});
    const Tensor want = direct_attention(q, k, v);
    const Tensor got = attention(q, k, v);
    Tape tape;
    const Tensor grouped = grouped_attention(tape.constant(q), tape.constant(k), tape.constant(v), 3, 1).value();
    const Tensor composed = attention(tape.constant(q), tape.constant(k), tape.constant(v)).value();
    for (std::size_t i = 0; i < 12; ++i) {
      EXPECT_NEAR(got[i], want[i], 1e-12);
      EXPECT_NEAR(grouped[i], want[i], 1e-12);
      EXPECT_NEAR(composed[i], want[i], 1e-12);
    }
  }
}

TEST(Attention, HeadsActOnTheirOwnColumns) {
  CounterRng rng(3);
  const Tensor q = random_tensor(rng, {6, 6}), k = random_tensor(rng, {6, 6}), v = random_tensor(rng, {6, 6});
  Tape tape;
  const Tensor got = grouped_attention(tape.constant(q), tape.constant(k), tape.constant(v), 3, 2).value();
  auto block = [](const Tensor& t, std::size_t g, std::size_t h) {
    Tensor b = Tensor::matrix(3, 3);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < 3; ++c) b(i, c) = t(g * 3 + i, h * 3 + c);
    return b;
  };
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t h = 0; h < 2; ++h) {
      const Tensor want = direct_attention(block(q, g, h), block(k, g, h), block(v, g, h));
      const Tensor part = block(got, g, h);
      for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(part[i], want[i], 1e-12);
    }
}

TEST(Attention, SingleTokenReturnsValues) {
  CounterRng rng(4);
  const Tensor q = random_tensor(rng, {1, 5}), k = random_tensor(rng, {1, 5}), v = random_tensor(rng, {1, 5});
  const Tensor out = attention(q, k, v);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(out[i], v[i], 1e-15);
}

TEST(Attention, RejectsBadShapes) {
  Tape tape;
  const Var x = tape.constant(Tensor::matrix(6, 10));
  EXPECT_THROW(grouped_attention(x, x, x, 3, 4), ParameterError);
  EXPECT_THROW(grouped_attention(x, x, x, 4, 2), DimensionError);
  EXPECT_THROW(attention(Tensor::matrix(3, 4), Tensor::matrix(3, 5), Tensor::matrix(3, 4)), DimensionError);
}

TEST(Refiner, ZeroLayersIsIdentity) {
  CounterRng rng(5);
  RefinerBlock block = init_refiner(8, 4, 0, 1);
  Tape tape;
  const Tensor x = random_tensor(rng, {9, 8});
  EXPECT_EQ(refine(tape, block, tape.constant(x)).value(), x);
  EXPECT_EQ(parameters(block).size(), 1u);
}

TEST(Refiner, SamplesAreRefinedIndependently) {
  CounterRng rng(6);
  RefinerBlock block = init_refiner(8, 2, 2, 3);
  const Tensor x = random_tensor(rng, {12, 8});
  Tape tape;
  const Tensor all = refine(tape, block, tape.constant(x)).value();
  for (std::size_t s = 0; s < 4; ++s) {
    Tensor one = Tensor::matrix(3, 8);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 8; ++c) one(r, c) = x(s * 3 + r, c);
    const Tensor got = refine(tape, block, tape.constant(one)).value();
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(got(r, c), all(s * 3 + r, c), 1e-12);
  }
}

// Without type embeddings, attention over a sample's tokens is permutation
// equivariant; with the learned type rows zero the block inherits that.
TEST(Refiner, EquivariantToTokenOrderWhenTypesAreZero) {
  CounterRng rng(7);
  RefinerBlock block = init_refiner(8, 2, 1, 9);
  const Tensor x = random_tensor(rng, {3, 8});
  Tensor perm = Tensor::matrix(3, 8);
  const std::size_t order[3] = {2, 0, 1};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) perm(r, c) = x(order[r], c);
  Tape tape;
  const Tensor a = refine(tape, block, tape.constant(x)).value();
  const Tensor b = refine(tape, block, tape.constant(perm)).value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(b(r, c), a(order[r], c), 1e-12);
}

TEST(Refiner, InitIsDeterministicAndValidated) {
  RefinerBlock a = init_refiner(8, 4, 2, 17), b = init_refiner(8, 4, 2, 17), c = init_refiner(8, 4, 2, 18);
  auto pa = parameters(a), pb = parameters(b), pc = parameters(c);
  ASSERT_EQ(pa.size(), 1u + 2 * 12);
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value, pb[i]->value);
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    differs |= pa[i]->value != pc[i]->value;
  }
  EXPECT_TRUE(differs);
  EXPECT_THROW(init_refiner(8, 5, 2, 0), ParameterError);
  EXPECT_THROW(init_refiner(8, 0, 2, 0), ParameterError);
}

TEST(Refiner, RejectsMalformedTokens) {
  RefinerBlock block = init_refiner(8, 2, 1, 0);
  Tape tape;
  EXPECT_THROW(refine(tape, block, tape.constant(Tensor::matrix(4, 8))), ContractError);
  EXPECT_THROW(refine(tape, block, tape.constant(Tensor::matrix(3, 6))), ContractError);
  EXPECT_THROW(refine(tape, block, tape.constant(Tensor::matrix(3, 8)), {true, 0.5, nullptr, nullptr}),
               ContractError);
}

TEST(Refiner, TrainModeDropoutIsSeededAndEvalIsDeterministic) {
  CounterRng data(8);
  RefinerBlock block = init_refiner(8, 2, 2, 4);
  const Tensor x = random_tensor(data, {6, 8});
  Tape tape;
  CounterRng r1(3), r2(3), r3(4);
  const Tensor a = refine(tape, block, tape.constant(x), {true, 0.5, &r1}).value();
  const Tensor b = refine(tape, block, tape.constant(x), {true, 0.5, &r2}).value();
  const Tensor c = refine(tape, block, tape.constant(x), {true, 0.5, &r3}).value();
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(refine(tape, block, tape.constant(x)).value(), refine(tape, block, tape.constant(x)).value());
}

TEST(Refiner, BlockGradientsMatchFiniteDifferences) {
  CounterRng rng(9);
  RefinerBlock block = init_refiner(4, 2, 2, 6, 2);
  for (Parameter* p : parameters(block))
    for (double& v : p->value.storage()) v += 0.1 * rng.normal();
  const Tensor x = random_tensor(rng, {6, 4});
  const Tensor probe = random_tensor(rng, {6, 4});
  const GradCheckResult r = gradcheck_params(
      [&](bool backward) {
        Tape tape;
        CounterRng mask(1);
        Var y = refine(tape, block, tape.constant(x), {true, 0.3, &mask});
        Var loss = sum(mul(y, tape.constant(probe)));
        if (backward) tape.backward(loss);
        return loss.value().item();
      },
      parameters(block));
  EXPECT_LT(r.max_rel_error, 1e-5) << "abs " << r.max_abs_error;
}
