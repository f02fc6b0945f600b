// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails.

#include "conllm/cli.hpp"
#include "conllm/synth.hpp"
#include "conllm/trainer.hpp"
#include "support/gen.hpp"
#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"
#include "support/oracles.hpp"
#include "support/probe.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

using namespace conllm;
using namespace conllm::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

void report(const std::string& name, const Outcome& o, double seconds) {
  std::printf("%s  %-28s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds);
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

void criterion(const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  report(name, o, seconds_since(t0));
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  Outcome o;
  double worst_op = 0.0;
  std::string worst_name;
  for (const OpCase& c : op_cases())
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      const double e = c.run(seed).max_rel_error;
      if (e > worst_op) {
        worst_op = e;
        worst_name = c.name;
      }
    }
  o.require(worst_op < 1e-5, fmt("per-op error %.2e in %s", worst_op, worst_name.c_str()));

  double worst_e2e = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    CounterRng rng(seed);
    EmbeddingBundle data = random_bundle(rng, 4, {3, 4, 2}, true);
    data.samples[0].label = Label::authentic;
    data.samples[1].label = Label::manipulated;
    data.samples[3].z[seed % 3].reset();
    TrainConfig cfg;
    cfg.shared_dim = 4;
    cfg.n_heads = 2;
    cfg.n_layers = 1 + seed % 2;
    cfg.ffn_mult = 2;
    cfg.temperature = 0.5;
    cfg.dropout = 0.2;
    cfg.fusion = seed % 3 == 0 ? FusionStrategy::mean() : FusionStrategy::concat();
    Model model = init_model(cfg.model(data.dims), seed);
    for (Parameter* p : model.parameters())
      for (double& v : p->value.storage()) v += 0.1 * rng.normal();
    const Batch batch{0, 1, 2, 3};
    const GradCheckResult r = gradcheck_params(
        [&](bool backward) {
          Tape tape;
          CounterRng mask(derive_seed(seed, "mask"));
          BatchLoss loss = batch_loss(tape, model, data, batch, cfg, 0.5, mask);
          if (backward) tape.backward(loss.total);
          return loss.total.value().item();
        },
        model.parameters());
    worst_e2e = std::max(worst_e2e, r.max_rel_error);
  }
  o.require(worst_e2e < 1e-4, fmt("end-to-end error %.2e", worst_e2e));
  const double t = seconds_since(t0);
  o.require(t < 30.0, fmt("runtime %.1fs >= 30s", t));
  if (o.pass)
    o.detail = fmt("%zu ops x 20 seeds worst %.1e (<1e-5); end-to-end x 20 seeds worst %.1e (<1e-4)",
                   op_cases().size(), worst_op, worst_e2e);
  return o;
}

Outcome metric_oracles() {
  const auto t0 = Clock::now();
  Outcome o;
  CounterRng rng(2024);
  std::size_t eer_mismatch = 0, auc_mismatch = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const ScoreSet s = random_scores(rng, between(rng, 2, 50), between(rng, 2, 12));
    eer_mismatch += eer(s) != brute_eer(s);
    auc_mismatch += auc(s) != brute_auc(s);
  }
  o.require(eer_mismatch == 0, fmt("eer differs from oracle on %zu/500 sets", eer_mismatch));
  o.require(auc_mismatch == 0, fmt("auc differs from oracle on %zu/500 sets", auc_mismatch));
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const ScoreSet s = random_scores(rng, between(rng, 2, 1000), between(rng, 2, 500));
    worst = std::max(worst, std::abs(trapezoid_area(roc_points(s)) - auc(s)));
  }
  o.require(worst <= 1e-12, fmt("trapezoid vs Mann-Whitney gap %.2e", worst));
  const double t = seconds_since(t0);
  o.require(t < 10.0, fmt("runtime %.1fs >= 10s", t));
  if (o.pass) o.detail = fmt("500 sets exact match; trapezoid gap %.1e over 200 sets up to 1000 scores", worst);
  return o;
}

Outcome contrastive_fidelity() {
  Outcome o;
  PairSet p;
  p.n = 3;
  p.negatives.resize(3);
  p.positives = {{0, 1}};
  p.negatives[0] = {2};
  const Tensor h = Tensor::matrix({{1, 0}, {1, 0}, {0, 1}});  // s+ = 1, s- = 0
  Tape tape;
  const double standard = contrastive_loss(tape.constant(h), p, {1.0, DenominatorMode::standard}).value().item();
  const double literal = contrastive_loss(tape.constant(h), p, {1.0, DenominatorMode::paper_literal}).value().item();
  o.require(std::abs(standard - std::log(1.0 + std::exp(-1.0))) <= 1e-9, fmt("standard %.17g", standard));
  o.require(std::abs(literal + 1.0) <= 1e-9, fmt("literal %.17g", literal));

  // Scaling similarities and temperature together leaves the loss unchanged:
  // bit for bit with power-of-two factors, to rounding otherwise.
  CounterRng rng(7);
  std::size_t inexact = 0;
  double worst_generic = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Label> labels;
    std::vector<std::uint8_t> presence;
    for (std::size_t s = 0, b = between(rng, 2, 6); s < b; ++s) {
      labels.push_back(rng.below(2) ? Label::manipulated : Label::authentic);
      presence.push_back(static_cast<std::uint8_t>(1 + rng.below(7)));
    }
    const PairSet ps = build_pairs(labels, presence, trial % 2 ? PairPolicy::supervised_label
                                                               : PairPolicy::same_sample_authentic);
    Tensor sim = Tensor::matrix(ps.n, ps.n);
    for (double& v : sim.storage()) v = 2.0 * rng.uniform() - 1.0;
    const double tau = 0.05 + rng.uniform();
    for (DenominatorMode mode : {DenominatorMode::standard, DenominatorMode::paper_literal}) {
      const double base = contrastive_from_similarities(sim, ps, {tau, mode}).loss;
      for (double c : {0.25, 0.5, 2.0, 8.0}) {
        Tensor scaled = sim;
        for (double& v : scaled.storage()) v *= c;
        inexact += contrastive_from_similarities(scaled, ps, {c * tau, mode}).loss != base;
      }
      const double c = 0.3 + 2.0 * rng.uniform();
      Tensor scaled = sim;
      for (double& v : scaled.storage()) v *= c;
      const double got = contrastive_from_similarities(scaled, ps, {c * tau, mode}).loss;
      worst_generic = std::max(worst_generic, std::abs(got - base) / std::max(1.0, std::abs(base)));
    }
  }
  o.require(inexact == 0, fmt("tau rescaling not exact in %zu cases", inexact));
  o.require(worst_generic <= 1e-12, fmt("generic rescaling error %.2e", worst_generic));
  if (o.pass)
    o.detail = fmt("standard %.12f, literal %.12f, rescaling exact (generic factor %.1e)", standard, literal,
                   worst_generic);
  return o;
}

Outcome attention_fidelity() {
  Outcome o;
  CounterRng rng(11);
  double worst_row = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    RefinerBlock block = init_refiner(8, 2, 2, static_cast<std::uint64_t>(trial));
    AttentionRecord rec;
    Tape tape;
    refine(tape, block, tape.constant(random_tensor(rng, {15, 8}, 4.0)), {false, 0.0, nullptr, &rec});
    for (const Tensor& w : rec.weights)
      for (std::size_t r = 0; r < w.rows(); ++r) {
        double s = 0.0;
        for (double v : w.row(r)) s += v;
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }
  }
  o.require(worst_row <= 1e-9, fmt("row sum error %.2e", worst_row));

  double worst_direct = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor q = random_tensor(rng, {3, 4}), k = random_tensor(rng, {3, 4}), v = random_tensor(rng, {3, 4});
    const Tensor want = direct_attention(q, k, v);
    Tape tape;
    const Tensor a = attention(q, k, v);
    const Tensor g = grouped_attention(tape.constant(q), tape.constant(k), tape.constant(v), 3, 1).value();
    for (std::size_t i = 0; i < 12; ++i)
      worst_direct = std::max({worst_direct, std::abs(a[i] - want[i]), std::abs(g[i] - want[i])});
  }
  o.require(worst_direct <= 1e-12, fmt("3x4 direct-formula gap %.2e", worst_direct));

  bool identity = true;
  for (int trial = 0; trial < 10; ++trial) {
    RefinerBlock block = init_refiner(8, 4, 0, static_cast<std::uint64_t>(trial));
    Tape tape;
    const Tensor x = random_tensor(rng, {12, 8});
    identity &= refine(tape, block, tape.constant(x)).value() == x;
  }
  o.require(identity, "zero-layer refiner altered its input");
  if (o.pass) o.detail = fmt("row sums %.1e, 3x4 gap %.1e, L=0 identity", worst_row, worst_direct);
  return o;
}

// ---------------------------------------------------------------------------
// Synthetic benchmarks

struct Benchmark {
  Split data;
  EmbeddingBundle full;
};

Benchmark make_benchmark(SynthMode mode, std::uint64_t seed) {
  RunConfig rc = default_run_config();
  rc.seed = seed;
  rc.synth.mode = mode;
  rc.synth.n_real = 1250;
  rc.synth.n_fake = 1250;
  rc.derive_seeds();
  Benchmark b;
  b.full = synth_generate(rc.synth);
  b.data = split(b.full, 0.2, derive_seed(seed, "split"));
  return b;
}

TrainConfig benchmark_config(std::uint64_t seed, std::size_t epochs) {
  RunConfig rc = default_run_config();
  rc.seed = seed;
  rc.train.epochs = epochs;
  rc.derive_seeds();
  return rc.train;
}

DetectionMetrics train_and_score(const Benchmark& b, const TrainConfig& cfg) {
  const TrainedModel tm = train(b.data.train, b.data.eval, cfg);
  return *tm.history.back().eval;
}

Outcome easy_benchmark() {
  const auto t0 = Clock::now();
  Outcome o;
  std::size_t passing = 0;
  std::string runs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Benchmark b = make_benchmark(SynthMode::easy, seed);
    const DetectionMetrics m = train_and_score(b, benchmark_config(seed, 10));
    const bool ok = m.auc >= 0.99 && m.eer <= 0.02;
    passing += ok;
    runs += fmt(" [%llu: auc %.4f eer %.4f]", static_cast<unsigned long long>(seed), m.auc, m.eer);
  }
  const double t = seconds_since(t0);
  o.require(passing >= 4, fmt("only %zu/5 seeds reach auc>=0.99 and eer<=2%%", passing));
  o.require(t < 60.0, fmt("runtime %.1fs >= 60s", t));
  o.detail = (o.pass ? fmt("%zu/5 seeds", passing) : o.detail) + runs;
  return o;
}

struct HardRun {
  Benchmark bench;
  DetectionMetrics full;
  std::array<double, 3> probe_auc{};
};

std::vector<HardRun> hard_runs;

Outcome hard_benchmark() {
  const auto t0 = Clock::now();
  Outcome o;
  double worst_probe = 0.0, worst_full = 1.0;
  std::string runs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    HardRun r;
    r.bench = make_benchmark(SynthMode::hard, seed);
    for (Modality m : kModalities) {
      const LinearProbe p = fit_probe(r.bench.data.train, m);
      r.probe_auc[index_of(m)] = probe_auc(p, r.bench.data.eval, m);
      worst_probe = std::max(worst_probe, r.probe_auc[index_of(m)]);
    }
    r.full = train_and_score(r.bench, benchmark_config(seed, 50));
    worst_full = std::min(worst_full, r.full.auc);
    runs += fmt(" [%llu: probes %.3f/%.3f/%.3f full %.4f]", static_cast<unsigned long long>(seed), r.probe_auc[0],
                r.probe_auc[1], r.probe_auc[2], r.full.auc);
    hard_runs.push_back(std::move(r));
  }
  const double t = seconds_since(t0);
  o.require(worst_probe <= 0.6, fmt("probe auc %.4f > 0.6", worst_probe));
  o.require(worst_full >= 0.90, fmt("pipeline auc %.4f < 0.90", worst_full));
  o.require(t < 300.0, fmt("runtime %.1fs >= 300s", t));
  o.detail = (o.pass ? fmt("max probe auc %.3f, min pipeline auc %.4f", worst_probe, worst_full) : o.detail) + runs;
  return o;
}

Outcome ablation_directions() {
  Outcome o;
  if (hard_runs.size() != 5) {
    o.require(false, "hard benchmark runs unavailable");
    return o;
  }
  double full_eer = 0, full_acc = 0, no_contrastive_eer = 0, no_refiner_acc = 0, mean_fusion_acc = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const HardRun& r = hard_runs[seed];
    full_eer += r.full.eer / 5;
    full_acc += r.full.acc / 5;
    TrainConfig cfg = benchmark_config(seed, 50);
    TrainConfig no_contrastive = cfg;
    no_contrastive.lambda = 0.0;
    no_contrastive_eer += train_and_score(r.bench, no_contrastive).eer / 5;
    TrainConfig no_refiner = cfg;
    no_refiner.n_layers = 0;
    no_refiner_acc += train_and_score(r.bench, no_refiner).acc / 5;
    TrainConfig mean_fusion = cfg;
    mean_fusion.fusion = FusionStrategy::mean();
    mean_fusion_acc += train_and_score(r.bench, mean_fusion).acc / 5;
  }
  const std::string summary =
      fmt("EER full %.4f vs lambda=0 %.4f; ACC full %.4f vs L=0 %.4f vs mean-fusion %.4f", full_eer,
          no_contrastive_eer, full_acc, no_refiner_acc, mean_fusion_acc);
  o.require(full_eer <= no_contrastive_eer, "contrastive direction");
  o.require(full_acc >= no_refiner_acc, "refiner direction");
  o.require(full_acc >= mean_fusion_acc, "fusion direction");
  o.detail = (o.pass ? std::string() : "violated: " + o.detail + "; ") + summary;
  return o;
}

// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "conllm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  return cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
}

Outcome determinism_and_persistence() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "conllm_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Json cfg{{"seed", 17},
                 {"synth", {{"n_real", 60}, {"n_fake", 60}, {"mode", "hard"}}},
                 {"train", {{"epochs", 2}}}};
  std::ofstream(dir / "c.json") << cfg.dump();
  const std::string c = (dir / "c.json").string();
  bool ran = run_cli({"synth", "--config", c, "--out", (dir / "a.ceb").string(), "--quiet"}) == 0 &&
             run_cli({"synth", "--config", c, "--out", (dir / "b.ceb").string(), "--quiet"}) == 0;
  for (const char* run : {"r1", "r2"})
    ran = ran && run_cli({"train", "--config", c, "--data", (dir / "a.ceb").string(), "--out-dir",
                          (dir / run).string(), "--quiet"}) == 0;
  for (const char* rep : {"e1.json", "e2.json"})
    ran = ran && run_cli({"eval", "--checkpoint", (dir / "r1" / "model.ckpt").string(), "--data",
                          (dir / "a.ceb").string(), "--report", (dir / rep).string(), "--quiet"}) == 0;
  o.require(ran, "cli invocation failed");
  if (!ran) return o;

  o.require(slurp(dir / "a.ceb") == slurp(dir / "b.ceb"), "synthetic bundles differ");
  o.require(slurp(dir / "r1/model.ckpt") == slurp(dir / "r2/model.ckpt"), "checkpoints differ");
  o.require(slurp(dir / "r1/history.json") == slurp(dir / "r2/history.json"), "histories differ");
  auto stripped = [&](const fs::path& p) {
    Json j = Json::parse(slurp(p));
    j.erase("timing");
    return j.dump();
  };
  o.require(stripped(dir / "r1/report.json") == stripped(dir / "r2/report.json"), "train reports differ");
  o.require(stripped(dir / "e1.json") == stripped(dir / "e2.json"), "eval reports differ");

  const std::string ckpt = slurp(dir / "r1/model.ckpt");
  const std::vector<std::uint8_t> ckpt_bytes(ckpt.begin(), ckpt.end());
  TrainedModel back = decode_checkpoint(ckpt_bytes);
  o.require(encode_checkpoint(back) == ckpt_bytes, "checkpoint round-trip not bit-exact");

  CounterRng rng(3);
  bool ceb_exact = true;
  for (int trial = 0; trial < 50; ++trial) {
    const EmbeddingBundle b = random_bundle(rng, between(rng, 0, 40), {5, 3, 7});
    const auto bytes = encode_bundle(b);
    const EmbeddingBundle d = decode_bundle(bytes);
    ceb_exact &= d == b && encode_bundle(d) == bytes;
  }
  o.require(ceb_exact, "CEB round-trip not bit-exact");

  const fs::path vec = fs::path(CONLLM_TEST_DATA) / "conformance_v1.ceb";
  const auto vbytes = detail::read_file_bytes(vec);
  const Json want = Json::parse(slurp(fs::path(CONLLM_TEST_DATA) / "conformance_v1.json"));
  const EmbeddingBundle vb = decode_bundle(vbytes);
  bool vector_ok = vb.size() == want["samples"].size() && encode_bundle(vb) == vbytes;
  for (std::size_t i = 0; vector_ok && i < vb.size(); ++i) {
    vector_ok &= vb.samples[i].id == want["samples"][i]["id"].get<std::string>();
    for (std::size_t m = 0; m < 3; ++m) {
      const Json& z = want["samples"][i]["z"][m];
      vector_ok &= z.is_null() == !vb.samples[i].z[m].has_value();
      if (!z.is_null())
        for (std::size_t c = 0; c < z.size(); ++c)
          vector_ok &= (*vb.samples[i].z[m])[c] == static_cast<float>(z[c].get<double>());
    }
  }
  o.require(vector_ok, "conformance vector mismatch");
  fs::remove_all(dir);
  if (o.pass) o.detail = "bundles, checkpoints, histories and reports identical; round-trips exact; vector ok";
  return o;
}

Outcome schedule_fidelity() {
  Outcome o;
  const TrainConfig d = default_run_config().train;
  const double l0 = lr_schedule(d.lr, 0, d.decay_factor, d.decay_every);
  const double l10 = lr_schedule(d.lr, 10, d.decay_factor, d.decay_every);
  const double l25 = lr_schedule(d.lr, 25, d.decay_factor, d.decay_every);
  o.require(l0 == 1e-3, fmt("epoch 0: %.17g", l0));
  o.require(l10 == 1e-4, fmt("epoch 10: %.17g", l10));
  o.require(l25 == 1e-5, fmt("epoch 25: %.17g", l25));
  if (o.pass) o.detail = "1e-3 / 1e-4 / 1e-5 exact";
  return o;
}

}  // namespace

int main() {
  criterion("gradient-correctness", gradients);
  criterion("metric-oracle-equivalence", metric_oracles);
  criterion("contrastive-fidelity", contrastive_fidelity);
  criterion("attention-fidelity", attention_fidelity);
  criterion("easy-benchmark", easy_benchmark);
  criterion("hard-benchmark", hard_benchmark);
  criterion("ablation-directions", ablation_directions);
  criterion("determinism-persistence", determinism_and_persistence);
  criterion("schedule-fidelity", schedule_fidelity);
  std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
