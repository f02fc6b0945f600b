#pragma once

// Seeded ablation grid over {lambda in {0, lambda*}} x {layers in {0, L*}} x
// {fusion in {mean, concat}}. Every cell is a pure configuration change of the
// base run; seed s of every cell shares the same data split.

#include "conllm/config.hpp"
#include "conllm/dataio.hpp"
#include "conllm/metrics.hpp"
#include "conllm/report.hpp"
#include "conllm/trainer.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace conllm {

struct AblationCell {
  double lambda = 0.5;
  std::size_t layers = 2;
  FusionKind fusion = FusionKind::concat;

  std::string name() const {
    return "lambda=" + format_double(lambda) + ",layers=" + std::to_string(layers) + ",fusion=" +
           std::string(to_string(fusion));
  }

  TrainConfig apply(TrainConfig c) const {
    c.lambda = lambda;
    c.n_layers = layers;
    c.fusion = fusion == FusionKind::mean ? FusionStrategy::mean() : FusionStrategy::concat();
    return c;
  }

  friend bool operator==(const AblationCell&, const AblationCell&) = default;
};

// Full 2x2x2 grid, full model first.
inline std::vector<AblationCell> ablation_grid(const TrainConfig& base) {
  std::vector<AblationCell> cells;
  for (double lambda : {base.lambda, 0.0})
    for (std::size_t layers : {base.n_layers, std::size_t{0}})
      for (FusionKind f : {FusionKind::concat, FusionKind::mean}) cells.push_back({lambda, layers, f});
  return cells;
}

struct AblationRun {
  std::size_t cell = 0;
  std::size_t seed_index = 0;
  std::uint64_t seed = 0;
  std::optional<DetectionMetrics> metrics;
  std::string error;
};

struct Summary {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 with fewer than two runs
};

struct CellSummary {
  AblationCell cell;
  std::size_t completed = 0;
  std::size_t failed = 0;
  Summary eer, auc, acc;
};

struct AblationResult {
  std::vector<AblationCell> cells;
  std::vector<AblationRun> runs;
  std::vector<CellSummary> summary;
};

// Seed of run `index` under the top-level seed.
inline std::uint64_t ablation_seed(std::uint64_t top, std::size_t index) {
  return derive_seed(top, "ablate.seed", index);
}

inline Summary summarize(const std::vector<double>& xs) {
  Summary s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

using AblationProgress = std::function<void(const AblationRun&, const AblationCell&)>;

// Trains every cell on every seed. A failing run is recorded and the grid
// carries on.
inline AblationResult run_ablation(const EmbeddingBundle& data, const RunConfig& base,
                                   const std::vector<AblationCell>& cells, std::size_t n_seeds,
                                   const AblationProgress& progress = {}) {
  if (n_seeds < 1) throw ParameterError("ablation: need at least one seed");
  if (cells.empty()) throw ParameterError("ablation: no cells");
  AblationResult out;
  out.cells = cells;
  for (std::size_t s = 0; s < n_seeds; ++s) {
    RunConfig rc = base;
    rc.seed = ablation_seed(base.seed, s);
    rc.derive_seeds();
    const Split parts = split(data, rc.train.eval_fraction, derive_seed(rc.seed, "split"));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      AblationRun run{c, s, rc.seed, std::nullopt, {}};
      try {
        TrainedModel tm = train(parts.train, parts.eval, cells[c].apply(rc.train));
        run.metrics = tm.history.back().eval;
      } catch (const Error& e) {
        run.error = e.what();
      }
      out.runs.push_back(run);
      if (progress) progress(out.runs.back(), cells[c]);
    }
  }
  for (std::size_t c = 0; c < cells.size(); ++c) {
    CellSummary cs{cells[c], 0, 0, {}, {}, {}};
    std::vector<double> eer, auc, acc;
    for (const auto& r : out.runs) {
      if (r.cell != c) continue;
      if (!r.metrics) {
        ++cs.failed;
        continue;
      }
      ++cs.completed;
      eer.push_back(r.metrics->eer);
      auc.push_back(r.metrics->auc);
      acc.push_back(r.metrics->acc);
    }
    cs.eer = summarize(eer);
    cs.auc = summarize(auc);
    cs.acc = summarize(acc);
    out.summary.push_back(cs);
  }
  return out;
}

// One comparison panel: the full model against a single-factor ablation.
struct Panel {
  std::string name;
  std::size_t full = 0;
  std::size_t ablated = 0;
};

inline std::optional<std::size_t> find_cell(const std::vector<AblationCell>& cells, const AblationCell& c) {
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (cells[i] == c) return i;
  return std::nullopt;
}

inline std::vector<Panel> ablation_panels(const std::vector<AblationCell>& cells, const TrainConfig& base) {
  const AblationCell full{base.lambda, base.n_layers, FusionKind::concat};
  const auto fi = find_cell(cells, full);
  std::vector<Panel> panels;
  if (!fi) return panels;
  const std::pair<const char*, AblationCell> ablations[] = {
      {"contrastive", {0.0, base.n_layers, FusionKind::concat}},
      {"refiner", {base.lambda, 0, FusionKind::concat}},
      {"fusion", {base.lambda, base.n_layers, FusionKind::mean}},
  };
  for (const auto& [name, cell] : ablations)
    if (auto ai = find_cell(cells, cell)) panels.push_back({name, *fi, *ai});
  return panels;
}

inline Json ablation_json(const AblationResult& r, const TrainConfig& base, std::uint64_t hash) {
  Json rows = Json::array();
  for (const auto& run : r.runs) {
    Json row{{"cell", r.cells[run.cell].name()}, {"seed_index", run.seed_index}, {"seed", run.seed}};
    if (run.metrics) row["metrics"] = to_json(*run.metrics);
    else row["error"] = run.error;
    rows.push_back(row);
  }
  Json cells = Json::array();
  for (const auto& cs : r.summary)
    cells.push_back({{"cell", cs.cell.name()},
                     {"lambda", cs.cell.lambda},
                     {"layers", cs.cell.layers},
                     {"fusion", to_string(cs.cell.fusion)},
                     {"completed", cs.completed},
                     {"failed", cs.failed},
                     {"eer", {{"mean", cs.eer.mean}, {"sd", cs.eer.sd}}},
                     {"auc", {{"mean", cs.auc.mean}, {"sd", cs.auc.sd}}},
                     {"acc", {{"mean", cs.acc.mean}, {"sd", cs.acc.sd}}}});
  Json panels = Json::array();
  for (const auto& p : ablation_panels(r.cells, base)) {
    const auto& f = r.summary[p.full];
    const auto& a = r.summary[p.ablated];
    const bool full_wins = f.acc.mean >= a.acc.mean;
    panels.push_back({{"panel", p.name},
                      {"full", f.cell.name()},
                      {"ablated", a.cell.name()},
                      {"ranking", full_wins ? Json{f.cell.name(), a.cell.name()} : Json{a.cell.name(), f.cell.name()}},
                      {"delta_acc", f.acc.mean - a.acc.mean},
                      {"delta_eer", f.eer.mean - a.eer.mean}});
  }
  return Json{{"runs", rows}, {"cells", cells}, {"panels", panels}, {"config_hash", hex64(hash)}};
}

}  // namespace conllm
