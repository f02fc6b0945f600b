#pragma once

// Command-line front end: synth | train | eval | ablate | profile.
//
// Exit codes: 0 success, 2 configuration, 3 I/O or corrupt file, 4 numeric
// abort, 5 shape / compatibility, 1 anything else.

#include "conllm/ablation.hpp"
#include "conllm/config.hpp"
#include "conllm/dataio.hpp"
#include "conllm/errors.hpp"
#include "conllm/metrics.hpp"
#include "conllm/report.hpp"
#include "conllm/synth.hpp"
#include "conllm/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace conllm::cli {

enum ExitCode : int { ok = 0, failure = 1, config = 2, io = 3, numeric = 4, shape = 5 };

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  bool print_default_config = false;

  std::string out;
  std::string data;
  std::string out_dir;
  std::string checkpoint;
  std::string report;
  std::optional<std::size_t> epochs;
  std::size_t seeds = 5;
  std::size_t repetitions = 5;
};

namespace detail {

inline RunConfig resolve_config(const Options& o) {
  RunConfig rc = o.config_path.empty() ? default_run_config() : load_run_config(o.config_path);
  if (o.seed) rc.seed = *o.seed;
  if (o.epochs) rc.train.epochs = *o.epochs;
  if (!o.data.empty()) rc.paths.data = o.data;
  if (!o.out_dir.empty()) rc.paths.out_dir = o.out_dir;
  if (!o.checkpoint.empty()) rc.paths.checkpoint = o.checkpoint;
  if (!o.report.empty()) rc.paths.report = o.report;
  rc.derive_seeds();
  validate(rc);
  return rc;
}

inline const std::string& require_path(const std::string& p, const char* field) {
  if (p.empty()) throw ConfigError(field, "path is required");
  return p;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::string metrics_line(const DetectionMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "EER %7.4f%%  AUC %.6f  ACC %7.4f%%  (real %zu, fake %zu)", 100.0 * m.eer,
                m.auc, 100.0 * m.acc, m.n_real, m.n_fake);
  return buf;
}

inline void print_table(std::ostream& out, const DetectionMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "metric  value\n"
                "EER     %.4f%%\n"
                "AUC     %.6f\n"
                "ACC     %.4f%%\n"
                "n_real  %zu\n"
                "n_fake  %zu\n",
                100.0 * m.eer, m.auc, 100.0 * m.acc, m.n_real, m.n_fake);
  out << buf;
}

inline std::filesystem::path curves_path_for(const std::filesystem::path& report) {
  std::filesystem::path p = report;
  p.replace_extension();
  p += "_curves.csv";
  return p;
}

}  // namespace detail

inline int cmd_synth(const Options& o, std::ostream& out) {
  const RunConfig rc = detail::resolve_config(o);
  const std::string& path = detail::require_path(o.out.empty() ? rc.paths.data : o.out, "out");
  const EmbeddingBundle b = synth_generate(rc.synth);
  write_bundle(b, path);
  if (!o.quiet)
    out << "wrote " << path << ": " << b.count(Label::authentic) << " authentic, " << b.count(Label::manipulated)
        << " manipulated\nprovenance: " << b.provenance << "\n";
  return ok;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  const RunConfig rc = detail::resolve_config(o);
  const EmbeddingBundle data = read_bundle(detail::require_path(rc.paths.data, "paths.data"));
  const std::filesystem::path dir = detail::require_path(rc.paths.out_dir, "paths.out_dir");
  const auto t0 = std::chrono::steady_clock::now();
  const Split parts = split(data, rc.train.eval_fraction, derive_seed(rc.seed, "split"));
  TrainedModel tm = train(parts.train, parts.eval, rc.train, [&](const EpochRecord& r) {
    if (o.quiet) return;
    char buf[128];
    std::snprintf(buf, sizeof buf, "epoch %3zu  lr %.1e  loss %.5f (contrastive %.5f, cls %.5f)", r.epoch, r.lr,
                  r.loss_total, r.loss_contrastive, r.loss_classification);
    out << buf << (r.eval ? "  " + detail::metrics_line(*r.eval) : std::string{}) << "\n";
  });
  const double train_seconds = detail::seconds_since(t0);

  std::filesystem::create_directories(dir);
  save_checkpoint(tm, dir / "model.ckpt");
  write_json(dir / "history.json", history_json(tm.history));
  const DetectionMetrics final_metrics = *tm.history.back().eval;
  Json report = metrics_report(final_metrics, config_hash(rc));
  report["timing"] = {{"train_seconds", train_seconds}};
  write_json(dir / "report.json", report);
  write_text(dir / "curves.csv", curves_csv(make_score_set(predict(tm.model, parts.eval), parts.eval)));
  if (!o.quiet) {
    out << "checkpoint: " << (dir / "model.ckpt").string() << "\n";
    detail::print_table(out, final_metrics);
  }
  return ok;
}

inline int cmd_eval(const Options& o, std::ostream& out) {
  const RunConfig rc = detail::resolve_config(o);
  TrainedModel tm = load_checkpoint(detail::require_path(rc.paths.checkpoint, "paths.checkpoint"));
  const EmbeddingBundle data = read_bundle(detail::require_path(rc.paths.data, "paths.data"));
  if (data.empty()) throw ConfigError("paths.data", "evaluation set is empty");
  check_compatible(tm.model, data);
  const auto t0 = std::chrono::steady_clock::now();
  const ScoreSet scores = make_score_set(predict(tm.model, data), data);
  const double seconds = detail::seconds_since(t0);
  const DetectionMetrics m = evaluate_scores(scores);

  RunConfig hashed = rc;
  hashed.train = tm.config;
  Json report = metrics_report(m, config_hash(hashed));
  report["timing"] = {{"eval_seconds", seconds}};
  if (!rc.paths.report.empty()) {
    write_json(rc.paths.report, report);
    write_text(detail::curves_path_for(rc.paths.report), curves_csv(scores));
  }
  if (!o.quiet) detail::print_table(out, m);
  return ok;
}

inline int cmd_ablate(const Options& o, std::ostream& out) {
  const RunConfig rc = detail::resolve_config(o);
  if (o.seeds < 3) throw ConfigError("seeds", "ablation needs at least 3 seeds");
  const EmbeddingBundle data = read_bundle(detail::require_path(rc.paths.data, "paths.data"));
  const std::filesystem::path dir = detail::require_path(rc.paths.out_dir, "paths.out_dir");
  const auto cells = ablation_grid(rc.train);
  const auto t0 = std::chrono::steady_clock::now();
  const AblationResult r = run_ablation(data, rc, cells, o.seeds, [&](const AblationRun& run, const AblationCell& c) {
    if (o.quiet) return;
    out << "seed " << run.seed_index << "  " << c.name() << "  "
        << (run.metrics ? detail::metrics_line(*run.metrics) : "FAILED: " + run.error) << "\n";
  });
  Json j = ablation_json(r, rc.train, config_hash(rc));
  j["timing"] = {{"total_seconds", detail::seconds_since(t0)}};
  std::filesystem::create_directories(dir);
  write_json(dir / "ablation.json", j);
  if (!o.quiet) {
    char buf[200];
    out << "\ncell                                      runs  EER mean+-sd        ACC mean+-sd\n";
    for (const auto& cs : r.summary) {
      std::snprintf(buf, sizeof buf, "%-40s  %zu/%zu  %6.3f%% +- %6.3f  %6.3f%% +- %6.3f\n", cs.cell.name().c_str(),
                    cs.completed, cs.completed + cs.failed, 100 * cs.eer.mean, 100 * cs.eer.sd, 100 * cs.acc.mean,
                    100 * cs.acc.sd);
      out << buf;
    }
    out << "\npanel        winner (by mean ACC)\n";
    for (const auto& p : j["panels"]) {
      std::snprintf(buf, sizeof buf, "%-12s %s  (dACC %+.4f, dEER %+.4f)\n", p["panel"].get<std::string>().c_str(),
                    p["ranking"][0].get<std::string>().c_str(), p["delta_acc"].get<double>(),
                    p["delta_eer"].get<double>());
      out << buf;
    }
  }
  return ok;
}

inline int cmd_profile(const Options& o, std::ostream& out) {
  const RunConfig rc = detail::resolve_config(o);
  TrainedModel tm = load_checkpoint(detail::require_path(rc.paths.checkpoint, "paths.checkpoint"));
  const EmbeddingBundle data = read_bundle(detail::require_path(rc.paths.data, "paths.data"));
  if (data.empty()) throw ConfigError("paths.data", "profiling set is empty");
  if (o.repetitions < 3) throw ConfigError("repetitions", "must be >= 3");
  const ProfileReport p = profile(tm.model, data, o.repetitions);
  Json j{{"samples", p.samples},
         {"repetitions", p.repetitions},
         {"flop_count", p.flop_count},
         {"flops_per_sample", p.flops_per_sample},
         {"parameter_count", p.parameter_count},
         {"peak_param_bytes", p.peak_param_bytes},
         {"timing", {{"inference_ms_per_sample", p.inference_ms_per_sample}, {"repetition_ms", p.repetition_ms}}}};
  if (!rc.paths.report.empty()) write_json(rc.paths.report, j);
  if (!o.quiet) out << j.dump(2) << "\n";
  return ok;
}

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParameterError*>(&e)) return config;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const CheckpointError*>(&e) || dynamic_cast<const std::filesystem::filesystem_error*>(&e))
    return io;
  if (dynamic_cast<const TrainingError*>(&e) || dynamic_cast<const DomainError*>(&e)) return numeric;
  if (dynamic_cast<const DimensionError*>(&e) || dynamic_cast<const ContractError*>(&e)) return shape;
  return failure;
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Contrastive multimodal deepfake detector on precomputed embeddings"};
  app.require_subcommand(0, 1);
  Options o;
  app.add_option("--config", o.config_path, "JSON run configuration");
  app.add_option("--seed", o.seed, "Override the top-level seed");
  app.add_flag("--quiet", o.quiet, "Suppress progress output");
  app.add_flag("--print-default-config", o.print_default_config, "Print the default configuration and exit");

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON run configuration");
    sub->add_option("--seed", o.seed, "Override the top-level seed");
    sub->add_flag("--quiet", o.quiet, "Suppress progress output");
  };
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic embedding bundle");
  common(synth);
  synth->add_option("--out", o.out, "Output CEB file");

  CLI::App* trainc = app.add_subcommand("train", "Train on a bundle (a held-out split is evaluated)");
  common(trainc);
  trainc->add_option("--data", o.data, "Input CEB file");
  trainc->add_option("--out-dir", o.out_dir, "Directory for checkpoint, history and report");
  trainc->add_option("--epochs", o.epochs, "Override the number of epochs");

  CLI::App* evalc = app.add_subcommand("eval", "Score a bundle with a checkpoint");
  common(evalc);
  evalc->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  evalc->add_option("--data", o.data, "Input CEB file");
  evalc->add_option("--report", o.report, "JSON report path (curves CSV is written alongside)");

  CLI::App* ablate = app.add_subcommand("ablate", "Run the ablation grid over several seeds");
  common(ablate);
  ablate->add_option("--data", o.data, "Input CEB file");
  ablate->add_option("--out-dir", o.out_dir, "Directory for ablation.json");
  ablate->add_option("--seeds", o.seeds, "Number of seeds (>= 3)");
  ablate->add_option("--epochs", o.epochs, "Override the number of epochs");

  CLI::App* prof = app.add_subcommand("profile", "Measure inference cost of a checkpoint");
  common(prof);
  prof->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  prof->add_option("--data", o.data, "Input CEB file");
  prof->add_option("--repetitions", o.repetitions, "Timed repetitions (>= 3)");
  prof->add_option("--report", o.report, "Optional JSON output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "error: " << e.what() << "\n";
    return config;
  }

  try {
    if (o.print_default_config) {
      out << to_json(default_run_config()).dump(2) << "\n";
      return ok;
    }
    if (synth->parsed()) return cmd_synth(o, out);
    if (trainc->parsed()) return cmd_train(o, out);
    if (evalc->parsed()) return cmd_eval(o, out);
    if (ablate->parsed()) return cmd_ablate(o, out);
    if (prof->parsed()) return cmd_profile(o, out);
    err << app.help();
    return config;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace conllm::cli
