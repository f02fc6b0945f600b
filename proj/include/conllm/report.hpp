#pragma once

// JSON / CSV emission for metrics, curves and training history.
// Wall-clock figures only ever go under a "timing" key so that the rest of a
// report is byte-identical between runs.

#include "conllm/config.hpp"
#include "conllm/dataio.hpp"
#include "conllm/metrics.hpp"
#include "conllm/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace conllm {

inline Json to_json(const DetectionMetrics& m) {
  return Json{{"eer", m.eer}, {"auc", m.auc}, {"acc", m.acc}, {"n_real", m.n_real}, {"n_fake", m.n_fake}};
}

inline Json metrics_report(const DetectionMetrics& m, std::uint64_t hash) {
  Json j = to_json(m);
  j["config_hash"] = hex64(hash);
  return j;
}

inline Json to_json(const EpochRecord& r) {
  Json j{{"epoch", r.epoch},
         {"lr", r.lr},
         {"loss_total", r.loss_total},
         {"loss_contrastive", r.loss_contrastive},
         {"loss_classification", r.loss_classification}};
  j["eval"] = r.eval ? to_json(*r.eval) : Json(nullptr);
  return j;
}

inline Json history_json(const std::vector<EpochRecord>& history) {
  Json rows = Json::array();
  for (const auto& r : history) rows.push_back(to_json(r));
  return rows;
}

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// One row per operating point: threshold, fpr, tpr, fnr. The first row is the
// "+inf" threshold at which nothing is flagged.
inline std::string curves_csv(const ScoreSet& scores) {
  const auto roc = roc_points(scores);
  const auto det = det_points(scores);
  std::string out = "threshold,fpr,tpr,fnr\n";
  for (std::size_t i = 0; i < roc.size(); ++i)
    out += format_double(roc[i].threshold) + "," + format_double(roc[i].x) + "," + format_double(roc[i].y) +
           "," + format_double(det[i].y) + "\n";
  return out;
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  detail::write_file_bytes(
      path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

}  // namespace conllm
