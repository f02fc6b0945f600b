#pragma once

// Training loop, checkpoints and the cost profile of a trained model.

#include "conllm/config.hpp"
#include "conllm/contrastive.hpp"
#include "conllm/crc64.hpp"
#include "conllm/dataio.hpp"
#include "conllm/errors.hpp"
#include "conllm/metrics.hpp"
#include "conllm/model.hpp"
#include "conllm/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace conllm {

// base_lr * decay_factor ^ floor(epoch / decay_every), with the factor applied
// once per completed period (so 1e-3 decays to exactly 1e-4, then 1e-5).
inline double lr_schedule(double base_lr, std::size_t epoch, double decay_factor, std::size_t decay_every) {
  if (decay_every == 0) throw ParameterError("lr_schedule: decay_every must be >= 1");
  double lr = base_lr;
  for (std::size_t k = epoch / decay_every; k > 0; --k) lr *= decay_factor;
  return lr;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  // Batch means.
  double loss_total = 0.0;
  double loss_contrastive = 0.0;
  double loss_classification = 0.0;
  std::optional<DetectionMetrics> eval;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainedModel {
  Model model;
  TrainConfig config;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline DetectionMetrics evaluate(Model& model, const EmbeddingBundle& data) {
  if (data.empty()) throw MetricError("evaluate: empty bundle");
  return evaluate_scores(make_score_set(predict(model, data), data));
}

// Loss terms of one batch, recorded on `tape`.
struct BatchLoss {
  Var total;
  Var contrastive;
  Var classification;
};

// Forward pass plus losses for one batch. A batch holding a single sample has
// no in-batch partners, so its contrastive term is zero.
inline BatchLoss batch_loss(Tape& tape, Model& model, const EmbeddingBundle& data, const Batch& batch,
                            const TrainConfig& cfg, double lambda, CounterRng& rng) {
  ForwardResult fw = forward(tape, model, data, batch, {true, cfg.dropout, &rng, nullptr});
  BatchLoss out;
  if (batch.size() >= 2)
    out.contrastive = contrastive_loss(fw.tokens, build_pairs(fw.labels, fw.presence, cfg.pair_policy),
                                       cfg.contrastive());
  else
    out.contrastive = tape.constant(Tensor::scalar(0.0));
  std::vector<double> y;
  y.reserve(fw.labels.size());
  for (Label l : fw.labels) y.push_back(l == Label::manipulated ? 1.0 : 0.0);
  out.classification = bce_with_logits(fw.logits, y);
  out.total = total_loss(out.contrastive, out.classification, lambda);
  return out;
}

inline TrainedModel train(const EmbeddingBundle& train_data, const EmbeddingBundle& eval_data,
                          const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  validate(cfg);
  if (train_data.empty()) throw ContractError("train: empty training bundle");
  if (train_data.count(Label::authentic) == 0 || train_data.count(Label::manipulated) == 0)
    throw ContractError("train: training bundle must contain both authentic and manipulated samples");
  if (!eval_data.empty() && eval_data.dims != train_data.dims)
    throw DimensionError("train: evaluation bundle dims differ from training bundle dims");

  TrainedModel tm;
  tm.config = cfg;
  tm.model = init_model(cfg.model(train_data.dims), derive_seed(cfg.seed, "model"));
  check_compatible(tm.model, train_data);

  auto params = tm.model.parameters();
  AdamState adam;
  adam.hyper = {cfg.momentum, cfg.beta2, cfg.eps};
  const std::uint64_t batch_seed = derive_seed(cfg.seed, "train.batches");

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_schedule(cfg.lr, epoch, cfg.decay_factor, cfg.decay_every);
    const double lambda = epoch < cfg.warmup_epochs ? 1.0 : cfg.lambda;
    const auto batches = batch_iter(train_data, cfg.batch_size, batch_seed, epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      CounterRng rng(derive_seed(derive_seed(cfg.seed, "train.dropout", epoch), "batch", bi));
      Tape tape;
      BatchLoss loss = batch_loss(tape, tm.model, train_data, batches[bi], cfg, lambda, rng);
      const double total = loss.total.value().item();
      if (!std::isfinite(total))
        throw TrainingError("non-finite loss", static_cast<long>(epoch), static_cast<long>(bi));
      for (Parameter* p : params) p->zero_grad();
      tape.backward(loss.total);
      try {
        adam_step(params, adam, rec.lr, cfg.weight_decay);
      } catch (const TrainingError& e) {
        throw TrainingError(e.what(), static_cast<long>(epoch), static_cast<long>(bi));
      }
      rec.loss_total += total;
      rec.loss_contrastive += loss.contrastive.value().item();
      rec.loss_classification += loss.classification.value().item();
    }
    const double nb = static_cast<double>(batches.size());
    rec.loss_total /= nb;
    rec.loss_contrastive /= nb;
    rec.loss_classification /= nb;
    if (!eval_data.empty()) rec.eval = evaluate(tm.model, eval_data);
    tm.history.push_back(rec);
    if (on_epoch) on_epoch(tm.history.back());
  }
  return tm;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::string_view kCheckpointMagic = "CCKP";
inline constexpr std::uint8_t kCheckpointVersion = 1;

inline Json checkpoint_header(const TrainedModel& tm) {
  const Dims& d = tm.model.config.dims;
  return Json{{"train", to_json(tm.config)},
              {"seed", tm.config.seed},
              {"dims", {{"audio", d[0]}, {"video", d[1]}, {"audiovisual", d[2]}}}};
}

inline std::vector<std::uint8_t> encode_checkpoint(TrainedModel& tm) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u8(kCheckpointVersion);
  const std::string header = canonical(checkpoint_header(tm));
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.bytes(header);
  for (const Parameter* p : tm.model.parameters()) {
    if (p->name.size() > 0xFFFF) throw CheckpointError("parameter name too long: " + p->name);
    w.u16(static_cast<std::uint16_t>(p->name.size()));
    w.bytes(p->name);
    const Shape& s = p->value.shape();
    w.u8(static_cast<std::uint8_t>(s.size()));
    for (std::size_t dim : s) w.u32(static_cast<std::uint32_t>(dim));
    for (double v : p->value.data()) w.f64(v);
  }
  w.u64(crc64(w.buffer()));
  return std::move(w.buffer());
}

inline TrainedModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
  try {
    if (bytes.size() < kCheckpointMagic.size() + 1 + 4 + 8) throw CheckpointError("checkpoint: file too short");
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + body, sizeof stored);
    if (stored != crc64(bytes.first(body))) throw CheckpointError("checkpoint: CRC mismatch");

    detail::ByteReader r(bytes, body);
    if (r.string(kCheckpointMagic.size(), "magic") != kCheckpointMagic)
      throw CheckpointError("checkpoint: bad magic");
    const auto version = r.read<std::uint8_t>("version");
    if (version != kCheckpointVersion)
      throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    const std::string header_text = r.string(r.read<std::uint32_t>("header length"), "header");
    const Json header = Json::parse(header_text, nullptr, false);
    if (header.is_discarded() || !header.is_object() || !header.contains("train") || !header.contains("dims"))
      throw CheckpointError("checkpoint: malformed header");

    TrainConfig cfg;
    from_json(header.at("train"), cfg);
    cfg.seed = header.at("seed").get<std::uint64_t>();
    validate(cfg);
    const Json& jd = header.at("dims");
    const Dims dims{jd.at("audio").get<std::uint32_t>(), jd.at("video").get<std::uint32_t>(),
                    jd.at("audiovisual").get<std::uint32_t>()};

    TrainedModel tm;
    tm.config = cfg;
    tm.model = init_model(cfg.model(dims), 0);
    for (Parameter* p : tm.model.parameters()) {
      const std::string name = r.string(r.read<std::uint16_t>("name length"), "parameter name");
      if (name != p->name)
        throw CheckpointError("checkpoint: expected parameter '" + p->name + "', found '" + name + "'");
      Shape s(r.read<std::uint8_t>("rank"));
      for (auto& dim : s) dim = r.read<std::uint32_t>("dimension");
      if (s != p->value.shape())
        throw CheckpointError("checkpoint: parameter '" + name + "' has shape " + shape_str(s) + ", expected " +
                              shape_str(p->value.shape()));
      for (double& v : p->value.storage()) v = r.read<double>("parameter value");
      p->zero_grad();
    }
    if (r.offset() != body) throw CheckpointError("checkpoint: trailing bytes after parameters");
    return tm;
  } catch (const FormatError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: invalid config: ") + e.what());
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  }
}

inline void save_checkpoint(TrainedModel& tm, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_checkpoint(tm));
}

inline TrainedModel load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Profile
//
// Analytic operation counts for eval-mode inference. A matrix product
// [m x k][k x n] costs 2mkn; every other elementwise arithmetic step or
// transcendental costs 1 per element it produces.

namespace flops {

inline std::uint64_t affine(std::uint64_t in, std::uint64_t out) { return 2 * in * out + out; }

inline std::uint64_t layer_norm(std::uint64_t d) {
  // mean (d), centre (d), square (d), variance sum (d), rsqrt (1), scale (d), gamma (d), beta (d)
  return 7 * d + 1;
}

inline std::uint64_t classifier(std::uint64_t d_in, std::uint64_t hidden = kClassifierHidden) {
  // hidden affine, relu, output affine, sigmoid
  return affine(d_in, hidden) + hidden + affine(hidden, 1) + 1;
}

// Per sample.
inline std::uint64_t model(const ModelConfig& c) {
  const std::uint64_t d = c.shared_dim, t = kNumModalities, h = c.n_heads;
  std::uint64_t n = 0;
  for (std::uint32_t dm : c.dims) {
    n += 2 * dm * d + d;                          // projection
    if (c.normalize_projection) n += 3 * d + 1;   // square, sum, sqrt, divide
  }
  if (c.n_layers > 0) n += t * d;                 // type embeddings
  const std::uint64_t hidden = c.ffn_mult * d;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    n += t * layer_norm(d);
    n += t * 3 * (2 * d * d);                     // q, k, v
    n += 2 * t * t * d + h * t * t;               // scores and scaling, summed over heads
    n += h * t * 3 * t;                           // softmax: exp, sum, divide
    n += 2 * t * t * d;                           // weights times values
    n += t * (2 * d * d) + t * d;                 // output projection, residual
    n += t * layer_norm(d);
    n += t * (affine(d, hidden) + hidden + affine(hidden, d) + d);  // ffn, relu, residual
  }
  switch (c.fusion.kind) {
    case FusionKind::concat: break;
    case FusionKind::mean:
    case FusionKind::weighted: n += 5 * d; break;  // three scalings, two sums
  }
  n += classifier(fused_width(c.fusion, d));
  return n;
}

}  // namespace flops

struct ProfileReport {
  std::size_t samples = 0;
  std::size_t repetitions = 0;
  double inference_ms_per_sample = 0.0;  // median over repetitions
  std::vector<double> repetition_ms;     // raw wall-clock per repetition
  std::uint64_t flop_count = 0;          // whole bundle, one pass
  std::uint64_t flops_per_sample = 0;
  std::size_t parameter_count = 0;
  std::size_t peak_param_bytes = 0;
};

inline ProfileReport profile(Model& model, const EmbeddingBundle& data, std::size_t repetitions) {
  if (repetitions < 3) throw ParameterError("profile: repetitions must be >= 3");
  if (data.empty()) throw ContractError("profile: empty bundle");
  check_compatible(model, data);
  ProfileReport r;
  r.samples = data.size();
  r.repetitions = repetitions;
  r.flops_per_sample = flops::model(model.config);
  r.flop_count = r.flops_per_sample * data.size();
  r.parameter_count = model.parameter_count();
  r.peak_param_bytes = r.parameter_count * sizeof(double);
  for (std::size_t i = 0; i < repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto scores = predict(model, data);
    const auto t1 = std::chrono::steady_clock::now();
    if (scores.size() != data.size()) throw ContractError("profile: prediction count mismatch");
    r.repetition_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  auto sorted = r.repetition_ms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  const double median = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  r.inference_ms_per_sample = median / static_cast<double>(data.size());
  return r;
}

}  // namespace conllm
