#pragma once

// Run configuration: training hyperparameters, synthetic-data settings and
// paths, with a strict JSON schema (unknown keys are rejected) and a
// canonical serialization used for hashing and checkpoints.

#include "conllm/contrastive.hpp"
#include "conllm/crc64.hpp"
#include "conllm/errors.hpp"
#include "conllm/fusion.hpp"
#include "conllm/model.hpp"
#include "conllm/rng.hpp"
#include "conllm/synth.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <initializer_list>
#include <limits>
#include <string>
#include <string_view>

namespace conllm {

using Json = nlohmann::json;

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  double momentum = 0.9;  // Adam beta1
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double dropout = 0.5;
  double decay_factor = 0.1;
  std::size_t decay_every = 10;
  double lambda = 0.5;
  double temperature = 0.07;
  std::size_t shared_dim = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 4;
  bool normalize_projection = true;
  FusionStrategy fusion;
  PairPolicy pair_policy = PairPolicy::same_sample_authentic;
  DenominatorMode denominator = DenominatorMode::standard;
  // Leading epochs optimized on the contrastive term alone (two-phase mode).
  std::size_t warmup_epochs = 0;
  // Share of a single input bundle held out for per-epoch evaluation.
  double eval_fraction = 0.2;
  std::uint64_t seed = 0;

  ContrastiveConfig contrastive() const { return {temperature, denominator, pair_policy}; }

  ModelConfig model(const Dims& dims) const {
    return {dims, shared_dim, n_heads, n_layers, ffn_mult, normalize_projection, fusion};
  }
};

struct PathConfig {
  std::string data;
  std::string out_dir;
  std::string checkpoint;
  std::string report;
};

// Everything one invocation needs. `seed` is the single source of
// randomness; the synth and train seeds are derived from it.
struct RunConfig {
  std::uint64_t seed = 0;
  SynthConfig synth;
  TrainConfig train;
  PathConfig paths;

  // Propagates the top-level seed into the sections.
  void derive_seeds() {
    synth.seed = derive_seed(seed, "synth");
    train.seed = derive_seed(seed, "train");
  }
};

inline std::string_view to_string(PairPolicy p) {
  return p == PairPolicy::same_sample_authentic ? "same_sample_authentic" : "supervised_label";
}

inline std::string_view to_string(DenominatorMode d) {
  return d == DenominatorMode::standard ? "standard" : "paper_literal";
}

inline void validate(const TrainConfig& c) {
  auto positive = [](double v, const char* f) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(f, "must be a positive finite number");
  };
  positive(c.lr, "train.lr");
  if (c.batch_size < 2) throw ConfigError("train.batch_size", "must be >= 2");
  if (c.epochs < 1) throw ConfigError("train.epochs", "must be >= 1");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("train.momentum", "must lie in [0, 1)");
  if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
  positive(c.eps, "train.eps");
  if (!(c.weight_decay >= 0.0) || !std::isfinite(c.weight_decay))
    throw ConfigError("train.weight_decay", "must be finite and >= 0");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw ConfigError("train.dropout", "must lie in [0, 1)");
  positive(c.decay_factor, "train.decay_factor");
  if (c.decay_every < 1) throw ConfigError("train.decay_every", "must be >= 1");
  if (!(c.lambda >= 0.0 && c.lambda <= 1.0)) throw ConfigError("train.lambda", "must lie in [0, 1]");
  positive(c.temperature, "train.temperature");
  if (c.shared_dim < 2) throw ConfigError("train.shared_dim", "must be >= 2");
  if (c.n_heads < 1 || c.shared_dim % c.n_heads != 0)
    throw ConfigError("train.refiner.heads", "must divide shared_dim");
  if (c.ffn_mult < 1) throw ConfigError("train.refiner.ffn_mult", "must be >= 1");
  if (c.warmup_epochs >= c.epochs && c.warmup_epochs > 0)
    throw ConfigError("train.warmup_epochs", "must be smaller than epochs");
  if (!(c.eval_fraction > 0.0 && c.eval_fraction < 1.0))
    throw ConfigError("train.eval_fraction", "must lie in (0, 1)");
  try {
    validate(c.fusion);
  } catch (const ParameterError& e) {
    throw ConfigError("train.fusion.weights", e.what());
  }
}

inline void validate_synth(const SynthConfig& c) {
  if (c.n_real < 1) throw ConfigError("synth.n_real", "must be >= 1");
  if (c.n_fake < 1) throw ConfigError("synth.n_fake", "must be >= 1");
  if (c.latent_dim < 1) throw ConfigError("synth.latent_dim", "must be >= 1");
  for (Modality m : kModalities) {
    if (c.dims[index_of(m)] == 0)
      throw ConfigError("synth.dims." + std::string(to_string(m)), "must be positive");
    if (c.dims[index_of(m)] < c.latent_dim)
      throw ConfigError("synth.dims." + std::string(to_string(m)), "must be >= latent_dim");
  }
  if (!(c.noise_sigma >= 0.0) || !std::isfinite(c.noise_sigma))
    throw ConfigError("synth.noise_sigma", "must be finite and >= 0");
  if (!std::isfinite(c.fake_shift)) throw ConfigError("synth.fake_shift", "must be finite");
}

inline void validate(const RunConfig& c) {
  validate_synth(c.synth);
  validate(c.train);
}

// ---------------------------------------------------------------------------
// JSON

inline Json to_json(const SynthConfig& c) {
  return Json{{"n_real", c.n_real},
              {"n_fake", c.n_fake},
              {"latent_dim", c.latent_dim},
              {"dims", {{"audio", c.dims[0]}, {"video", c.dims[1]}, {"audiovisual", c.dims[2]}}},
              {"noise_sigma", c.noise_sigma},
              {"mode", to_string(c.mode)},
              {"fake_shift", c.fake_shift}};
}

inline Json to_json(const TrainConfig& c) {
  return Json{{"lr", c.lr},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"momentum", c.momentum},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"weight_decay", c.weight_decay},
              {"dropout", c.dropout},
              {"activation", "relu"},
              {"optimizer", "adam"},
              {"decay_factor", c.decay_factor},
              {"decay_every", c.decay_every},
              {"lambda", c.lambda},
              {"temperature", c.temperature},
              {"shared_dim", c.shared_dim},
              {"refiner", {{"layers", c.n_layers}, {"heads", c.n_heads}, {"ffn_mult", c.ffn_mult}}},
              {"normalize_projection", c.normalize_projection},
              {"fusion",
               {{"kind", to_string(c.fusion.kind)},
                {"weights", {c.fusion.weights[0], c.fusion.weights[1], c.fusion.weights[2]}}}},
              {"pair_policy", to_string(c.pair_policy)},
              {"denominator_mode", to_string(c.denominator)},
              {"warmup_epochs", c.warmup_epochs},
              {"eval_fraction", c.eval_fraction}};
}

inline Json to_json(const PathConfig& p) {
  return Json{{"data", p.data}, {"out_dir", p.out_dir}, {"checkpoint", p.checkpoint}, {"report", p.report}};
}

inline Json to_json(const RunConfig& c) {
  return Json{{"seed", c.seed}, {"synth", to_json(c.synth)}, {"train", to_json(c.train)},
              {"paths", to_json(c.paths)}};
}

// Keys are emitted sorted (std::map objects) and doubles round-trip exactly.
inline std::string canonical(const Json& j) { return j.dump(); }

// Hash of everything that influences results; paths are excluded.
inline std::uint64_t config_hash(const RunConfig& c) {
  Json j = to_json(c);
  j.erase("paths");
  return crc64(std::string_view(canonical(j)));
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace detail {

class Reader {
 public:
  Reader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  void allow(std::initializer_list<std::string_view> keys) const {
    for (const auto& [k, v] : obj_.items()) {
      bool known = false;
      for (std::string_view a : keys) known = known || k == a;
      if (!known) throw ConfigError(field(k), "unknown key");
    }
  }

  std::string field(std::string_view k) const {
    return path_.empty() ? std::string(k) : path_ + "." + std::string(k);
  }

  bool has(std::string_view k) const { return obj_.contains(std::string(k)); }
  const Json& at(std::string_view k) const { return obj_.at(std::string(k)); }

  void number(std::string_view k, double& out) const {
    if (!has(k)) return;
    const Json& v = at(k);
    if (!v.is_number()) throw ConfigError(field(k), "expected a number");
    out = v.get<double>();
  }

  template <typename U>
  void count(std::string_view k, U& out) const {
    if (!has(k)) return;
    const Json& v = at(k);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
      throw ConfigError(field(k), "expected a non-negative integer");
    const auto raw = v.get<std::uint64_t>();
    if (raw > std::numeric_limits<U>::max()) throw ConfigError(field(k), "value out of range");
    out = static_cast<U>(raw);
  }

  void boolean(std::string_view k, bool& out) const {
    if (!has(k)) return;
    if (!at(k).is_boolean()) throw ConfigError(field(k), "expected true or false");
    out = at(k).get<bool>();
  }

  void string(std::string_view k, std::string& out) const {
    if (!has(k)) return;
    if (!at(k).is_string()) throw ConfigError(field(k), "expected a string");
    out = at(k).get<std::string>();
  }

  template <typename E>
  void choice(std::string_view k, E& out, std::initializer_list<std::pair<std::string_view, E>> options) const {
    if (!has(k)) return;
    std::string s;
    string(k, s);
    std::string names;
    for (const auto& [name, value] : options) {
      if (s == name) {
        out = value;
        return;
      }
      names += (names.empty() ? "" : ", ") + std::string(name);
    }
    throw ConfigError(field(k), "'" + s + "' is not one of: " + names);
  }

 private:
  const Json& obj_;
  std::string path_;
};

}  // namespace detail

inline void from_json(const Json& j, SynthConfig& c, const std::string& path = "synth") {
  detail::Reader r(j, path);
  r.allow({"n_real", "n_fake", "latent_dim", "dims", "noise_sigma", "mode", "fake_shift"});
  r.count("n_real", c.n_real);
  r.count("n_fake", c.n_fake);
  r.count("latent_dim", c.latent_dim);
  if (r.has("dims")) {
    detail::Reader d(r.at("dims"), r.field("dims"));
    d.allow({"audio", "video", "audiovisual"});
    d.count("audio", c.dims[0]);
    d.count("video", c.dims[1]);
    d.count("audiovisual", c.dims[2]);
  }
  r.number("noise_sigma", c.noise_sigma);
  r.choice("mode", c.mode, {{"easy", SynthMode::easy}, {"hard", SynthMode::hard}});
  r.number("fake_shift", c.fake_shift);
}

inline void from_json(const Json& j, TrainConfig& c, const std::string& path = "train") {
  detail::Reader r(j, path);
  r.allow({"lr", "batch_size", "epochs", "momentum", "beta2", "eps", "weight_decay", "dropout", "activation",
           "optimizer", "decay_factor", "decay_every", "lambda", "temperature", "shared_dim", "refiner",
           "normalize_projection", "fusion", "pair_policy", "denominator_mode", "warmup_epochs",
           "eval_fraction"});
  r.number("lr", c.lr);
  r.count("batch_size", c.batch_size);
  r.count("epochs", c.epochs);
  r.number("momentum", c.momentum);
  r.number("beta2", c.beta2);
  r.number("eps", c.eps);
  r.number("weight_decay", c.weight_decay);
  r.number("dropout", c.dropout);
  int fixed = 0;
  r.choice("activation", fixed, {{"relu", 0}});
  r.choice("optimizer", fixed, {{"adam", 0}});
  r.number("decay_factor", c.decay_factor);
  r.count("decay_every", c.decay_every);
  r.number("lambda", c.lambda);
  r.number("temperature", c.temperature);
  r.count("shared_dim", c.shared_dim);
  if (r.has("refiner")) {
    detail::Reader f(r.at("refiner"), r.field("refiner"));
    f.allow({"layers", "heads", "ffn_mult"});
    f.count("layers", c.n_layers);
    f.count("heads", c.n_heads);
    f.count("ffn_mult", c.ffn_mult);
  }
  r.boolean("normalize_projection", c.normalize_projection);
  if (r.has("fusion")) {
    detail::Reader f(r.at("fusion"), r.field("fusion"));
    f.allow({"kind", "weights"});
    f.choice("kind", c.fusion.kind,
             {{"concat", FusionKind::concat}, {"mean", FusionKind::mean}, {"weighted", FusionKind::weighted}});
    if (f.has("weights")) {
      const Json& w = f.at("weights");
      if (!w.is_array() || w.size() != kNumModalities)
        throw ConfigError(f.field("weights"), "expected an array of 3 numbers");
      for (std::size_t i = 0; i < kNumModalities; ++i) {
        if (!w[i].is_number()) throw ConfigError(f.field("weights"), "expected an array of 3 numbers");
        c.fusion.weights[i] = w[i].get<double>();
      }
    }
  }
  r.choice("pair_policy", c.pair_policy,
           {{"same_sample_authentic", PairPolicy::same_sample_authentic},
            {"supervised_label", PairPolicy::supervised_label}});
  r.choice("denominator_mode", c.denominator,
           {{"standard", DenominatorMode::standard}, {"paper_literal", DenominatorMode::paper_literal}});
  r.count("warmup_epochs", c.warmup_epochs);
  r.number("eval_fraction", c.eval_fraction);
}

inline void from_json(const Json& j, PathConfig& p, const std::string& path = "paths") {
  detail::Reader r(j, path);
  r.allow({"data", "out_dir", "checkpoint", "report"});
  r.string("data", p.data);
  r.string("out_dir", p.out_dir);
  r.string("checkpoint", p.checkpoint);
  r.string("report", p.report);
}

// Parses and validates a run configuration; missing keys keep their defaults.
inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  detail::Reader r(j, "");
  r.allow({"seed", "synth", "train", "paths"});
  r.count("seed", c.seed);
  if (r.has("synth")) from_json(r.at("synth"), c.synth);
  if (r.has("train")) from_json(r.at("train"), c.train);
  if (r.has("paths")) from_json(r.at("paths"), c.paths);
  c.derive_seeds();
  validate(c);
  return c;
}

inline RunConfig parse_run_config(std::string_view text) {
  Json j = Json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("<root>", "not valid JSON");
  return run_config_from_json(j);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  return parse_run_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

inline RunConfig default_run_config() {
  RunConfig c;
  c.derive_seeds();
  return c;
}

}  // namespace conllm
