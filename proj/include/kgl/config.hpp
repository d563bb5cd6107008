#pragma once

// Training and experiment configuration with strict JSON conversion:
// unknown keys and wrong types are ConfigErrors.

#include <cstdint>
#include <set>
#include <string>

#include "json.hpp"
#include "kgl/losses.hpp"

namespace kgl {

using json = nlohmann::json;

enum class Schedule { none, cosine, simulated_annealing };

inline Schedule parse_schedule(const std::string& s) {
  if (s == "none") return Schedule::none;
  if (s == "cosine") return Schedule::cosine;
  if (s == "simulated_annealing") return Schedule::simulated_annealing;
  throw ConfigError("unknown schedule '" + s + "' (expected none, cosine or simulated_annealing)");
}
inline const char* to_string(Schedule s) {
  switch (s) {
    case Schedule::none: return "none";
    case Schedule::cosine: return "cosine";
    case Schedule::simulated_annealing: return "simulated_annealing";
  }
  return "?";
}

enum class ScoreHead { metric, descriptor };

inline ScoreHead parse_score_head(const std::string& s) {
  if (s == "metric") return ScoreHead::metric;
  if (s == "descriptor") return ScoreHead::descriptor;
  throw ConfigError("unknown score head '" + s + "' (expected metric or descriptor)");
}
inline const char* to_string(ScoreHead h) { return h == ScoreHead::metric ? "metric" : "descriptor"; }

struct TrainConfig {
  std::size_t batch_size = 256;
  int epochs = 100;
  double lr_feature = 5e-3;
  double lr_metric_branch = 5e-5;
  LossWeights weights;
  Schedule schedule = Schedule::none;
  std::uint64_t seed = 0;
  bool use_hnsm = true;
  bool use_fgl = true;
  /// Mine in both directions of the distance matrix instead of columns only.
  bool bidirectional_mining = false;
  DescriptorLossOptions descriptor_loss;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0;
  bool flip = false;
  ArchitectureConfig architecture = preset("C3");

  void validate() const {
    architecture.validate();
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (!(lr_feature > 0) || !(lr_metric_branch > 0)) throw ConfigError("learning rates must be positive");
    if (!(weights.alpha >= 0) || !(weights.beta >= 0)) throw ConfigError("loss weights must be non-negative");
    if (!(clip_norm >= 0)) throw ConfigError("clip_norm must be non-negative");
    if (!(descriptor_loss.margin > 0) || !(descriptor_loss.hybrid_margin > 0))
      throw ConfigError("descriptor loss margins must be positive");
    if (architecture.metric_only && use_hnsm)
      throw ConfigError("use_hnsm needs the descriptor network (architecture.metric_only is set)");
  }
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type (" + j.at(key).dump() + ")");
  }
}

inline void read_string_enum(const json& j, const char* key, const std::string& where, auto parse) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_string()) throw ConfigError(where + "." + key + ": expected a string");
  parse(j.at(key).get<std::string>());
}

}  // namespace detail

inline json to_json(const ArchitectureConfig& c) {
  return json{{"preset", c.preset},
              {"metric_structure", to_string(c.metric_structure)},
              {"descriptor_structure", to_string(c.descriptor_structure)},
              {"sharing", to_string(c.sharing)},
              {"shared_layer_count", c.shared_layer_count},
              {"dominant", to_string(c.dominant)},
              {"descriptor_dim", c.descriptor_dim},
              {"use_eca", c.use_eca},
              {"eca_kernel", c.eca_kernel},
              {"metric_only", c.metric_only},
              {"width", c.width}};
}

/// A "preset" key seeds the config; remaining keys override it.
inline ArchitectureConfig architecture_from_json(const json& j, const std::string& where = "architecture") {
  detail::reject_unknown(j,
                         {"preset", "metric_structure", "descriptor_structure", "sharing", "shared_layer_count",
                          "dominant", "descriptor_dim", "use_eca", "eca_kernel", "metric_only", "width"},
                         where);
  ArchitectureConfig c;
  c.preset.clear();
  if (j.contains("preset")) {
    std::string p;
    detail::read(j, "preset", p, where);
    if (!p.empty()) c = preset(p);
  }
  detail::read_string_enum(j, "metric_structure", where, [&](const std::string& s) { c.metric_structure = parse_structure(s); });
  detail::read_string_enum(j, "descriptor_structure", where,
                           [&](const std::string& s) { c.descriptor_structure = parse_structure(s); });
  detail::read_string_enum(j, "sharing", where, [&](const std::string& s) { c.sharing = parse_sharing(s); });
  detail::read_string_enum(j, "dominant", where, [&](const std::string& s) { c.dominant = parse_dominant(s); });
  detail::read(j, "shared_layer_count", c.shared_layer_count, where);
  detail::read(j, "descriptor_dim", c.descriptor_dim, where);
  detail::read(j, "use_eca", c.use_eca, where);
  detail::read(j, "eca_kernel", c.eca_kernel, where);
  detail::read(j, "metric_only", c.metric_only, where);
  detail::read(j, "width", c.width, where);
  c.validate();
  return c;
}

inline json to_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"lr_feature", c.lr_feature},
              {"lr_metric_branch", c.lr_metric_branch},
              {"weights", {{"alpha", c.weights.alpha}, {"beta", c.weights.beta}}},
              {"schedule", to_string(c.schedule)},
              {"seed", c.seed},
              {"use_hnsm", c.use_hnsm},
              {"use_fgl", c.use_fgl},
              {"bidirectional_mining", c.bidirectional_mining},
              {"descriptor_loss",
               {{"kind", to_string(c.descriptor_loss.kind)},
                {"margin", c.descriptor_loss.margin},
                {"hybrid_alpha", c.descriptor_loss.hybrid_alpha},
                {"hybrid_margin", c.descriptor_loss.hybrid_margin}}},
              {"clip_norm", c.clip_norm},
              {"flip", c.flip},
              {"architecture", to_json(c.architecture)}};
}

/// Applies the keys of `j` on top of `c`.
inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}, const std::string& where = "train") {
  detail::reject_unknown(j,
                         {"batch_size", "epochs", "lr_feature", "lr_metric_branch", "weights", "schedule", "seed",
                          "use_hnsm", "use_fgl", "bidirectional_mining", "descriptor_loss", "clip_norm", "flip",
                          "architecture"},
                         where);
  detail::read(j, "batch_size", c.batch_size, where);
  detail::read(j, "epochs", c.epochs, where);
  detail::read(j, "lr_feature", c.lr_feature, where);
  detail::read(j, "lr_metric_branch", c.lr_metric_branch, where);
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    detail::reject_unknown(w, {"alpha", "beta"}, where + ".weights");
    detail::read(w, "alpha", c.weights.alpha, where + ".weights");
    detail::read(w, "beta", c.weights.beta, where + ".weights");
  }
  detail::read_string_enum(j, "schedule", where, [&](const std::string& s) { c.schedule = parse_schedule(s); });
  detail::read(j, "seed", c.seed, where);
  detail::read(j, "use_hnsm", c.use_hnsm, where);
  detail::read(j, "use_fgl", c.use_fgl, where);
  detail::read(j, "bidirectional_mining", c.bidirectional_mining, where);
  if (j.contains("descriptor_loss")) {
    const auto& d = j.at("descriptor_loss");
    const std::string w = where + ".descriptor_loss";
    detail::reject_unknown(d, {"kind", "margin", "hybrid_alpha", "hybrid_margin"}, w);
    detail::read_string_enum(d, "kind", w, [&](const std::string& s) { c.descriptor_loss.kind = parse_descriptor_loss(s); });
    detail::read(d, "margin", c.descriptor_loss.margin, w);
    detail::read(d, "hybrid_alpha", c.descriptor_loss.hybrid_alpha, w);
    detail::read(d, "hybrid_margin", c.descriptor_loss.hybrid_margin, w);
  }
  detail::read(j, "clip_norm", c.clip_norm, where);
  detail::read(j, "flip", c.flip, where);
  if (j.contains("architecture")) c.architecture = architecture_from_json(j.at("architecture"), where + ".architecture");
  c.validate();
  return c;
}

/// Everything one CLI run needs.
struct ExperimentConfig {
  TrainConfig train;
  std::string train_data;
  std::string eval_data;
  ScoreHead head = ScoreHead::metric;
  std::string output;

  void validate() const { train.validate(); }
};

inline json to_json(const ExperimentConfig& e) {
  json t = to_json(e.train);
  json arch = t["architecture"];
  t.erase("architecture");
  return json{{"architecture", arch},
              {"train", t},
              {"data", {{"train", e.train_data}, {"eval", e.eval_data}}},
              {"eval", {{"head", to_string(e.head)}}},
              {"output", e.output}};
}

inline ExperimentConfig experiment_from_json(const json& j) {
  detail::reject_unknown(j, {"architecture", "train", "data", "eval", "output"}, "config");
  ExperimentConfig e;
  if (j.contains("train")) {
    if (j.at("train").is_object() && j.at("train").contains("architecture"))
      throw ConfigError("config.train: put the architecture under the top-level 'architecture' key");
    e.train = train_config_from_json(j.at("train"), e.train, "config.train");
  }
  if (j.contains("architecture")) e.train.architecture = architecture_from_json(j.at("architecture"), "config.architecture");
  if (j.contains("data")) {
    detail::reject_unknown(j.at("data"), {"train", "eval"}, "config.data");
    detail::read(j.at("data"), "train", e.train_data, "config.data");
    detail::read(j.at("data"), "eval", e.eval_data, "config.data");
  }
  if (j.contains("eval")) {
    detail::reject_unknown(j.at("eval"), {"head"}, "config.eval");
    detail::read_string_enum(j.at("eval"), "head", "config.eval", [&](const std::string& s) { e.head = parse_score_head(s); });
  }
  detail::read(j, "output", e.output, "config");
  e.validate();
  return e;
}

}  // namespace kgl
