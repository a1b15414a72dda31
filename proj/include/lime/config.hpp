#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lime/bench.hpp"
#include "lime/config_json.hpp"
#include "lime/data.hpp"
#include "lime/train.hpp"

namespace lime {

struct TrainSettings {
  std::size_t epochs = 1;
  std::size_t max_steps = 0;
  bool shuffle = true;
  std::size_t attribute_dim = 16;  ///< embedding width per item attribute when the model config lists none
};

struct AnalysisSettings {
  std::size_t requests = 32;
  std::size_t history = 256;
  std::size_t candidates = 256;
  std::size_t rank = 32;
};

/// Everything a subcommand needs besides its input paths. The top-level seed
/// is mandatory and seeds every section that does not set its own.
struct RunConfig {
  std::uint64_t seed = 0;
  int precision = 32;
  ModelConfig model;
  SyntheticSpec synthetic;
  TrainSettings train;
  SweepSpec sweep;
  AnalysisSettings analysis;
  json cli = json::object();  ///< command line of the run that echoed this config; informational
};

inline json synthetic_to_json(const SyntheticSpec& s) {
  return {{"users", s.users},
          {"items", s.items},
          {"latent_dim", s.latent_dim},
          {"interests", s.interests},
          {"model_dim", s.model_dim},
          {"history_min", s.history_min},
          {"history_max", s.history_max},
          {"test_extra_history", s.test_extra_history},
          {"train_candidates", s.train_candidates},
          {"test_candidates", s.test_candidates},
          {"interest_scale", s.interest_scale},
          {"affinity_offset", s.affinity_offset},
          {"temperature", s.temperature},
          {"history_temperature", s.history_temperature},
          {"context_dim", s.context_dim},
          {"context_noise", s.context_noise},
          {"latent_buckets", s.latent_buckets},
          {"item_id_attribute", s.item_id_attribute},
          {"seed", s.seed}};
}

inline void apply_synthetic(const json& j, SyntheticSpec& s, const std::string& where = "synthetic") {
  require_known_keys(j,
                     {"users", "items", "latent_dim", "interests", "model_dim", "history_min", "history_max",
                      "test_extra_history", "train_candidates", "test_candidates", "interest_scale", "affinity_offset",
                      "temperature", "history_temperature", "context_dim", "context_noise", "latent_buckets",
                      "item_id_attribute", "seed"},
                     where);
  read_opt(j, "users", s.users, where);
  read_opt(j, "items", s.items, where);
  read_opt(j, "latent_dim", s.latent_dim, where);
  read_opt(j, "interests", s.interests, where);
  read_opt(j, "model_dim", s.model_dim, where);
  read_opt(j, "history_min", s.history_min, where);
  read_opt(j, "history_max", s.history_max, where);
  read_opt(j, "test_extra_history", s.test_extra_history, where);
  read_opt(j, "train_candidates", s.train_candidates, where);
  read_opt(j, "test_candidates", s.test_candidates, where);
  read_opt(j, "interest_scale", s.interest_scale, where);
  read_opt(j, "affinity_offset", s.affinity_offset, where);
  read_opt(j, "temperature", s.temperature, where);
  read_opt(j, "history_temperature", s.history_temperature, where);
  read_opt(j, "context_dim", s.context_dim, where);
  read_opt(j, "context_noise", s.context_noise, where);
  read_opt(j, "latent_buckets", s.latent_buckets, where);
  read_opt(j, "item_id_attribute", s.item_id_attribute, where);
  read_opt(j, "seed", s.seed, where);
}

inline json sweep_to_json(const SweepSpec& s) {
  json models = json::array();
  for (auto k : s.models) models.push_back(model_kind_name(k));
  return {{"axis", axis_name(s.axis)},
          {"grid", s.grid},
          {"models", models},
          {"fixed_candidates", s.fixed_candidates},
          {"fixed_history", s.fixed_history},
          {"warmup", s.warmup},
          {"iterations", s.iterations},
          {"memory_budget_mib", s.memory_budget_bytes / double(1 << 20)},
          {"retrieval_stub_ms", s.retrieval_stub_ms},
          {"seed", s.seed}};
}

inline void apply_sweep(const json& j, SweepSpec& s, const std::string& where = "sweep") {
  require_known_keys(j,
                     {"axis", "grid", "models", "fixed_candidates", "fixed_history", "warmup", "iterations",
                      "memory_budget_mib", "retrieval_stub_ms", "seed"},
                     where);
  std::string str;
  if (j.contains("axis")) {
    read_opt(j, "axis", str, where);
    try {
      s.axis = parse_axis(str);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + ".axis: " + e.what());
    }
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    try {
      s.grid = g.is_string() ? parse_grid(g.get<std::string>()) : g.get<std::vector<std::size_t>>();
    } catch (const std::exception& e) {
      throw ConfigError(where + ".grid: " + e.what());
    }
  }
  if (j.contains("models")) {
    std::vector<std::string> names;
    read_opt(j, "models", names, where);
    s.models.clear();
    try {
      for (const auto& n : names) s.models.push_back(parse_model_kind(n));
    } catch (const std::exception& e) {
      throw ConfigError(where + ".models: " + e.what());
    }
  }
  read_opt(j, "fixed_candidates", s.fixed_candidates, where);
  read_opt(j, "fixed_history", s.fixed_history, where);
  read_opt(j, "warmup", s.warmup, where);
  read_opt(j, "iterations", s.iterations, where);
  if (j.contains("memory_budget_mib")) {
    double mib = 0;
    read_opt(j, "memory_budget_mib", mib, where);
    s.memory_budget_bytes = mib * double(1 << 20);
  }
  read_opt(j, "retrieval_stub_ms", s.retrieval_stub_ms, where);
  read_opt(j, "seed", s.seed, where);
}

inline json run_config_to_json(const RunConfig& c) {
  json out;
  out["seed"] = c.seed;
  out["precision"] = c.precision;
  out["model"] = model_config_to_json(c.model);
  out["synthetic"] = synthetic_to_json(c.synthetic);
  out["train"] = {{"epochs", c.train.epochs},
                  {"max_steps", c.train.max_steps},
                  {"shuffle", c.train.shuffle},
                  {"attribute_dim", c.train.attribute_dim}};
  out["sweep"] = sweep_to_json(c.sweep);
  out["analysis"] = {{"requests", c.analysis.requests},
                     {"history", c.analysis.history},
                     {"candidates", c.analysis.candidates},
                     {"rank", c.analysis.rank}};
  if (!c.cli.empty()) out["cli"] = c.cli;
  return out;
}

/// Parses a config document. `seed_override` (the --seed flag) wins over the
/// file; a config with neither is rejected. Section seeds not given
/// explicitly follow the top-level seed.
inline RunConfig parse_run_config(const json& j, std::optional<std::uint64_t> seed_override = std::nullopt) {
  require_known_keys(j, {"seed", "precision", "model", "synthetic", "train", "sweep", "analysis", "cli"}, "config");
  RunConfig c;
  c.sweep.grid.clear();
  if (j.contains("seed")) read_opt(j, "seed", c.seed, "config");
  if (seed_override) c.seed = *seed_override;
  if (!seed_override && !j.contains("seed")) throw ConfigError("config: a seed is required (config key 'seed' or --seed)");
  read_opt(j, "precision", c.precision, "config");
  if (c.precision != 32 && c.precision != 64) throw ConfigError("config.precision: must be 32 or 64");

  const json empty = json::object();
  const json& m = j.contains("model") ? j.at("model") : empty;
  const json& s = j.contains("synthetic") ? j.at("synthetic") : empty;
  const json& w = j.contains("sweep") ? j.at("sweep") : empty;
  apply_model_config(m, c.model);
  apply_synthetic(s, c.synthetic);
  apply_sweep(w, c.sweep);
  // An explicit section seed is kept unless --seed overrides everything.
  if (!m.contains("seed") || seed_override) c.model.seed = c.seed;
  if (!s.contains("seed") || seed_override) c.synthetic.seed = c.seed;
  if (!w.contains("seed") || seed_override) c.sweep.seed = c.seed;

  if (j.contains("train")) {
    const auto& t = j.at("train");
    require_known_keys(t, {"epochs", "max_steps", "shuffle", "attribute_dim"}, "train");
    read_opt(t, "epochs", c.train.epochs, "train");
    read_opt(t, "max_steps", c.train.max_steps, "train");
    read_opt(t, "shuffle", c.train.shuffle, "train");
    read_opt(t, "attribute_dim", c.train.attribute_dim, "train");
  }
  if (j.contains("analysis")) {
    const auto& a = j.at("analysis");
    require_known_keys(a, {"requests", "history", "candidates", "rank"}, "analysis");
    read_opt(a, "requests", c.analysis.requests, "analysis");
    read_opt(a, "history", c.analysis.history, "analysis");
    read_opt(a, "candidates", c.analysis.candidates, "analysis");
    read_opt(a, "rank", c.analysis.rank, "analysis");
  }
  if (j.contains("cli")) {
    if (!j.at("cli").is_object()) throw ConfigError("config.cli: expected an object");
    c.cli = j.at("cli");
  }
  try {
    c.model.validate();
    c.synthetic.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.train.epochs == 0 && c.train.max_steps == 0) throw ConfigError("train: epochs and max_steps are both 0");
  if (c.train.attribute_dim == 0) throw ConfigError("train.attribute_dim must be positive");
  if (c.analysis.requests == 0 || c.analysis.history == 0 || c.analysis.candidates == 0)
    throw ConfigError("analysis: requests, history and candidates must be positive");
  return c;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
}

}  // namespace lime
