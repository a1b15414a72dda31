#pragma once

#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "lime/model.hpp"

namespace lime {

using json = nlohmann::ordered_json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Rejects keys of `j` outside `allowed`; `where` names the section.
inline void require_known_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

/// Reads j[key] into `out` when present, with the key path in type errors.
template <class V>
void read_opt(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline Activation parse_activation(const std::string& s) {
  for (auto a : {Activation::ScaledSoftmax, Activation::Silu, Activation::Identity})
    if (kernels::activation_name(a) == s) return a;
  throw ConfigError("unknown activation '" + s + "'");
}

inline json model_config_to_json(const ModelConfig& c) {
  json attrs = json::array();
  for (const auto& a : c.item_attributes) attrs.push_back({{"name", a.name}, {"vocab", a.vocab}, {"dim", a.dim}});
  return {{"kind", model_kind_name(c.kind)},
          {"d", c.d},
          {"links", c.links},
          {"heads", c.heads},
          {"layers", c.layers},
          {"max_seq_len", c.max_seq_len},
          {"context_dim", c.context_dim},
          {"qk_dim", c.qk_dim},
          {"context_hidden", c.context_hidden},
          {"context_layers", c.context_layers},
          {"personalize_activation", kernels::activation_name(c.personalize_activation)},
          {"decoupled_activation", kernels::activation_name(c.decoupled_activation)},
          {"target_activation", kernels::activation_name(c.target_activation)},
          {"stacked_activation", kernels::activation_name(c.stacked_activation)},
          {"interaction_widths", c.interaction_widths},
          {"item_attributes", attrs},
          {"encoder_hidden", c.encoder_hidden},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"seed", c.seed}};
}

/// Overlays the keys present in `j` onto `c`; unknown keys are an error.
inline void apply_model_config(const json& j, ModelConfig& c, const std::string& where = "model") {
  require_known_keys(j,
                     {"kind", "d", "links", "heads", "layers", "max_seq_len", "context_dim", "qk_dim", "context_hidden",
                      "context_layers", "personalize_activation", "decoupled_activation", "target_activation",
                      "stacked_activation", "interaction_widths", "item_attributes", "encoder_hidden", "learning_rate",
                      "batch_size", "seed"},
                     where);
  std::string s;
  if (j.contains("kind")) {
    read_opt(j, "kind", s, where);
    c.kind = parse_model_kind(s);
  }
  read_opt(j, "d", c.d, where);
  read_opt(j, "links", c.links, where);
  read_opt(j, "heads", c.heads, where);
  read_opt(j, "layers", c.layers, where);
  read_opt(j, "max_seq_len", c.max_seq_len, where);
  read_opt(j, "context_dim", c.context_dim, where);
  read_opt(j, "qk_dim", c.qk_dim, where);
  read_opt(j, "context_hidden", c.context_hidden, where);
  read_opt(j, "context_layers", c.context_layers, where);
  for (auto [key, field] : {std::pair{"personalize_activation", &c.personalize_activation},
                            std::pair{"decoupled_activation", &c.decoupled_activation},
                            std::pair{"target_activation", &c.target_activation},
                            std::pair{"stacked_activation", &c.stacked_activation}}) {
    if (!j.contains(key)) continue;
    read_opt(j, key, s, where);
    *field = parse_activation(s);
  }
  read_opt(j, "interaction_widths", c.interaction_widths, where);
  if (j.contains("item_attributes")) {
    c.item_attributes.clear();
    for (const auto& a : j.at("item_attributes")) {
      const std::string w = where + ".item_attributes";
      require_known_keys(a, {"name", "vocab", "dim"}, w);
      AttributeSpec spec;
      read_opt(a, "name", spec.name, w);
      read_opt(a, "vocab", spec.vocab, w);
      read_opt(a, "dim", spec.dim, w);
      c.item_attributes.push_back(spec);
    }
  }
  read_opt(j, "encoder_hidden", c.encoder_hidden, where);
  read_opt(j, "learning_rate", c.learning_rate, where);
  read_opt(j, "batch_size", c.batch_size, where);
  read_opt(j, "seed", c.seed, where);
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  apply_model_config(j, c);
  c.validate();
  return c;
}

}  // namespace lime
