#pragma once

#include <concepts>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vegas/session.hpp"
#include "vegas/steering.hpp"

namespace vegas::io {

using nlohmann::json;

inline constexpr const char* kConfigSchema = "vegas.config/1";
inline constexpr const char* kSeedEnv = "VEGAS_SEED";

struct DecodeSettings {
  DecodeMode mode = DecodeMode::greedy;
  std::size_t beam_width = 5;
  std::size_t max_new_tokens = 32;
  bool stop_on_eos = true;
  friend bool operator==(const DecodeSettings&, const DecodeSettings&) = default;
};

/// Everything a command needs besides its input files. `seed` drives the
/// random head alignment and any generated fixtures; model.seed drives
/// weight synthesis.
struct RunConfig {
  std::uint64_t seed = 7;
  ModelConfig model;
  SteeringConfig steering;
  DecodeSettings decode;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Integers built in code are signed in nlohmann::json; parsed ones are unsigned.
inline bool is_nonnegative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

/// Reads one JSON object, remembering which keys were consumed so that
/// leftovers can be reported by their full dotted path.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j.is_object(), (path_.empty() ? std::string("config") : path_) + " must be a JSON object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  bool read(const std::string& key, bool& out) {
    const json* v = find(key);
    if (!v) return false;
    require(v->is_boolean(), key_path(key) + " must be a boolean");
    out = v->get<bool>();
    return true;
  }
  bool read(const std::string& key, double& out) {
    const json* v = find(key);
    if (!v) return false;
    require(v->is_number(), key_path(key) + " must be a number");
    out = v->get<double>();
    return true;
  }
  template <std::unsigned_integral T>
  bool read(const std::string& key, T& out) {
    const json* v = find(key);
    if (!v) return false;
    require(is_nonnegative_integer(*v), key_path(key) + " must be a nonnegative integer");
    out = v->get<T>();
    return true;
  }
  bool read(const std::string& key, std::string& out) {
    const json* v = find(key);
    if (!v) return false;
    require(v->is_string(), key_path(key) + " must be a string");
    out = v->get<std::string>();
    return true;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw Error("unknown config key '" + key_path(item.key()) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

/// Layer index from an integer or one of "first", "mid", "mid+1", "last".
inline std::size_t parse_layer(const json& v, std::size_t num_layers, const std::string& key) {
  if (is_nonnegative_integer(v)) return v.get<std::size_t>();
  require(v.is_string(), key + " entries must be layer indices or names");
  const auto name = v.get<std::string>();
  const auto mid = middle_layers(num_layers);
  if (name == "first") return 0;
  if (name == "mid") return mid[0];
  if (name == "mid+1") return mid[1];
  if (name == "last") return num_layers - 1;
  throw Error(key + ": unknown layer name '" + name + "'");
}

inline std::vector<std::size_t> parse_layer_list(const json& v, std::size_t num_layers, const std::string& key) {
  require(v.is_array(), key + " must be an array of layers");
  std::vector<std::size_t> out;
  for (const auto& e : v) out.push_back(parse_layer(e, num_layers, key));
  return out;
}

inline const char* to_string(DecodeMode m) { return m == DecodeMode::beam ? "beam" : "greedy"; }
inline const char* to_string(IndicatorKind k) { return k == IndicatorKind::shannon ? "shannon" : "vabe"; }
inline const char* to_string(AlignmentMode m) {
  switch (m) {
    case AlignmentMode::random: return "random";
    case AlignmentMode::similarity: return "similarity";
    default: return "broadcast";
  }
}

inline ModelConfig parse_model_config(const json& j, ModelConfig m, const std::string& path = "model") {
  ObjectReader r(j, path);
  r.read("num_layers", m.num_layers);
  r.read("num_heads", m.num_heads);
  r.read("head_dim", m.head_dim);
  r.read("vocab_size", m.vocab_size);
  r.read("num_visual_tokens", m.num_visual_tokens);
  r.read("ve_num_heads", m.ve_num_heads);
  r.read("seed", m.seed);
  r.finish();
  m.validate();
  return m;
}

inline json model_config_to_json(const ModelConfig& m) {
  return {{"num_layers", m.num_layers}, {"num_heads", m.num_heads},
          {"head_dim", m.head_dim},     {"vocab_size", m.vocab_size},
          {"num_visual_tokens", m.num_visual_tokens}, {"ve_num_heads", m.ve_num_heads},
          {"seed", m.seed}};
}

inline SteeringConfig parse_steering(const json& j, const ModelConfig& model) {
  SteeringConfig s = SteeringConfig::defaults_for(model);
  ObjectReader r(j, "steering");
  r.read("enabled", s.enabled);
  if (const json* v = r.find("replaced_layers")) {
    s.replaced_layers = parse_layer_list(*v, model.num_layers, "steering.replaced_layers");
  }
  if (const json* v = r.find("indicator_layer")) {
    s.indicator_layer = parse_layer(*v, model.num_layers, "steering.indicator_layer");
  }
  r.read("alpha_high", s.alpha_high);
  r.read("alpha_low", s.alpha_low);
  r.read("eta", s.eta);
  r.read("block_size", s.block_size);
  std::string text;
  if (r.read("indicator", text)) {
    if (text == "vabe") s.indicator_kind = IndicatorKind::vabe;
    else if (text == "shannon") s.indicator_kind = IndicatorKind::shannon;
    else throw Error("steering.indicator must be \"vabe\" or \"shannon\", got \"" + text + "\"");
  }
  if (r.read("alignment", text)) {
    if (text == "broadcast") s.alignment.mode = AlignmentMode::broadcast;
    else if (text == "random") s.alignment.mode = AlignmentMode::random;
    else if (text == "similarity") s.alignment.mode = AlignmentMode::similarity;
    else throw Error("steering.alignment must be broadcast, random or similarity, got \"" + text + "\"");
  }
  if (const json* v = r.find("clamp")) {
    ObjectReader c(*v, "steering.clamp");
    c.read("enabled", s.clamp.enabled);
    c.read("quantile", s.clamp.quantile);
    c.finish();
  }
  r.read("gamma", s.gamma);
  r.read("parallel", s.parallel);
  r.finish();
  s.normalize();
  return s;
}

inline json steering_to_json(const SteeringConfig& s) {
  return {{"enabled", s.enabled},
          {"replaced_layers", s.replaced_layers},
          {"indicator_layer", s.indicator_layer},
          {"alpha_high", s.alpha_high},
          {"alpha_low", s.alpha_low},
          {"eta", s.eta},
          {"block_size", s.block_size},
          {"indicator", to_string(s.indicator_kind)},
          {"alignment", to_string(s.alignment.mode)},
          {"clamp", {{"enabled", s.clamp.enabled}, {"quantile", s.clamp.quantile}}},
          {"gamma", s.gamma},
          {"parallel", s.parallel}};
}

inline DecodeSettings parse_decode(const json& j) {
  DecodeSettings d;
  ObjectReader r(j, "decode");
  std::string mode;
  if (r.read("mode", mode)) {
    if (mode == "greedy") d.mode = DecodeMode::greedy;
    else if (mode == "beam") d.mode = DecodeMode::beam;
    else throw Error("decode.mode must be \"greedy\" or \"beam\", got \"" + mode + "\"");
  }
  r.read("beam_width", d.beam_width);
  r.read("max_new_tokens", d.max_new_tokens);
  r.read("stop_on_eos", d.stop_on_eos);
  r.finish();
  require(d.beam_width >= 1, "decode.beam_width must be >= 1");
  require(d.max_new_tokens >= 1, "decode.max_new_tokens must be >= 1");
  return d;
}

/// Parses a config document. When `known_model` is given (a loaded model
/// file), it is the default model section and any explicit model section
/// must agree with it. Steering defaults resolve against the model.
inline RunConfig parse_config(const json& j, const ModelConfig* known_model = nullptr) {
  ObjectReader r(j, "");
  RunConfig c;
  std::string schema;
  if (r.read("schema", schema)) {
    require(schema == kConfigSchema, "schema must be \"" + std::string(kConfigSchema) + "\", got \"" + schema + "\"");
  }
  r.read("seed", c.seed);
  c.model = known_model ? *known_model : ModelConfig{};
  if (const json* m = r.find("model")) {
    c.model = parse_model_config(*m, c.model);
    if (known_model && !(c.model == *known_model)) {
      const json want = model_config_to_json(*known_model), got = model_config_to_json(c.model);
      for (const auto& item : want.items()) {
        if (got[item.key()] != item.value()) {
          throw Error("model." + item.key() + ": config says " + got[item.key()].dump() + " but the model file has " +
                      item.value().dump());
        }
      }
    }
  }
  c.steering = parse_steering(r.find("steering") ? j.at("steering") : json::object(), c.model);
  c.steering.alignment.rng_seed = c.seed;
  c.steering.validate(c.model);
  if (const json* d = r.find("decode")) c.decode = parse_decode(*d);
  r.finish();
  return c;
}

inline json config_to_json(const RunConfig& c) {
  return {{"schema", kConfigSchema},
          {"seed", c.seed},
          {"model", model_config_to_json(c.model)},
          {"steering", steering_to_json(c.steering)},
          {"decode",
           {{"mode", to_string(c.decode.mode)},
            {"beam_width", c.decode.beam_width},
            {"max_new_tokens", c.decode.max_new_tokens},
            {"stop_on_eos", c.decode.stop_on_eos}}}};
}

/// Applies "a.b.c=value" overrides in place. The value is parsed as JSON when
/// possible (numbers, booleans, arrays) and taken as a string otherwise.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, "override '" + assignment + "' must look like key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    require(!part.empty(), "override key '" + key + "' has an empty component");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

/// Top-level seed from VEGAS_SEED, when set.
inline void apply_seed_env(json& doc) {
  const char* env = std::getenv(kSeedEnv);
  if (!env || !*env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  require(end && *end == '\0' && env[0] != '-', std::string(kSeedEnv) + " must be a nonnegative integer, got \"" +
                                                   env + "\"");
  doc["seed"] = v;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open " + path);
  json j = json::parse(in, nullptr, false);
  require(!j.is_discarded(), path + ": not valid JSON");
  return j;
}

/// Config file (or the defaults when `path` is empty), then overrides, then
/// the seed environment variable.
inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {},
                             const ModelConfig* known_model = nullptr) {
  json doc = path.empty() ? json::object() : read_json_file(path);
  for (const auto& o : overrides) apply_override(doc, o);
  apply_seed_env(doc);
  return parse_config(doc, known_model);
}

}  // namespace vegas::io
