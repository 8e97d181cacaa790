#pragma once

#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vegas/benchmark.hpp"
#include "vegas/io/config_io.hpp"
#include "vegas/io/dump_io.hpp"

namespace vegas::io {

inline constexpr const char* kTraceSchema = "vegas.trace/1";
inline constexpr const char* kSummarySchema = "vegas.run-summary/1";
inline constexpr const char* kTokensSchema = "vegas.tokens/1";
inline constexpr const char* kReportSchema = "vegas.eval-report/1";
inline constexpr const char* kFixturesSchema = "vegas.fixtures/1";

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json number_or_null(const std::optional<double>& v) { return v ? number_or_null(*v) : json(nullptr); }

/// One JSON Lines object per generation step.
inline json trace_record_to_json(const TraceRecord& r) {
  json layers = json::array();
  for (const auto& s : r.layers) {
    layers.push_back({{"layer", s.layer}, {"var", s.var}, {"tver", number_or_null(s.tver)},
                      {"vabe", number_or_null(s.vabe)}});
  }
  json steering = nullptr;
  if (r.decision) {
    const auto& d = *r.decision;
    steering = {{"indicator", number_or_null(d.indicator_value)},
                {"vanilla_indicator", number_or_null(d.vanilla_indicator_value)},
                {"alpha", d.alpha_used},
                {"vanilla_argmax", d.vanilla_argmax},
                {"replaced_argmax", d.replaced_argmax},
                {"blended_argmax", d.blended_argmax},
                {"alignment_fallbacks", d.alignment_fallbacks}};
  }
  return {{"schema", kTraceSchema},
          {"step", r.step},
          {"token", r.token},
          {"logprob", number_or_null(r.step_logprob)},
          {"cumulative_logprob", number_or_null(r.cumulative_logprob)},
          {"layers", layers},
          {"steering", steering}};
}

inline void write_trace_jsonl(std::ostream& out, const std::vector<TraceRecord>& trace) {
  for (const auto& r : trace) out << trace_record_to_json(r).dump() << "\n";
}

/// Formats an alpha value as a histogram key ("1", "0.8", ...).
inline std::string alpha_key(double a) {
  std::ostringstream s;
  s << std::setprecision(15) << a;
  return s.str();
}

/// Per-layer mean VAR/TVER over the generated tokens, the indicator value per
/// token, and how often each alpha was used. The effective config is echoed.
inline json run_summary(const DecodeResult& result, const RunConfig& config) {
  const std::size_t layers = config.model.num_layers;
  std::vector<double> var_sum(layers, 0.0), tver_sum(layers, 0.0);
  std::vector<std::size_t> var_n(layers, 0), tver_n(layers, 0);
  json vabe = json::array();
  std::map<std::string, std::size_t> alpha_hist;
  for (const auto& r : result.trace) {
    for (const auto& s : r.layers) {
      var_sum[s.layer] += s.var;
      ++var_n[s.layer];
      if (s.tver) {
        tver_sum[s.layer] += *s.tver;
        ++tver_n[s.layer];
      }
    }
    if (r.decision) {
      vabe.push_back(number_or_null(r.decision->indicator_value));
      ++alpha_hist[alpha_key(r.decision->alpha_used)];
    } else {
      const auto& s = r.layers.size() > config.steering.indicator_layer ? r.layers[config.steering.indicator_layer]
                                                                        : LayerStats{};
      vabe.push_back(number_or_null(s.vabe));
    }
  }
  json per_layer = json::array();
  for (std::size_t l = 0; l < layers; ++l) {
    per_layer.push_back({{"layer", l},
                         {"mean_var", var_n[l] ? json(var_sum[l] / double(var_n[l])) : json(nullptr)},
                         {"mean_tver", tver_n[l] ? json(tver_sum[l] / double(tver_n[l])) : json(nullptr)},
                         {"tver_steps", tver_n[l]}});
  }
  return {{"schema", kSummarySchema},
          {"config", config_to_json(config)},
          {"tokens", result.tokens},
          {"logprob", number_or_null(result.logprob)},
          {"normalized_score", number_or_null(result.normalized_score)},
          {"layers", per_layer},
          {"indicator_per_token", vabe},
          {"indicator_kind", to_string(config.steering.indicator_kind)},
          {"alpha_histogram", alpha_hist}};
}

inline json report_to_json(const EvalReport& r, bool with_scenes = true) {
  json j = {{"chair_s", r.chair_s},
            {"chair_i", r.chair_i},
            {"pope_accuracy", r.pope_accuracy},
            {"pope_f1", r.pope_f1},
            {"counts",
             {{"sentences", r.chair.sentences},
              {"hallucinated_sentences", r.chair.hallucinated_sentences},
              {"mentions", r.chair.mentions},
              {"hallucinated_mentions", r.chair.hallucinated_mentions},
              {"pope_true_positive", r.pope.true_positive},
              {"pope_false_positive", r.pope.false_positive},
              {"pope_true_negative", r.pope.true_negative},
              {"pope_false_negative", r.pope.false_negative}}}};
  if (with_scenes) {
    json scenes = json::array();
    for (const auto& s : r.scenes) scenes.push_back({{"caption", s.caption}, {"pope_answers", s.pope_answers}});
    j["scenes"] = scenes;
  }
  return j;
}

inline constexpr const char* kReportCsvHeader =
    "chair_s,chair_i,pope_accuracy,pope_f1,sentences,hallucinated_sentences,mentions,hallucinated_mentions,"
    "pope_tp,pope_fp,pope_tn,pope_fn";

/// Shortest round-trip decimal form of a double.
inline std::string csv_number(double v) {
  if (!std::isfinite(v)) return "";
  return json(v).dump();
}

inline std::string report_csv_fields(const EvalReport& r) {
  std::ostringstream s;
  s << csv_number(r.chair_s) << ',' << csv_number(r.chair_i) << ',' << csv_number(r.pope_accuracy) << ','
    << csv_number(r.pope_f1) << ',' << r.chair.sentences << ',' << r.chair.hallucinated_sentences << ','
    << r.chair.mentions << ',' << r.chair.hallucinated_mentions << ',' << r.pope.true_positive << ','
    << r.pope.false_positive << ',' << r.pope.true_negative << ',' << r.pope.false_negative;
  return s.str();
}

/// Quotes a CSV field when it contains a comma or a quote.
inline std::string csv_field(const std::string& v) {
  if (v.find_first_of(",\"\n") == std::string::npos) return v;
  std::string out = "\"";
  for (char c : v) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

// Fixture corpora --------------------------------------------------------

inline json ve_inline_json(const VEAttentionSet& ve) {
  return {{"source_kind", to_string(ve.source_kind)}, {"heads", ve.heads}};
}

inline VEAttentionSet ve_inline_from_json(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  VEAttentionSet ve;
  std::string kind = "cls_row";
  r.read("source_kind", kind);
  ve.source_kind = kind == "query_aggregate" ? VESourceKind::query_aggregate : VESourceKind::cls_row;
  require(kind == "cls_row" || kind == "query_aggregate", path + ".source_kind must be cls_row or query_aggregate");
  const json* heads = r.find("heads");
  require(heads && heads->is_array(), path + ".heads must be an array of maps");
  ve.heads = heads->get<std::vector<std::vector<double>>>();
  r.finish();
  return ve;
}

inline json fixture_to_json(const SceneFixture& f) {
  json planted = json::array();
  for (const auto& p : f.planted_objects) {
    planted.push_back({{"object", p.object}, {"block_row", p.block_row}, {"block_col", p.block_col}});
  }
  json pope = json::array();
  for (const auto& q : f.pope_questions) pope.push_back({{"object", q.object}, {"present", q.present}});
  return {{"grid_side", f.grid_side},
          {"block_size", f.block_size},
          {"planted_objects", planted},
          {"patch_tokens", f.patch_tokens},
          {"context_tokens", f.context_tokens},
          {"primed_object", f.primed_object},
          {"ground_truth_objects", f.ground_truth_objects},
          {"ve_concentrated", ve_inline_json(f.ve_concentrated)},
          {"ve_diffuse", ve_inline_json(f.ve_diffuse)},
          {"pope_questions", pope}};
}

inline SceneFixture fixture_from_json(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  SceneFixture f;
  require(r.read("grid_side", f.grid_side) && r.read("block_size", f.block_size),
          path + ": grid_side and block_size are required");
  auto list = [&](const char* key) -> const json& {
    const json* v = r.find(key);
    require(v && v->is_array(), path + "." + key + " must be an array");
    return *v;
  };
  for (const auto& p : list("planted_objects")) {
    ObjectReader pr(p, path + ".planted_objects[]");
    PlantedObject o;
    require(pr.read("object", o.object) && pr.read("block_row", o.block_row) && pr.read("block_col", o.block_col),
            path + ": planted objects need object, block_row, block_col");
    pr.finish();
    f.planted_objects.push_back(o);
  }
  f.patch_tokens = list("patch_tokens").get<std::vector<TokenId>>();
  f.context_tokens = list("context_tokens").get<std::vector<TokenId>>();
  require(r.read("primed_object", f.primed_object), path + ".primed_object is required");
  f.ground_truth_objects = list("ground_truth_objects").get<std::set<std::size_t>>();
  const json* vc = r.find("ve_concentrated");
  const json* vd = r.find("ve_diffuse");
  require(vc && vd, path + ": ve_concentrated and ve_diffuse are required");
  f.ve_concentrated = ve_inline_from_json(*vc, path + ".ve_concentrated");
  f.ve_diffuse = ve_inline_from_json(*vd, path + ".ve_diffuse");
  for (const auto& q : list("pope_questions")) {
    ObjectReader qr(q, path + ".pope_questions[]");
    PopeQuestion pq;
    require(qr.read("object", pq.object) && qr.read("present", pq.present),
            path + ": pope questions need object and present");
    qr.finish();
    f.pope_questions.push_back(pq);
  }
  r.finish();
  require(f.patch_tokens.size() == f.grid_side * f.grid_side, path + ": patch_tokens must cover the grid");
  f.ve_concentrated.validate(f.patch_tokens.size());
  f.ve_diffuse.validate(f.patch_tokens.size());
  require(f.ve_concentrated.num_heads() == f.ve_diffuse.num_heads(), path + ": VE sets differ in head count");
  return f;
}

struct FixtureCorpus {
  std::uint64_t seed = 0;
  ToyVocabulary vocabulary;
  std::vector<SceneFixture> scenes;
};

inline json corpus_to_json(const FixtureCorpus& c) {
  json scenes = json::array();
  for (const auto& f : c.scenes) scenes.push_back(fixture_to_json(f));
  return {{"schema", kFixturesSchema},
          {"seed", c.seed},
          {"vocabulary",
           {{"num_objects", c.vocabulary.num_objects},
            {"background_variants", c.vocabulary.background_variants},
            {"context_levels", c.vocabulary.context_levels}}},
          {"scenes", scenes}};
}

inline FixtureCorpus corpus_from_json(const json& j, const std::string& path) {
  ObjectReader r(j, "fixtures");
  std::string schema;
  require(r.read("schema", schema) && schema == kFixturesSchema, path + ": schema must be " + std::string(kFixturesSchema));
  FixtureCorpus c;
  r.read("seed", c.seed);
  if (const json* v = r.find("vocabulary")) {
    ObjectReader vr(*v, "fixtures.vocabulary");
    vr.read("num_objects", c.vocabulary.num_objects);
    vr.read("background_variants", c.vocabulary.background_variants);
    vr.read("context_levels", c.vocabulary.context_levels);
    vr.finish();
    c.vocabulary.validate();
  }
  const json* scenes = r.find("scenes");
  require(scenes && scenes->is_array() && !scenes->empty(), path + ": scenes must be a nonempty array");
  for (std::size_t i = 0; i < scenes->size(); ++i) {
    c.scenes.push_back(fixture_from_json((*scenes)[i], "fixtures.scenes[" + std::to_string(i) + "]"));
  }
  r.finish();
  return c;
}

}  // namespace vegas::io
