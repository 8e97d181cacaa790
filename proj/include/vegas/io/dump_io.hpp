#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vegas/injection.hpp"
#include "vegas/io/config_io.hpp"
#include "vegas/session.hpp"

namespace vegas::io {

inline constexpr const char* kAttentionDumpSchema = "vegas.attention-dump/1";
inline constexpr const char* kVEDumpSchema = "vegas.ve-attention/1";
inline constexpr const char* kPromptSchema = "vegas.prompt/1";

inline json range_to_json(const IndexRange& r) { return json::array({r.begin, r.end}); }

inline IndexRange range_from_json(const json& j, const std::string& key) {
  require(j.is_array() && j.size() == 2 && is_nonnegative_integer(j[0]) && is_nonnegative_integer(j[1]),
          key + " must be [begin, end]");
  IndexRange r{j[0].get<std::size_t>(), j[1].get<std::size_t>()};
  require(r.begin <= r.end, key + " has begin > end");
  return r;
}

inline json layout_to_json(const PromptLayout& l) {
  json text = json::array();
  for (const auto& s : l.text_spans) text.push_back(range_to_json(s));
  return {{"visual_span", range_to_json(l.visual_span)}, {"text_spans", text}, {"total_prompt_len", l.total_prompt_len}};
}

inline PromptLayout layout_from_json(const json& j, const std::string& path = "layout") {
  ObjectReader r(j, path);
  PromptLayout l;
  const json* v = r.find("visual_span");
  require(v != nullptr, path + ".visual_span is required");
  l.visual_span = range_from_json(*v, path + ".visual_span");
  if (const json* t = r.find("text_spans")) {
    require(t->is_array(), path + ".text_spans must be an array");
    for (const auto& s : *t) l.text_spans.push_back(range_from_json(s, path + ".text_spans"));
  }
  require(r.read("total_prompt_len", l.total_prompt_len), path + ".total_prompt_len is required");
  r.finish();
  return l;
}

inline json prompt_to_json(const Prompt& p) {
  return {{"schema", kPromptSchema}, {"tokens", p.tokens}, {"layout", layout_to_json(p.layout)}};
}

inline Prompt prompt_from_json(const json& j) {
  ObjectReader r(j, "prompt");
  std::string schema;
  if (r.read("schema", schema)) require(schema == kPromptSchema, "prompt.schema must be " + std::string(kPromptSchema));
  Prompt p;
  const json* t = r.find("tokens");
  require(t && t->is_array(), "prompt.tokens must be an array of token ids");
  for (const auto& v : *t) {
    require(v.is_number_integer(), "prompt.tokens must hold integers");
    p.tokens.push_back(v.get<TokenId>());
  }
  const json* l = r.find("layout");
  require(l != nullptr, "prompt.layout is required");
  p.layout = layout_from_json(*l, "prompt.layout");
  r.finish();
  return p;
}

namespace detail {

inline std::string payload_path(const std::string& manifest_path, const std::string& payload) {
  const std::filesystem::path p(payload);
  if (p.is_absolute()) return payload;
  return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

inline std::vector<double> read_payload(const std::string& path, const std::string& dtype, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open payload " + path);
  std::vector<double> out(count);
  if (dtype == "f64") {
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(double)));
  } else if (dtype == "f32") {
    std::vector<float> tmp(count);
    in.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(count * sizeof(float)));
    for (std::size_t i = 0; i < count; ++i) out[i] = tmp[i];
  } else {
    throw Error("unsupported payload dtype \"" + dtype + "\" (expected f64 or f32)");
  }
  require(static_cast<bool>(in), path + ": payload shorter than the manifest describes");
  in.peek();
  require(in.eof(), path + ": payload longer than the manifest describes");
  return out;
}

inline void write_payload(const std::string& path, const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), "cannot write " + path);
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  require(static_cast<bool>(out), "write failed for " + path);
}

inline std::string required_string(ObjectReader& r, const std::string& key) {
  std::string v;
  require(r.read(key, v), r.key_path(key) + " is required");
  return v;
}

}  // namespace detail

/// One captured attention row: pre-softmax scores (after any injection) and
/// post-softmax weights for the query at `step`.
struct AttentionRow {
  std::string path = "vanilla";  // "vanilla" or "replaced"
  std::size_t step = 0;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<double> pre_softmax;
  std::vector<double> post_softmax;
  friend bool operator==(const AttentionRow&, const AttentionRow&) = default;
};

struct AttentionDump {
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  PromptLayout layout;
  std::vector<AttentionRow> rows;
  friend bool operator==(const AttentionDump&, const AttentionDump&) = default;
};

inline AttentionDump dump_from_trace(const std::vector<TraceRecord>& trace, const ModelConfig& model,
                                     const PromptLayout& layout) {
  AttentionDump d{model.num_layers, model.num_heads, layout, {}};
  for (const auto& rec : trace) {
    for (const auto* set : {&rec.vanilla_attention, &rec.replaced_attention}) {
      for (const auto& t : *set) {
        d.rows.push_back({set == &rec.vanilla_attention ? "vanilla" : "replaced", rec.step, t.layer, t.head,
                          t.pre_softmax_row, t.post_softmax_row});
      }
    }
  }
  return d;
}

/// Manifest at `manifest_path`, payload (f64, little-endian) at `payload_path`:
/// for every row in manifest order, its pre-softmax values then its
/// post-softmax values.
inline void write_attention_dump(const std::string& manifest_path, const std::string& payload_path,
                                 const AttentionDump& d) {
  json rows = json::array();
  std::vector<double> payload;
  for (const auto& r : d.rows) {
    require(r.pre_softmax.size() == r.post_softmax.size(), "dump: pre/post rows differ in length");
    rows.push_back({{"path", r.path}, {"step", r.step}, {"layer", r.layer}, {"head", r.head},
                    {"length", r.pre_softmax.size()}});
    payload.insert(payload.end(), r.pre_softmax.begin(), r.pre_softmax.end());
    payload.insert(payload.end(), r.post_softmax.begin(), r.post_softmax.end());
  }
  const json manifest = {{"schema", kAttentionDumpSchema},
                         {"payload", std::filesystem::path(payload_path).filename().string()},
                         {"dtype", "f64"},
                         {"byte_order", "little"},
                         {"num_layers", d.num_layers},
                         {"num_heads", d.num_heads},
                         {"layout", layout_to_json(d.layout)},
                         {"rows", rows}};
  detail::write_payload(payload_path, payload);
  std::ofstream out(manifest_path, std::ios::trunc);
  require(static_cast<bool>(out), "cannot write " + manifest_path);
  out << manifest.dump(2) << "\n";
}

inline AttentionDump read_attention_dump(const std::string& manifest_path) {
  const json j = read_json_file(manifest_path);
  ObjectReader r(j, "dump");
  const auto schema = detail::required_string(r, "schema");
  require(schema == kAttentionDumpSchema, manifest_path + ": schema must be " + std::string(kAttentionDumpSchema));
  const auto payload = detail::required_string(r, "payload");
  std::string dtype = "f64", order = "little";
  r.read("dtype", dtype);
  r.read("byte_order", order);
  require(order == "little", manifest_path + ": only little-endian payloads are supported");
  AttentionDump d;
  require(r.read("num_layers", d.num_layers) && r.read("num_heads", d.num_heads),
          manifest_path + ": num_layers and num_heads are required");
  const json* layout = r.find("layout");
  require(layout != nullptr, manifest_path + ": layout is required");
  d.layout = layout_from_json(*layout, "dump.layout");
  const json* rows = r.find("rows");
  require(rows && rows->is_array(), manifest_path + ": rows must be an array");
  r.finish();

  std::size_t total = 0;
  for (const auto& row : *rows) {
    ObjectReader rr(row, "dump.rows[]");
    AttentionRow a;
    rr.read("path", a.path);
    rr.read("step", a.step);
    require(rr.read("layer", a.layer) && rr.read("head", a.head), manifest_path + ": rows need layer and head");
    std::size_t length = 0;
    require(rr.read("length", length) && length > 0, manifest_path + ": rows need a positive length");
    rr.finish();
    require(a.layer < d.num_layers && a.head < d.num_heads, manifest_path + ": row layer/head outside the dump");
    a.pre_softmax.resize(length);
    a.post_softmax.resize(length);
    total += 2 * length;
    d.rows.push_back(std::move(a));
  }
  const auto values = detail::read_payload(detail::payload_path(manifest_path, payload), dtype, total);
  std::size_t at = 0;
  for (auto& a : d.rows) {
    const auto n = a.pre_softmax.size();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(at), n, a.pre_softmax.begin());
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(at + n), n, a.post_softmax.begin());
    at += 2 * n;
  }
  return d;
}

inline const char* to_string(VESourceKind k) { return k == VESourceKind::query_aggregate ? "query_aggregate" : "cls_row"; }

/// VE maps: manifest plus an f64 payload of num_heads x num_visual_tokens
/// values. Readers also accept the maps inline under "heads".
inline void write_ve_dump(const std::string& manifest_path, const std::string& payload_path,
                          const VEAttentionSet& ve) {
  std::vector<double> payload;
  for (const auto& h : ve.heads) payload.insert(payload.end(), h.begin(), h.end());
  const json manifest = {{"schema", kVEDumpSchema},
                         {"source_kind", to_string(ve.source_kind)},
                         {"num_heads", ve.heads.size()},
                         {"num_visual_tokens", ve.heads.empty() ? 0 : ve.heads.front().size()},
                         {"payload", std::filesystem::path(payload_path).filename().string()},
                         {"dtype", "f64"},
                         {"byte_order", "little"}};
  detail::write_payload(payload_path, payload);
  std::ofstream out(manifest_path, std::ios::trunc);
  require(static_cast<bool>(out), "cannot write " + manifest_path);
  out << manifest.dump(2) << "\n";
}

inline VEAttentionSet ve_from_json(const json& j, const std::string& manifest_path) {
  ObjectReader r(j, "ve");
  const auto schema = detail::required_string(r, "schema");
  require(schema == kVEDumpSchema, manifest_path + ": schema must be " + std::string(kVEDumpSchema));
  VEAttentionSet ve;
  std::string kind = "cls_row";
  r.read("source_kind", kind);
  if (kind == "query_aggregate") ve.source_kind = VESourceKind::query_aggregate;
  else require(kind == "cls_row", manifest_path + ": source_kind must be cls_row or query_aggregate");
  std::size_t heads = 0, n = 0;
  const bool has_heads = r.read("num_heads", heads);
  const bool has_n = r.read("num_visual_tokens", n);
  std::string payload, dtype = "f64", order = "little";
  const bool has_payload = r.read("payload", payload);
  r.read("dtype", dtype);
  r.read("byte_order", order);
  require(order == "little", manifest_path + ": only little-endian payloads are supported");
  if (const json* inline_heads = r.find("heads")) {
    require(!has_payload, manifest_path + ": give either heads or payload, not both");
    require(inline_heads->is_array() && !inline_heads->empty() && (*inline_heads)[0].is_array(),
            manifest_path + ": heads must be a nonempty array of maps");
    if (!has_heads) heads = inline_heads->size();
    if (!has_n) n = (*inline_heads)[0].size();
    require(heads > 0 && n > 0, manifest_path + ": positive num_heads and num_visual_tokens are required");
    require(inline_heads->size() == heads, manifest_path + ": heads must hold num_heads maps");
    for (const auto& h : *inline_heads) {
      require(h.is_array() && h.size() == n, manifest_path + ": every map needs num_visual_tokens entries");
      ve.heads.push_back(h.get<std::vector<double>>());
    }
  } else {
    require(has_payload, manifest_path + ": payload or heads is required");
    require(has_heads && has_n && heads > 0 && n > 0,
            manifest_path + ": positive num_heads and num_visual_tokens are required");
    const auto values = detail::read_payload(detail::payload_path(manifest_path, payload), dtype, heads * n);
    for (std::size_t h = 0; h < heads; ++h) {
      ve.heads.emplace_back(values.begin() + static_cast<std::ptrdiff_t>(h * n),
                            values.begin() + static_cast<std::ptrdiff_t>((h + 1) * n));
    }
  }
  r.finish();
  ve.validate(n);
  return ve;
}

inline VEAttentionSet read_ve_dump(const std::string& manifest_path) {
  return ve_from_json(read_json_file(manifest_path), manifest_path);
}

}  // namespace vegas::io
