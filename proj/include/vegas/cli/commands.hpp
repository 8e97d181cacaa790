#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "vegas/benchmark.hpp"
#include "vegas/io/config_io.hpp"
#include "vegas/io/dump_io.hpp"
#include "vegas/io/model_io.hpp"
#include "vegas/io/report_io.hpp"

/// Implementations of the `vegas` subcommands. Each returns a process exit
/// status and reports failures as one "error: ..." line on `err`.
namespace vegas::cli {

using io::json;

inline constexpr const char* kRunManifestSchema = "vegas.run/1";
inline constexpr const char* kSweepSchema = "vegas.sweep/1";

namespace detail {

inline void require_input(const std::string& path, const std::string& what) {
  require(!path.empty(), what + " path is required");
  require(std::filesystem::is_regular_file(path), what + " not found: " + path);
}

/// Refuses to clobber an existing file unless forced.
inline void require_writable(const std::string& path, bool force) {
  if (path.empty() || path == "-") return;
  require(force || !std::filesystem::exists(path), "refusing to overwrite " + path + " (pass --force)");
}

inline void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  require(static_cast<bool>(f), "cannot write " + path);
  f << text;
  require(static_cast<bool>(f), "write failed for " + path);
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

inline std::string sibling(const std::string& path, const std::string& ext) {
  return std::filesystem::path(path).replace_extension(ext).string();
}

/// A scene the model can read: grid and VE head count taken from the model.
inline FixtureSpec spec_for(const ModelConfig& model, std::size_t block_size) {
  FixtureSpec spec;
  spec.grid_side = model.grid_side();
  spec.block_size = block_size;
  spec.ve_heads = model.ve_num_heads;
  const std::size_t blocks = (spec.grid_side / block_size) * (spec.grid_side / block_size);
  spec.max_objects = std::min<std::size_t>(2, blocks);
  return spec;
}

}  // namespace detail

// run ---------------------------------------------------------------------

/// Inputs and outputs of one decoding run. Relative paths in a manifest file
/// resolve against the manifest's directory.
struct RunManifest {
  std::string model;
  std::string config;
  std::vector<std::string> overrides;
  std::string prompt;       // vegas.prompt/1 file
  std::string ve;           // vegas.ve-attention/1 file
  std::string fixtures;     // alternative prompt source: a fixture corpus
  std::size_t scene = 0;
  std::string task = "caption";  // "caption" or "pope"
  std::size_t object = 0;        // queried object for pope
  std::string tokens_out;
  std::string trace_out;
  std::string summary_out;
  std::string attention_dump;  // optional manifest path; payload goes next to it
  std::optional<std::uint64_t> seed;
  bool force = false;
};

inline RunManifest read_run_manifest(const std::string& path) {
  const json j = io::read_json_file(path);
  io::ObjectReader r(j, "manifest");
  std::string schema;
  if (r.read("schema", schema)) require(schema == kRunManifestSchema, "manifest.schema must be " + std::string(kRunManifestSchema));
  const auto base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    if (p.empty() || std::filesystem::path(p).is_absolute()) return p;
    return (base / p).string();
  };
  RunManifest m;
  r.read("model", m.model);
  r.read("config", m.config);
  r.read("prompt", m.prompt);
  r.read("ve", m.ve);
  r.read("fixtures", m.fixtures);
  r.read("scene", m.scene);
  r.read("task", m.task);
  r.read("object", m.object);
  if (const json* o = r.find("overrides")) {
    require(o->is_array(), "manifest.overrides must be an array of key=value strings");
    m.overrides = o->get<std::vector<std::string>>();
  }
  std::uint64_t seed = 0;
  if (r.read("seed", seed)) m.seed = seed;
  if (const json* outs = r.find("outputs")) {
    io::ObjectReader o(*outs, "manifest.outputs");
    o.read("tokens", m.tokens_out);
    o.read("trace", m.trace_out);
    o.read("summary", m.summary_out);
    o.read("attention_dump", m.attention_dump);
    o.finish();
  }
  r.read("force", m.force);
  r.finish();
  for (auto* p : {&m.model, &m.config, &m.prompt, &m.ve, &m.fixtures, &m.tokens_out, &m.trace_out, &m.summary_out,
                  &m.attention_dump}) {
    *p = resolve(*p);
  }
  return m;
}

inline int cmd_run(const RunManifest& m, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    detail::require_input(m.model, "model file");
    if (!m.config.empty()) detail::require_input(m.config, "config file");
    require(!m.tokens_out.empty() && !m.trace_out.empty() && !m.summary_out.empty(),
            "run needs tokens, trace and summary output paths");
    for (const auto* p : {&m.tokens_out, &m.trace_out, &m.summary_out}) detail::require_writable(*p, m.force);
    if (!m.attention_dump.empty()) {
      detail::require_writable(m.attention_dump, m.force);
      detail::require_writable(detail::sibling(m.attention_dump, ".bin"), m.force);
    }

    const ModelWeights weights = io::load_model_file(m.model);
    auto overrides = m.overrides;
    if (m.seed) overrides.push_back("seed=" + std::to_string(*m.seed));
    const io::RunConfig config = io::load_config(m.config, overrides, &weights.config);

    Prompt prompt;
    VEAttentionSet ve;
    if (!m.fixtures.empty()) {
      detail::require_input(m.fixtures, "fixture corpus");
      const auto corpus = io::corpus_from_json(io::read_json_file(m.fixtures), m.fixtures);
      require(m.scene < corpus.scenes.size(), "scene " + std::to_string(m.scene) + " not in " + m.fixtures);
      const auto& f = corpus.scenes[m.scene];
      if (m.task == "caption") prompt = caption_prompt(f);
      else if (m.task == "pope") prompt = pope_prompt(f, corpus.vocabulary, m.object);
      else throw Error("task must be caption or pope, got \"" + m.task + "\"");
      ve = f.ve_concentrated;
    } else {
      detail::require_input(m.prompt, "prompt file");
      prompt = io::prompt_from_json(io::read_json_file(m.prompt));
    }
    if (!m.ve.empty()) {
      detail::require_input(m.ve, "VE attention file");
      ve = io::read_ve_dump(m.ve);
    }
    require(!ve.heads.empty(), "run needs VE attention maps (--ve or a fixture scene)");

    DecoderSession session(weights, config.steering, ve);
    DecodeOptions options;
    options.max_new_tokens = config.decode.max_new_tokens;
    options.stop_on_eos = config.decode.stop_on_eos;
    options.keep_attention = !m.attention_dump.empty();
    const DecodeResult result = config.decode.mode == DecodeMode::beam
                                    ? session.beam(prompt, config.decode.beam_width, options)
                                    : session.greedy(prompt, options);

    const json tokens = {{"schema", io::kTokensSchema}, {"tokens", result.tokens}};
    detail::write_text(m.tokens_out, tokens.dump() + "\n", out);
    std::ostringstream trace;
    io::write_trace_jsonl(trace, result.trace);
    detail::write_text(m.trace_out, trace.str(), out);
    detail::write_text(m.summary_out, io::run_summary(result, config).dump(2) + "\n", out);
    if (!m.attention_dump.empty()) {
      io::write_attention_dump(m.attention_dump, detail::sibling(m.attention_dump, ".bin"),
                               io::dump_from_trace(result.trace, weights.config, prompt.layout));
    }
    return 0;
  });
}

// analyze -----------------------------------------------------------------

struct AnalyzeOptions {
  std::string dump;
  std::string layout;  // optional override of the dump's layout
  std::vector<std::size_t> block_sizes = {4};
  std::string out;     // CSV; stdout when empty
  bool force = false;
};

inline constexpr const char* kAnalyzeCsvHeader = "path,step,layer,head,metric,block_size,value";

/// Per-head BE at each block size, VAR and the head's TVER term, plus
/// per-layer aggregates (head "all": mean BE as vabe, mean VAR, summed TVER).
inline std::string analyze_dump(const io::AttentionDump& dump, const std::vector<std::size_t>& block_sizes) {
  require(!block_sizes.empty(), "analyze: at least one block size is required");
  const auto& layout = dump.layout;
  const std::size_t side = exact_sqrt(layout.visual_span.size());
  require(side > 0, "analyze: visual span length " + std::to_string(layout.visual_span.size()) +
                        " is not a perfect square");
  for (auto m : block_sizes) {
    require(m > 0 && side % m == 0, "analyze: block size " + std::to_string(m) + " does not divide grid side " +
                                        std::to_string(side));
  }

  std::ostringstream csv;
  csv << kAnalyzeCsvHeader << "\n";
  auto emit = [&](const io::AttentionRow& r, const std::string& head, const char* metric, const std::string& block,
                  std::optional<double> value) {
    csv << r.path << ',' << r.step << ',' << r.layer << ',' << head << ',' << metric << ',' << block << ','
        << (value ? io::csv_number(*value) : std::string()) << "\n";
  };
  auto tver_of = [&](std::span<const std::vector<double>> rows) -> std::optional<double> {
    try {
      return text_visual_entropy_ratio(rows, layout);
    } catch (const DegenerateInput&) {
      return std::nullopt;
    }
  };

  // Rows are grouped by (path, step, layer) in dump order.
  std::size_t i = 0;
  while (i < dump.rows.size()) {
    std::size_t j = i;
    while (j < dump.rows.size() && dump.rows[j].path == dump.rows[i].path && dump.rows[j].step == dump.rows[i].step &&
           dump.rows[j].layer == dump.rows[i].layer) {
      ++j;
    }
    std::vector<std::vector<double>> post, segments;
    for (std::size_t k = i; k < j; ++k) {
      const auto& r = dump.rows[k];
      require(layout.visual_span.end <= r.pre_softmax.size(), "analyze: layout does not fit a row of length " +
                                                                  std::to_string(r.pre_softmax.size()));
      const auto segment = visual_segment(r.pre_softmax, layout);
      for (auto m : block_sizes) {
        emit(r, std::to_string(r.head), "be", std::to_string(m), block_entropy(GridMap::from_segment(segment), m));
      }
      const std::vector<std::vector<double>> one{r.post_softmax};
      emit(r, std::to_string(r.head), "var", "", vision_attention_ratio(one, layout));
      emit(r, std::to_string(r.head), "tver", "", tver_of(one));
      post.push_back(r.post_softmax);
      segments.push_back(segment);
    }
    const auto& first = dump.rows[i];
    for (auto m : block_sizes) {
      emit(first, "all", "vabe", std::to_string(m), vision_attention_block_entropy(segments, m));
    }
    emit(first, "all", "var", "", vision_attention_ratio(post, layout));
    emit(first, "all", "tver", "", tver_of(post));
    i = j;
  }
  return csv.str();
}

inline int cmd_analyze(const AnalyzeOptions& o, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    detail::require_input(o.dump, "attention dump");
    detail::require_writable(o.out, o.force);
    auto dump = io::read_attention_dump(o.dump);
    if (!o.layout.empty()) {
      detail::require_input(o.layout, "layout file");
      dump.layout = io::layout_from_json(io::read_json_file(o.layout));
    }
    detail::write_text(o.out, analyze_dump(dump, o.block_sizes), out);
    return 0;
  });
}

// eval / ablate -----------------------------------------------------------

struct BenchmarkInputs {
  std::string config;
  std::vector<std::string> overrides;
  std::string model;     // optional; the planted scene model otherwise
  std::string fixtures;  // optional; a generated suite otherwise
  std::size_t scenes = 200;
  std::optional<std::uint64_t> fixture_seed;  // defaults to the config seed
  std::size_t threads = 0;
};

struct LoadedBenchmark {
  io::RunConfig config;
  ModelWeights weights;
  ToyVocabulary vocab;
  std::vector<SceneFixture> fixtures;
  std::uint64_t fixture_seed = 0;
  BenchmarkOptions options;
};

inline LoadedBenchmark load_benchmark(const BenchmarkInputs& in) {
  if (!in.config.empty()) detail::require_input(in.config, "config file");
  LoadedBenchmark b;
  std::optional<io::FixtureCorpus> corpus;
  if (!in.fixtures.empty()) {
    detail::require_input(in.fixtures, "fixture corpus");
    corpus = io::corpus_from_json(io::read_json_file(in.fixtures), in.fixtures);
    b.vocab = corpus->vocabulary;
  }
  if (!in.model.empty()) {
    detail::require_input(in.model, "model file");
    b.weights = io::load_model_file(in.model);
    b.config = io::load_config(in.config, in.overrides, &b.weights.config);
  } else {
    b.config = io::load_config(in.config, in.overrides);
    b.weights = build_scene_model(b.config.model, b.vocab);
  }
  if (corpus) {
    b.fixtures = std::move(corpus->scenes);
    b.fixture_seed = corpus->seed;
  } else {
    require(in.scenes >= 1, "benchmark needs at least one scene");
    b.fixture_seed = in.fixture_seed.value_or(b.config.seed);
    b.fixtures = generate_suite(detail::spec_for(b.config.model, b.config.steering.block_size), b.vocab, in.scenes,
                                b.fixture_seed);
  }
  b.options.mode = b.config.decode.mode;
  b.options.beam_width = b.config.decode.beam_width;
  b.options.threads = in.threads;
  return b;
}

struct EvalOptions {
  BenchmarkInputs inputs;
  bool baseline = true;  // also report steering disabled
  std::string out;       // JSON report; stdout when empty
  std::string csv;       // optional CSV rows, one per config
  bool force = false;
};

inline int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    detail::require_writable(o.out, o.force);
    detail::require_writable(o.csv, o.force);
    const auto b = load_benchmark(o.inputs);
    std::vector<SteeringConfig> configs{b.config.steering};
    std::vector<std::string> labels{"steered"};
    if (o.baseline) {
      configs.push_back(b.config.steering);
      configs.back().enabled = false;
      labels.push_back("vanilla");
    }
    const auto reports = run_benchmark(b.fixtures, b.weights, b.vocab, configs, b.options);
    json list = json::array();
    std::ostringstream csv;
    csv << "label," << io::kReportCsvHeader << "\n";
    for (std::size_t i = 0; i < reports.size(); ++i) {
      json r = io::report_to_json(reports[i]);
      r["label"] = labels[i];
      list.push_back(r);
      csv << labels[i] << ',' << io::report_csv_fields(reports[i]) << "\n";
    }
    const json doc = {{"schema", io::kReportSchema},
                      {"config", io::config_to_json(b.config)},
                      {"fixtures", {{"count", b.fixtures.size()}, {"seed", b.fixture_seed}}},
                      {"reports", list}};
    detail::write_text(o.out, doc.dump(2) + "\n", out);
    if (!o.csv.empty()) detail::write_text(o.csv, csv.str(), out);
    return 0;
  });
}

struct SweepSpec {
  std::string parameter;  // dotted config key, or "steering.alpha" for both alphas
  std::vector<json> values;
};

inline SweepSpec read_sweep(const std::string& path) {
  const json j = io::read_json_file(path);
  io::ObjectReader r(j, "sweep");
  std::string schema;
  if (r.read("schema", schema)) require(schema == kSweepSchema, "sweep.schema must be " + std::string(kSweepSchema));
  SweepSpec s;
  require(r.read("parameter", s.parameter), "sweep.parameter is required");
  const json* v = r.find("values");
  require(v && v->is_array() && !v->empty(), "sweep.values must be a nonempty array");
  s.values = v->get<std::vector<json>>();
  r.finish();
  return s;
}

/// Sweep value as a CSV cell: strings raw, arrays space-separated.
inline std::string sweep_value_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string s;
    for (const auto& e : v) s += (s.empty() ? "" : " ") + sweep_value_text(e);
    return s;
  }
  return v.dump();
}

/// One config per sweep value, applied on top of the effective config.
inline std::vector<std::pair<json, SteeringConfig>> sweep_configs(const SweepSpec& sweep, const io::RunConfig& base) {
  const json effective = io::config_to_json(base);
  const bool both_alphas = sweep.parameter == "steering.alpha";
  if (!both_alphas) {
    require(sweep.parameter.rfind("steering.", 0) == 0, "unknown sweep parameter '" + sweep.parameter +
                                                            "' (only steering.* keys can be swept)");
    const auto pointer = json::json_pointer("/" + [&] {
      std::string p = sweep.parameter;
      std::replace(p.begin(), p.end(), '.', '/');
      return p;
    }());
    require(effective.contains(pointer), "unknown sweep parameter '" + sweep.parameter + "'");
  }
  std::vector<std::pair<json, SteeringConfig>> out;
  for (const auto& v : sweep.values) {
    json doc = effective;
    if (both_alphas) {
      doc["steering"]["alpha_high"] = v;
      doc["steering"]["alpha_low"] = v;
    } else {
      io::apply_override(doc, sweep.parameter + "=" + v.dump());
    }
    out.emplace_back(v, io::parse_config(doc, &base.model).steering);
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

struct AblateOptions {
  BenchmarkInputs inputs;
  std::string sweep;
  std::string out;  // CSV; stdout when empty
  bool force = false;
};

inline constexpr const char* kAblateCsvPrefix = "parameter,value,";

inline int cmd_ablate(const AblateOptions& o, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    detail::require_input(o.sweep, "sweep spec");
    detail::require_writable(o.out, o.force);
    const auto sweep = read_sweep(o.sweep);
    const auto b = load_benchmark(o.inputs);
    const auto runs = sweep_configs(sweep, b.config);
    std::vector<SteeringConfig> configs;
    for (const auto& r : runs) configs.push_back(r.second);
    const auto reports = run_benchmark(b.fixtures, b.weights, b.vocab, configs, b.options);
    std::ostringstream csv;
    csv << kAblateCsvPrefix << io::kReportCsvHeader << "\n";
    for (std::size_t i = 0; i < runs.size(); ++i) {
      csv << io::csv_field(sweep.parameter) << ',' << io::csv_field(sweep_value_text(runs[i].first)) << ','
          << io::report_csv_fields(reports[i]) << "\n";
    }
    detail::write_text(o.out, csv.str(), out);
    return 0;
  });
}

// throughput ----------------------------------------------------------------

struct ThroughputOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string model;  // optional; synthesized from the config otherwise
  std::size_t tokens = 32;
  std::size_t repeats = 3;
  std::string out;    // JSON; stdout when empty
  bool force = false;
};

inline int cmd_throughput(const ThroughputOptions& o, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    if (!o.config.empty()) detail::require_input(o.config, "config file");
    detail::require_writable(o.out, o.force);
    ModelWeights weights;
    io::RunConfig config;
    if (!o.model.empty()) {
      detail::require_input(o.model, "model file");
      weights = io::load_model_file(o.model);
      config = io::load_config(o.config, o.overrides, &weights.config);
    } else {
      config = io::load_config(o.config, o.overrides);
      weights = synthesize_weights(config.model);
    }
    ToyVocabulary vocab;
    require(weights.config.vocab_size >= vocab.size(), "throughput needs a vocabulary of at least " +
                                                           std::to_string(vocab.size()) + " tokens");
    const auto scene =
        generate_fixture(detail::spec_for(weights.config, config.steering.block_size), vocab, config.seed);
    const Prompt prompt = caption_prompt(scene);

    SteeringConfig sequential = config.steering, parallel = config.steering;
    sequential.parallel = false;
    parallel.parallel = true;
    const auto seq = measure_throughput(weights, prompt, scene.ve_concentrated, sequential, o.tokens, o.repeats);
    const auto par = measure_throughput(weights, prompt, scene.ve_concentrated, parallel, o.tokens, o.repeats);
    const json doc = {{"schema", "vegas.throughput/1"},
                      {"config", io::config_to_json(config)},
                      {"tokens", o.tokens},
                      {"repeats", o.repeats},
                      {"hardware_threads", std::thread::hardware_concurrency()},
                      {"vanilla_tokens_per_second", seq.vanilla_tokens_per_second},
                      {"steered_tokens_per_second", seq.steered_tokens_per_second},
                      {"steered_parallel_tokens_per_second", par.steered_tokens_per_second},
                      {"steered_to_vanilla", seq.steered_tokens_per_second / seq.vanilla_tokens_per_second},
                      {"parallel_speedup", par.steered_tokens_per_second / seq.steered_tokens_per_second}};
    detail::write_text(o.out, doc.dump(2) + "\n", out);
    return 0;
  });
}

// model and fixture generation ----------------------------------------------

struct SynthModelOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;  // .bin; the manifest goes to the same stem with .json
  bool scene = true;  // plant the scene circuit; plain random weights otherwise
  double scale = 1.0;
  bool force = false;
};

inline int cmd_synth_model(const SynthModelOptions& o, std::ostream&, std::ostream& err) {
  return detail::guarded(err, [&] {
    if (!o.config.empty()) detail::require_input(o.config, "config file");
    require(!o.out.empty(), "synth-model needs an output path");
    const auto manifest = detail::sibling(o.out, ".json");
    require(manifest != o.out, "synth-model output must not end in .json");
    detail::require_writable(o.out, o.force);
    detail::require_writable(manifest, o.force);
    const auto config = io::load_config(o.config, o.overrides);
    const ModelWeights w = o.scene ? build_scene_model(config.model, ToyVocabulary{})
                                   : synthesize_weights(config.model, o.scale);
    io::save_model_file(o.out, w);
    std::ofstream m(manifest, std::ios::trunc);
    require(static_cast<bool>(m), "cannot write " + manifest);
    m << io::model_manifest(w, std::filesystem::path(o.out).filename().string()).dump(2) << "\n";
    return 0;
  });
}

struct MakeFixturesOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::size_t count = 200;
  std::optional<std::uint64_t> seed;  // defaults to the config seed
  bool query_aggregate = false;
  std::string out;  // JSON corpus; stdout when empty
  bool force = false;
};

inline int cmd_make_fixtures(const MakeFixturesOptions& o, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    if (!o.config.empty()) detail::require_input(o.config, "config file");
    detail::require_writable(o.out, o.force);
    const auto config = io::load_config(o.config, o.overrides);
    auto spec = detail::spec_for(config.model, config.steering.block_size);
    if (o.query_aggregate) spec.source_kind = VESourceKind::query_aggregate;
    io::FixtureCorpus corpus;
    corpus.seed = o.seed.value_or(config.seed);
    corpus.scenes = generate_suite(spec, corpus.vocabulary, o.count, corpus.seed);
    detail::write_text(o.out, io::corpus_to_json(corpus).dump() + "\n", out);
    return 0;
  });
}

}  // namespace vegas::cli
