// vegas: steered decoding, attention analysis and benchmark sweeps on the
// toy decoder. See README.md and docs/formats.md for the file formats.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vegas/cli/commands.hpp"

namespace {

struct ConfigFlags {
  std::string config;
  std::vector<std::string> overrides;
  bool force = false;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("-c,--config", f.config, "Config file (vegas.config/1); built-in defaults when omitted");
  cmd->add_option("--set", f.overrides, "Override a config key, e.g. --set steering.eta=0.25")->take_all();
  cmd->add_flag("-f,--force", f.force, "Overwrite existing output files");
}

void add_benchmark_flags(CLI::App* cmd, vegas::cli::BenchmarkInputs& in, std::optional<std::uint64_t>& seed) {
  cmd->add_option("--model", in.model, "Model file; the planted scene model when omitted");
  cmd->add_option("--fixtures", in.fixtures, "Fixture corpus (vegas.fixtures/1); generated when omitted");
  cmd->add_option("--scenes", in.scenes, "Number of generated scenes")->check(CLI::PositiveNumber);
  cmd->add_option("--fixture-seed", seed, "Seed for generated scenes (default: config seed)");
  cmd->add_option("--threads", in.threads, "Worker threads (0: all cores)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VEGAS-style attention injection and logits steering on a toy decoder"};
  app.require_subcommand(1);
  int status = 0;

  // run
  vegas::cli::RunManifest run;
  ConfigFlags run_flags;
  std::string manifest_path;
  std::optional<std::uint64_t> run_seed;
  auto* run_cmd = app.add_subcommand("run", "Decode one prompt and write tokens, a JSONL trace and a summary");
  add_config_flags(run_cmd, run_flags);
  run_cmd->add_option("--manifest", manifest_path, "Run manifest (vegas.run/1); flags override its fields");
  run_cmd->add_option("--model", run.model, "Model file");
  run_cmd->add_option("--prompt", run.prompt, "Prompt file (vegas.prompt/1)");
  run_cmd->add_option("--ve", run.ve, "VE attention maps (vegas.ve-attention/1)");
  run_cmd->add_option("--fixtures", run.fixtures, "Take the prompt and VE maps from a fixture corpus");
  run_cmd->add_option("--scene", run.scene, "Scene index in the fixture corpus");
  run_cmd->add_option("--task", run.task, "caption or pope")->check(CLI::IsMember({"caption", "pope"}));
  run_cmd->add_option("--object", run.object, "Queried object for the pope task");
  run_cmd->add_option("--tokens-out", run.tokens_out, "Generated tokens (JSON)");
  run_cmd->add_option("--trace-out", run.trace_out, "Per-step trace (JSON Lines)");
  run_cmd->add_option("--summary-out", run.summary_out, "Run summary (JSON)");
  run_cmd->add_option("--dump-attention", run.attention_dump, "Attention dump manifest; payload goes next to it");
  run_cmd->add_option("--seed", run_seed, "Seed (overrides the config; VEGAS_SEED overrides this)");
  run_cmd->callback([&] {
    vegas::cli::RunManifest m = run;
    if (!manifest_path.empty()) {
      try {
        m = vegas::cli::read_run_manifest(manifest_path);
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        status = 1;
        return;
      }
      auto take = [](std::string& dst, const std::string& src) {
        if (!src.empty()) dst = src;
      };
      take(m.model, run.model);
      take(m.prompt, run.prompt);
      take(m.ve, run.ve);
      take(m.fixtures, run.fixtures);
      take(m.tokens_out, run.tokens_out);
      take(m.trace_out, run.trace_out);
      take(m.summary_out, run.summary_out);
      take(m.attention_dump, run.attention_dump);
      if (run_cmd->count("--scene")) m.scene = run.scene;
      if (run_cmd->count("--task")) m.task = run.task;
      if (run_cmd->count("--object")) m.object = run.object;
    }
    if (!run_flags.config.empty()) m.config = run_flags.config;
    m.overrides.insert(m.overrides.end(), run_flags.overrides.begin(), run_flags.overrides.end());
    if (run_seed) m.seed = run_seed;
    m.force = m.force || run_flags.force;
    status = vegas::cli::cmd_run(m, std::cout, std::cerr);
  });

  // analyze
  vegas::cli::AnalyzeOptions analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "Block entropy, VAR and TVER of an attention dump, as CSV");
  analyze_cmd->add_option("dump", analyze.dump, "Attention dump manifest (vegas.attention-dump/1)")->required();
  analyze_cmd->add_option("--layout", analyze.layout, "Layout file overriding the dump's layout");
  analyze_cmd->add_option("-m,--block-size", analyze.block_sizes, "Block sizes (repeatable)")->take_all();
  analyze_cmd->add_option("-o,--out", analyze.out, "CSV output (stdout when omitted)");
  analyze_cmd->add_flag("-f,--force", analyze.force, "Overwrite an existing output file");
  analyze_cmd->callback([&] { status = vegas::cli::cmd_analyze(analyze, std::cout, std::cerr); });

  // eval
  vegas::cli::EvalOptions eval;
  ConfigFlags eval_flags;
  std::optional<std::uint64_t> eval_seed;
  bool no_baseline = false;
  auto* eval_cmd = app.add_subcommand("eval", "CHAIR and POPE on the fixture suite, steered and vanilla");
  add_config_flags(eval_cmd, eval_flags);
  add_benchmark_flags(eval_cmd, eval.inputs, eval_seed);
  eval_cmd->add_flag("--no-baseline", no_baseline, "Skip the steering-disabled baseline");
  eval_cmd->add_option("-o,--out", eval.out, "JSON report (stdout when omitted)");
  eval_cmd->add_option("--csv", eval.csv, "CSV rows, one per config");
  eval_cmd->callback([&] {
    eval.inputs.config = eval_flags.config;
    eval.inputs.overrides = eval_flags.overrides;
    eval.inputs.fixture_seed = eval_seed;
    eval.baseline = !no_baseline;
    eval.force = eval_flags.force;
    status = vegas::cli::cmd_eval(eval, std::cout, std::cerr);
  });

  // ablate
  vegas::cli::AblateOptions ablate;
  ConfigFlags ablate_flags;
  std::optional<std::uint64_t> ablate_seed;
  auto* ablate_cmd = app.add_subcommand("ablate", "Benchmark a sweep over one steering parameter, as CSV");
  add_config_flags(ablate_cmd, ablate_flags);
  add_benchmark_flags(ablate_cmd, ablate.inputs, ablate_seed);
  ablate_cmd->add_option("sweep", ablate.sweep, "Sweep spec (vegas.sweep/1)")->required();
  ablate_cmd->add_option("-o,--out", ablate.out, "CSV output (stdout when omitted)");
  ablate_cmd->callback([&] {
    ablate.inputs.config = ablate_flags.config;
    ablate.inputs.overrides = ablate_flags.overrides;
    ablate.inputs.fixture_seed = ablate_seed;
    ablate.force = ablate_flags.force;
    status = vegas::cli::cmd_ablate(ablate, std::cout, std::cerr);
  });

  // throughput
  vegas::cli::ThroughputOptions tp;
  ConfigFlags tp_flags;
  auto* tp_cmd = app.add_subcommand("throughput", "Tokens/second of vanilla, steered and parallel steered decoding");
  add_config_flags(tp_cmd, tp_flags);
  tp_cmd->add_option("--model", tp.model, "Model file; synthesized from the config when omitted");
  tp_cmd->add_option("--tokens", tp.tokens, "Tokens per run")->check(CLI::PositiveNumber);
  tp_cmd->add_option("--repeats", tp.repeats, "Timed runs per mode")->check(CLI::PositiveNumber);
  tp_cmd->add_option("-o,--out", tp.out, "JSON output (stdout when omitted)");
  tp_cmd->callback([&] {
    tp.config = tp_flags.config;
    tp.overrides = tp_flags.overrides;
    tp.force = tp_flags.force;
    status = vegas::cli::cmd_throughput(tp, std::cout, std::cerr);
  });

  // synth-model
  vegas::cli::SynthModelOptions synth;
  ConfigFlags synth_flags;
  bool random_only = false;
  auto* synth_cmd = app.add_subcommand("synth-model", "Write a model file and its JSON manifest");
  add_config_flags(synth_cmd, synth_flags);
  synth_cmd->add_option("-o,--out", synth.out, "Model file (.bin); manifest gets the .json extension")->required();
  synth_cmd->add_flag("--random", random_only, "Plain scaled-uniform weights without the scene circuit");
  synth_cmd->add_option("--scale", synth.scale, "Weight scale for --random");
  synth_cmd->callback([&] {
    synth.config = synth_flags.config;
    synth.overrides = synth_flags.overrides;
    synth.force = synth_flags.force;
    synth.scene = !random_only;
    status = vegas::cli::cmd_synth_model(synth, std::cout, std::cerr);
  });

  // make-fixtures
  vegas::cli::MakeFixturesOptions fx;
  ConfigFlags fx_flags;
  auto* fx_cmd = app.add_subcommand("make-fixtures", "Write a seeded scene corpus (vegas.fixtures/1)");
  add_config_flags(fx_cmd, fx_flags);
  fx_cmd->add_option("--count", fx.count, "Number of scenes")->check(CLI::PositiveNumber);
  fx_cmd->add_option("--seed", fx.seed, "Corpus seed (default: config seed)");
  fx_cmd->add_flag("--query-aggregate", fx.query_aggregate, "Aggregate per-query VE logits instead of a CLS row");
  fx_cmd->add_option("-o,--out", fx.out, "Corpus output (stdout when omitted)");
  fx_cmd->callback([&] {
    fx.config = fx_flags.config;
    fx.overrides = fx_flags.overrides;
    fx.force = fx_flags.force;
    status = vegas::cli::cmd_make_fixtures(fx, std::cout, std::cerr);
  });

  CLI11_PARSE(app, argc, argv);
  return status;
}
