#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <json.hpp>

#include <sys/wait.h>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int status = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out(1);
  for (char c : line) {
    if (c == ',') out.emplace_back();
    else out.back() += c;
  }
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("vegas_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  Result vegas(const std::string& args, const std::string& env = "") const {
    const auto out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = env + (env.empty() ? "" : " ") + std::string(VEGAS_CLI_BINARY) + " " + args + " >" +
                            out.string() + " 2>" + err.string();
    const int raw = std::system(cmd.c_str());
    Result r;
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  void write(const std::string& name, const std::string& text) const { std::ofstream(path(name)) << text; }

  // Model and a three-scene corpus shared by the run tests.
  void make_inputs() const {
    ASSERT_EQ(vegas("synth-model -o " + path("model.bin")).status, 0);
    ASSERT_EQ(vegas("make-fixtures --count 3 --seed 4 -o " + path("fixtures.json")).status, 0);
  }

  std::string run_args(const std::string& extra = "") const {
    return "run --model " + path("model.bin") + " --fixtures " + path("fixtures.json") + " --scene 1 --tokens-out " +
           path("tokens.json") + " --trace-out " + path("trace.jsonl") + " --summary-out " + path("summary.json") +
           " " + extra;
  }

  // Manifest plus f64 payload written without the library's writer.
  void write_dump(const std::string& name, std::size_t text_before, std::size_t visual, std::size_t text_after,
                  std::size_t layers, std::size_t heads, const std::vector<std::vector<double>>& pre,
                  const std::vector<std::vector<double>>& post) const {
    json rows = json::array();
    std::ofstream payload(path(name + ".f64"), std::ios::binary);
    std::size_t k = 0;
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t h = 0; h < heads; ++h, ++k) {
        rows.push_back({{"path", "vanilla"}, {"step", 1}, {"layer", l}, {"head", h}, {"length", pre[k].size()}});
        payload.write(reinterpret_cast<const char*>(pre[k].data()), std::streamsize(pre[k].size() * 8));
        payload.write(reinterpret_cast<const char*>(post[k].data()), std::streamsize(post[k].size() * 8));
      }
    }
    json layout = {{"visual_span", {text_before, text_before + visual}},
                   {"text_spans", json::array()},
                   {"total_prompt_len", text_before + visual + text_after}};
    if (text_before) layout["text_spans"].push_back({0, text_before});
    if (text_after) layout["text_spans"].push_back({text_before + visual, text_before + visual + text_after});
    const json manifest = {{"schema", "vegas.attention-dump/1"}, {"payload", name + ".f64"}, {"dtype", "f64"},
                           {"num_layers", layers},               {"num_heads", heads},        {"layout", layout},
                           {"rows", rows}};
    write(name + ".json", manifest.dump());
  }

  fs::path dir_;
};

std::optional<double> csv_value(const std::string& csv, const std::string& layer, const std::string& head,
                                const std::string& metric, const std::string& block = "") {
  for (const auto& line : lines_of(csv)) {
    const auto f = split_csv(line);
    if (f.size() == 7 && f[2] == layer && f[3] == head && f[4] == metric && f[5] == block) {
      if (f[6].empty()) return std::nullopt;
      return std::stod(f[6]);
    }
  }
  return std::nullopt;
}

}  // namespace

TEST_F(Cli, SynthModelRefusesToOverwriteWithoutForce) {
  ASSERT_EQ(vegas("synth-model -o " + path("m.bin")).status, 0);
  EXPECT_TRUE(fs::exists(path("m.json")));
  const auto bytes = slurp(path("m.bin"));
  const auto again = vegas("synth-model -o " + path("m.bin"));
  EXPECT_NE(again.status, 0);
  EXPECT_NE(again.err.find("refusing to overwrite"), std::string::npos);
  ASSERT_EQ(vegas("synth-model --force -o " + path("m.bin")).status, 0);
  EXPECT_EQ(slurp(path("m.bin")), bytes);
  const auto manifest = json::parse(slurp(path("m.json")));
  EXPECT_EQ(manifest["schema"], "vegas.model/1");
  EXPECT_EQ(manifest["config"]["num_layers"], 8);
}

TEST_F(Cli, RunWritesTokensTraceAndSummary) {
  make_inputs();
  const auto r = vegas(run_args());
  ASSERT_EQ(r.status, 0) << r.err;
  const auto tokens = json::parse(slurp(path("tokens.json")));
  EXPECT_EQ(tokens["schema"], "vegas.tokens/1");
  const auto trace = lines_of(slurp(path("trace.jsonl")));
  ASSERT_EQ(trace.size(), tokens["tokens"].size());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto rec = json::parse(trace[i]);
    EXPECT_EQ(rec["step"], i + 1);
    EXPECT_EQ(rec["token"], tokens["tokens"][i]);
    EXPECT_EQ(rec["layers"].size(), 8u);
    for (const auto& l : rec["layers"]) {
      EXPECT_GE(l["var"].get<double>(), 0.0);
      EXPECT_LE(l["var"].get<double>(), 1.0);
    }
    EXPECT_TRUE(rec["steering"].contains("alpha"));
  }
  const auto summary = json::parse(slurp(path("summary.json")));
  EXPECT_EQ(summary["schema"], "vegas.run-summary/1");
}

TEST_F(Cli, RerunWithForceIsByteIdentical) {
  make_inputs();
  ASSERT_EQ(vegas(run_args()).status, 0);
  const auto a = slurp(path("tokens.json")) + slurp(path("trace.jsonl")) + slurp(path("summary.json"));
  const auto refused = vegas(run_args());
  EXPECT_NE(refused.status, 0);
  EXPECT_NE(refused.err.find("refusing to overwrite"), std::string::npos);
  ASSERT_EQ(vegas(run_args("--force")).status, 0);
  const auto b = slurp(path("tokens.json")) + slurp(path("trace.jsonl")) + slurp(path("summary.json"));
  EXPECT_EQ(a, b);
}

TEST_F(Cli, MissingModelNamesThePath) {
  const auto r = vegas("run --model " + path("nope.bin") + " --prompt x --tokens-out a --trace-out b --summary-out c");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("model file not found: " + path("nope.bin")), std::string::npos);
}

TEST_F(Cli, InvalidConfigNamesTheKey) {
  make_inputs();
  write("bad.json", R"({"steering": {"etaa": 0.3}})");
  const auto r = vegas(run_args("-c " + path("bad.json")));
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("steering.etaa"), std::string::npos);
}

TEST_F(Cli, SeedEnvironmentChangesTheRecordedSeed) {
  make_inputs();
  ASSERT_EQ(vegas(run_args(), "VEGAS_SEED=1234").status, 0);
  const auto summary = json::parse(slurp(path("summary.json")));
  EXPECT_NE(summary.dump().find("1234"), std::string::npos);
}

TEST_F(Cli, ManifestDrivesARun) {
  make_inputs();
  const json m = {{"schema", "vegas.run/1"},
                  {"model", "model.bin"},
                  {"fixtures", "fixtures.json"},
                  {"scene", 2},
                  {"task", "pope"},
                  {"object", 0},
                  {"overrides", {"decode.max_new_tokens=1"}},
                  {"outputs", {{"tokens", "t.json"}, {"trace", "t.jsonl"}, {"summary", "s.json"}}}};
  write("run.json", m.dump());
  const auto r = vegas("run --manifest " + path("run.json"));
  ASSERT_EQ(r.status, 0) << r.err;
  const auto tokens = json::parse(slurp(path("t.json")));
  ASSERT_EQ(tokens["tokens"].size(), 1u);
  const int answer = tokens["tokens"][0];
  EXPECT_TRUE(answer == 5 || answer == 6);
}

TEST_F(Cli, DumpThenAnalyze) {
  make_inputs();
  ASSERT_EQ(vegas(run_args("--dump-attention " + path("attn.json"))).status, 0);
  EXPECT_TRUE(fs::exists(path("attn.bin")));
  const auto r = vegas("analyze " + path("attn.json") + " -m 2 4");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto lines = lines_of(r.out);
  ASSERT_GT(lines.size(), 1u);
  EXPECT_EQ(lines[0], "path,step,layer,head,metric,block_size,value");
  bool saw_replaced = false;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split_csv(lines[i]);
    ASSERT_EQ(f.size(), 7u);
    saw_replaced = saw_replaced || f[0] == "replaced";
    if (f[4] == "var") {
      EXPECT_GE(std::stod(f[6]), 0.0);
      EXPECT_LE(std::stod(f[6]), 1.0);
    }
  }
  EXPECT_TRUE(saw_replaced);
}

TEST_F(Cli, AnalyzeUniformGridGivesLogBlockCount) {
  const std::size_t n = 576 + 2;
  std::vector<std::vector<double>> pre = {std::vector<double>(n, 0.25)};
  std::vector<std::vector<double>> post = {std::vector<double>(n, 1.0 / double(n))};
  write_dump("u", 1, 576, 1, 1, 1, pre, post);
  const auto r = vegas("analyze " + path("u.json") + " -m 4");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto be = csv_value(r.out, "0", "0", "be", "4");
  ASSERT_TRUE(be.has_value());
  EXPECT_NEAR(*be, std::log(36.0), 1e-9);
  EXPECT_NEAR(*csv_value(r.out, "0", "all", "vabe", "4"), std::log(36.0), 1e-9);
  // Uniform rows: VAR = 576/578, TVER = ln 2 / ln 576.
  EXPECT_NEAR(*csv_value(r.out, "0", "0", "var"), 576.0 / 578.0, 1e-12);
  EXPECT_NEAR(*csv_value(r.out, "0", "0", "tver"), std::log(2.0) / std::log(576.0), 1e-12);
}

TEST_F(Cli, AnalyzeHandBuiltTwoLayerDump) {
  // [t][v v v v][t], two layers, one head each.
  std::vector<std::vector<double>> pre = {{0, 1, 1, 1, 1, 0}, {0, 5, 0, 0, 0, 0}};
  std::vector<std::vector<double>> post = {{0.1, 0.2, 0.2, 0.2, 0.2, 0.1}, {0.5, 0.125, 0.125, 0.125, 0.125, 0.0}};
  write_dump("two", 1, 4, 1, 2, 1, pre, post);
  const auto r = vegas("analyze " + path("two.json") + " -m 1 -m 2");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NEAR(*csv_value(r.out, "0", "0", "var"), 0.8, 1e-12);
  EXPECT_NEAR(*csv_value(r.out, "1", "0", "var"), 0.5, 1e-12);
  EXPECT_NEAR(*csv_value(r.out, "0", "0", "be", "1"), std::log(4.0), 1e-12);
  EXPECT_NEAR(*csv_value(r.out, "0", "0", "be", "2"), 0.0, 1e-12);
  // Layer 1, m = 1: softmax over {5, 0, 0, 0}.
  const double z = std::exp(5.0) + 3.0;
  const double p0 = std::exp(5.0) / z, p1 = 1.0 / z;
  EXPECT_NEAR(*csv_value(r.out, "1", "0", "be", "1"), -(p0 * std::log(p0) + 3 * p1 * std::log(p1)), 1e-12);
  // Layer 0 text: two equal weights (ln 2); visual: uniform over 4 (ln 4).
  EXPECT_NEAR(*csv_value(r.out, "0", "0", "tver"), std::log(2.0) / std::log(4.0), 1e-12);
  // Layer 1 text is a point mass on the first token: TVER is 0.
  EXPECT_NEAR(*csv_value(r.out, "1", "0", "tver"), 0.0, 1e-12);
}

TEST_F(Cli, AnalyzeRejectsNonDividingBlockSize) {
  std::vector<std::vector<double>> pre = {std::vector<double>(578, 0.0)};
  write_dump("u", 1, 576, 1, 1, 1, pre, pre);
  const auto r = vegas("analyze " + path("u.json") + " -m 5");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("does not divide"), std::string::npos);
}

TEST_F(Cli, AblateAlphaGridGivesOneRowPerValue) {
  write("sweep.json", R"({"schema": "vegas.sweep/1", "parameter": "steering.alpha", "values": [1.0, 0.0, 0.5]})");
  const auto r = vegas("ablate " + path("sweep.json") + " --scenes 4");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto lines = lines_of(r.out);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0].rfind("parameter,value,chair_s,chair_i,pope_accuracy,pope_f1", 0), 0u);
  EXPECT_EQ(split_csv(lines[1])[1], "0.0");
  EXPECT_EQ(split_csv(lines[2])[1], "0.5");
  EXPECT_EQ(split_csv(lines[3])[1], "1.0");
  for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(split_csv(lines[i])[0], "steering.alpha");
}

TEST_F(Cli, AblateLayerSetsAcceptNames) {
  write("sweep.json", R"({"parameter": "steering.replaced_layers", "values": [["mid", "mid+1"], [0]]})");
  const auto r = vegas("ablate " + path("sweep.json") + " --scenes 3");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(lines_of(r.out).size(), 3u);
}

TEST_F(Cli, AblateUnknownParameterFails) {
  write("sweep.json", R"({"parameter": "steering.temperature", "values": [1]})");
  const auto r = vegas("ablate " + path("sweep.json") + " --scenes 2");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("unknown sweep parameter 'steering.temperature'"), std::string::npos);
}

TEST_F(Cli, EvalReportsSteeredAndVanilla) {
  const auto r = vegas("eval --scenes 6 --csv " + path("eval.csv"));
  ASSERT_EQ(r.status, 0) << r.err;
  const auto doc = json::parse(r.out);
  EXPECT_EQ(doc["schema"], "vegas.eval-report/1");
  ASSERT_EQ(doc["reports"].size(), 2u);
  EXPECT_EQ(doc["reports"][0]["label"], "steered");
  EXPECT_EQ(doc["reports"][1]["label"], "vanilla");
  EXPECT_LE(doc["reports"][0]["chair_s"].get<double>(), doc["reports"][1]["chair_s"].get<double>());
  EXPECT_EQ(lines_of(slurp(path("eval.csv"))).size(), 3u);
}

TEST_F(Cli, EvalOnSavedCorpusMatchesGeneratedSuite) {
  ASSERT_EQ(vegas("make-fixtures --count 5 --seed 9 -o " + path("fx.json")).status, 0);
  const auto a = vegas("eval --fixtures " + path("fx.json"));
  const auto b = vegas("eval --scenes 5 --fixture-seed 9");
  ASSERT_EQ(a.status, 0) << a.err;
  ASSERT_EQ(b.status, 0) << b.err;
  EXPECT_EQ(json::parse(a.out)["reports"], json::parse(b.out)["reports"]);
}

TEST_F(Cli, ThroughputReportsRatios) {
  const auto r = vegas("throughput --tokens 4 --repeats 1");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto doc = json::parse(r.out);
  EXPECT_EQ(doc["schema"], "vegas.throughput/1");
  EXPECT_GT(doc["steered_to_vanilla"].get<double>(), 0.0);
  EXPECT_GT(doc["parallel_speedup"].get<double>(), 0.0);
}

TEST_F(Cli, UnknownSubcommandFails) { EXPECT_NE(vegas("frobnicate").status, 0); }
