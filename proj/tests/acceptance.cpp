// Acceptance runner: one PASS/FAIL line per criterion, exit status is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <numeric>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "oracles.hpp"
#include "vegas/vegas.hpp"
#include "vegas/io/config_io.hpp"

using namespace vegas;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  std::printf("%s  %2d  %-34s %s\n", ok ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const ToyVocabulary kVocab;

// 1. Block Entropy against the brute-force oracle, and the uniform closed form.
void block_entropy_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1001);
  const std::size_t sides[] = {8, 16, 24};
  const std::size_t blocks[] = {2, 4, 8};
  double worst = 0.0, worst_uniform = 0.0;
  int grids = 0;
  while (grids < 1000) {
    const std::size_t side = sides[rng.below(3)];
    const std::size_t m = blocks[rng.below(3)];
    if (side % m) continue;
    std::vector<double> v(side * side);
    const double scale = std::pow(10.0, rng.uniform(-2, 1));
    for (auto& x : v) x = rng.uniform(-scale, scale);
    const double got = block_entropy(GridMap(side, v), m);
    worst = std::max(worst, std::abs(got - oracle::block_entropy(v, side, m)));
    const double c = rng.uniform(-3, 3);
    const double uniform = block_entropy(GridMap(side, std::vector<double>(side * side, c)), m);
    const double b = static_cast<double>(side / m);
    worst_uniform = std::max(worst_uniform, std::abs(uniform - std::log(b * b)));
    ++grids;
  }
  const double secs = seconds_since(t0);
  report(1, worst <= 1e-9 && worst_uniform <= 1e-9 && secs < 10.0, "block entropy vs oracle",
         fmt("1000 grids, max |err| %.2e, uniform max |err| %.2e, %.3f s", worst, worst_uniform, secs));
}

// 2. Shift and whole-block-permutation invariance, and the clustering property.
void block_entropy_invariances() {
  Rng rng(1002);
  const std::size_t sides[] = {8, 16, 24};
  double shift_err = 0.0, perm_err = 0.0;
  for (int k = 0; k < 500; ++k) {
    const std::size_t side = sides[rng.below(3)];
    const std::size_t m = side == 24 ? (rng.below(2) ? 4 : 8) : (std::size_t{1} << (1 + rng.below(3)));
    std::vector<double> v(side * side);
    for (auto& x : v) x = rng.uniform(-2, 2);
    const double base = block_entropy(GridMap(side, v), m);
    const double c = rng.uniform(-50, 50);
    auto shifted = v;
    for (auto& x : shifted) x += c;
    shift_err = std::max(shift_err, std::abs(block_entropy(GridMap(side, shifted), m) - base));

    const std::size_t b = side / m;
    std::vector<std::size_t> order(b * b);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    std::vector<double> permuted(v.size());
    for (std::size_t dst = 0; dst < order.size(); ++dst) {
      const std::size_t src = order[dst];
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c2 = 0; c2 < m; ++c2)
          permuted[((dst / b) * m + r) * side + (dst % b) * m + c2] = v[((src / b) * m + r) * side + (src % b) * m + c2];
    }
    perm_err = std::max(perm_err, std::abs(block_entropy(GridMap(side, permuted), m) - base));
  }

  // Probability-like maps: a few strong cells plus a weak floor. The clustered
  // arrangement packs the strongest cells into as few blocks as possible.
  struct Case {
    std::size_t side, m, hot;
  };
  const Case cases[] = {{8, 2, 4}, {8, 4, 6}, {16, 4, 12}, {16, 8, 20}, {24, 4, 16}, {24, 8, 40}};
  double worst_share = 1.0;
  for (std::size_t f = 0; f < std::size(cases); ++f) {
    const auto [side, m, hot] = cases[f];
    std::vector<double> cells(side * side);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i < hot ? rng.uniform(5, 10) : rng.uniform(0, 1);
    const double total = std::accumulate(cells.begin(), cells.end(), 0.0);
    for (auto& x : cells) x /= total;
    std::sort(cells.begin(), cells.end(), std::greater<>());
    const std::size_t b = side / m;
    std::vector<double> clustered(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const std::size_t block = i / (m * m), within = i % (m * m);
      clustered[((block / b) * m + within / m) * side + (block % b) * m + within % m] = cells[i];
    }
    const double be_clustered = block_entropy(GridMap(side, clustered), m);
    int ok = 0;
    for (int s = 0; s < 100; ++s) {
      auto shuffled = cells;
      rng.shuffle(shuffled.begin(), shuffled.end());
      ok += be_clustered <= block_entropy(GridMap(side, shuffled), m);
    }
    worst_share = std::min(worst_share, ok / 100.0);
  }
  report(2, shift_err <= 1e-9 && perm_err <= 1e-9 && worst_share >= 0.99, "block entropy invariances",
         fmt("shift max %.2e, permutation max %.2e, clustered <= shuffled in >= %.0f%% per fixture (6 fixtures)",
             shift_err, perm_err, 100 * worst_share));
}

// 3. replace_segment keeps the slice mean and every other position.
void replace_segment_contract() {
  Rng rng(1003);
  double mean_err = 0.0;
  bool untouched = true;
  for (int k = 0; k < 500; ++k) {
    const std::size_t side = 2 + rng.below(7);
    const std::size_t nv = side * side, before = rng.below(6), after = rng.below(10);
    const auto layout = make_layout(before, nv, after);
    std::vector<double> row(before + nv + after + rng.below(5)), ve(nv);
    for (auto& x : row) x = rng.uniform(-20, 20);
    for (auto& x : ve) x = rng.uniform(-5, 5) * std::pow(10.0, rng.uniform(-3, 2));
    const auto out = replace_segment(row, layout, ve);
    double a = 0.0, b = 0.0;
    for (std::size_t i = before; i < before + nv; ++i) {
      a += row[i];
      b += out[i];
    }
    mean_err = std::max(mean_err, std::abs(a - b) / static_cast<double>(nv));
    for (std::size_t i = 0; i < row.size(); ++i) {
      if ((i < before || i >= before + nv) && std::memcmp(&row[i], &out[i], sizeof(double)) != 0) untouched = false;
    }
  }
  report(3, mean_err <= 1e-12 && untouched, "replace_segment contract",
         fmt("500 rows, slice mean max |err| %.2e, non-slice bit-identical: %s", mean_err, untouched ? "yes" : "no"));
}

Prompt random_prompt(Rng& rng, const ModelConfig& m) {
  const std::size_t before = 1 + rng.below(2), after = 1 + rng.below(5);
  Prompt p;
  for (std::size_t i = 0; i < before + m.num_visual_tokens + after; ++i)
    p.tokens.push_back(static_cast<TokenId>(rng.below(kVocab.size())));
  p.layout = make_layout(before, m.num_visual_tokens, after);
  return p;
}

VEAttentionSet random_ve(Rng& rng, const ModelConfig& m) {
  VEAttentionSet ve;
  for (std::size_t h = 0; h < m.ve_num_heads; ++h) {
    std::vector<double> head(m.num_visual_tokens);
    for (auto& x : head) x = rng.uniform(-3, 3);
    ve.heads.push_back(head);
  }
  return ve;
}

// 4. Identity configurations.
void identity_configurations(const ModelWeights& w) {
  const auto& m = w.config;
  Rng rng(1004);
  auto identity = SteeringConfig::defaults_for(m);
  identity.replaced_layers.clear();
  identity.gamma = 0.0;
  auto vanilla = identity;
  vanilla.enabled = false;
  auto zero_alpha = SteeringConfig::defaults_for(m);
  zero_alpha.alpha_high = zero_alpha.alpha_low = 0.0;

  DecodeOptions opts;
  opts.max_new_tokens = 12;
  opts.stop_on_eos = false;
  int same = 0, alpha_same = 0, alpha_steps = 0;
  for (int k = 0; k < 50; ++k) {
    const auto prompt = random_prompt(rng, m);
    const auto ve = random_ve(rng, m);
    const DecoderSession a(w, identity, ve), b(w, vanilla, ve);
    const auto x = a.greedy(prompt, opts), y = b.greedy(prompt, opts);
    bool eq = x.tokens == y.tokens;
    for (std::size_t i = 0; eq && i < x.trace.size(); ++i)
      eq = std::memcmp(&x.trace[i].step_logprob, &y.trace[i].step_logprob, sizeof(double)) == 0;
    same += eq;

    const Steerer s(w, zero_alpha, ve);
    auto paths = DecoderSession(w, zero_alpha, ve).start(prompt);
    DecoderState plain = paths.vanilla;
    TokenId token = paths.pending;
    bool ok = true;
    for (int step = 0; step < 4; ++step) {
      const auto out = s.step(paths.vanilla, paths.replaced, token, false);
      const auto ref = forward_step(w, plain, token, nullptr, false);
      ok = ok && out.logits == ref.logits && out.logits == out.vanilla_logits;
      ++alpha_steps;
      token = argmax_token(ref.logits);
    }
    alpha_same += ok;
  }
  report(4, same == 50 && alpha_same == 50, "identity configurations",
         fmt("empty layers + gamma 0: %d/50 prompts bit-identical; alpha 0: %d/50 prompts (%d steps) identical",
             same, alpha_same, alpha_steps));
}

// 5. Replaced layers leave earlier K/V entries untouched.
void cache_containment(const ModelWeights& w) {
  const auto& m = w.config;
  const auto fixture = generate_fixture(FixtureSpec{}, kVocab, 1005);
  auto config = SteeringConfig::defaults_for(m);
  config.replaced_layers = {3, 4};
  const DecoderSession session(w, config, fixture.ve_concentrated);
  auto paths = session.start(caption_prompt(fixture));
  bool contained = true;
  bool later_diverge = false;
  for (int step = 0; step < 32; ++step) {
    const auto out = session.steerer().step(paths.vanilla, paths.replaced, paths.pending, false);
    paths.pending = argmax_token(out.logits);
    const auto& cv = paths.vanilla.cache;
    const auto& cr = paths.replaced.cache;
    for (std::size_t layer = 0; layer < m.num_layers; ++layer) {
      for (std::size_t h = 0; h < m.num_heads; ++h) {
        for (std::size_t pos = 0; pos < cv.length(layer); ++pos) {
          const auto kv = cv.key(layer, h, pos), kr = cr.key(layer, h, pos);
          const auto vv = cv.value(layer, h, pos), vr = cr.value(layer, h, pos);
          const bool eq = std::equal(kv.begin(), kv.end(), kr.begin()) && std::equal(vv.begin(), vv.end(), vr.begin());
          if (layer < 3 && !eq) contained = false;
          if (layer > 4 && !eq) later_diverge = true;
        }
      }
    }
  }
  report(5, contained, "cache divergence containment",
         fmt("32 steps, layers 0-2 K/V bit-identical: %s; layers 5-7 diverge: %s", contained ? "yes" : "no",
             later_diverge ? "yes" : "no"));
}

// 6. Adaptive alpha rule and shipped defaults.
void adaptive_alpha() {
  unsetenv(io::kSeedEnv);
  const auto shipped = io::load_config(std::string(VEGAS_SOURCE_DIR) + "/configs/default.json");
  const auto& c = shipped.steering;
  const bool defaults = c.eta == 0.31 && c.alpha_high == 1.0 && c.alpha_low == 0.8;
  int checked = 0, right = 0;
  std::vector<double> grid = {c.eta, std::nextafter(c.eta, 0.0), std::nextafter(c.eta, 1.0), -1.0, 0.0, 5.0};
  for (int k = -50; k <= 50; ++k) grid.push_back(c.eta + k * 0.01);
  for (int k = -10; k <= 10; ++k) grid.push_back(c.eta + k * 1e-12);
  for (double x : grid) {
    const double expected = x > 0.31 ? 1.0 : 0.8;
    right += choose_alpha(x, c) == expected;
    ++checked;
  }
  const bool boundary = choose_alpha(0.31, c) == 0.8;
  report(6, defaults && right == checked && boundary, "adaptive alpha",
         fmt("%d/%d grid points exact, indicator = eta gives %.1f, shipped eta %.2f alpha %.1f/%.1f", right, checked,
             choose_alpha(0.31, c), c.eta, c.alpha_high, c.alpha_low));
}

// 7. CHAIR and POPE against recounts.
void metric_calculators() {
  ObjectVocabulary v;
  v.num_objects = 3;
  v.word_to_object = {{100, 0}, {101, 1}, {102, 2}};
  v.separator = 2;
  v.terminator = 0;
  Rng rng(1007);
  int chair_ok = 0, pope_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<TokenId>> caps;
    std::vector<std::set<std::size_t>> truth;
    const std::size_t n = 1 + rng.below(8);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<TokenId> cap;
      const std::size_t len = rng.below(14);
      for (std::size_t k = 0; k < len; ++k) {
        const auto r = rng.below(10);
        cap.push_back(r < 2 ? 2 : r < 3 ? 50 : (r == 9 && rng.below(3) == 0) ? 0 : 100 + static_cast<TokenId>(rng.below(3)));
      }
      caps.push_back(cap);
      std::set<std::size_t> g;
      for (std::size_t o = 0; o < 3; ++o)
        if (rng.below(2)) g.insert(o);
      truth.push_back(g);
    }
    const auto got = chair_metrics(caps, v, truth);
    const auto ref = oracle::chair(caps, v.word_to_object, truth, 2, 0);
    chair_ok += got.counts.sentences == ref.sentences && got.counts.hallucinated_sentences == ref.bad_sentences &&
                got.counts.mentions == ref.mentions && got.counts.hallucinated_mentions == ref.bad_mentions &&
                got.chair_s == (ref.sentences ? static_cast<double>(ref.bad_sentences) / ref.sentences : 0.0) &&
                got.chair_i == (ref.mentions ? static_cast<double>(ref.bad_mentions) / ref.mentions : 0.0);

    const std::size_t q = 1 + rng.below(40);
    std::vector<bool> a(q), l(q);
    for (std::size_t i = 0; i < q; ++i) {
      a[i] = rng.below(2);
      l[i] = rng.below(2);
    }
    const auto p = pope_metrics(a, l);
    const auto pr = oracle::pope(a, l);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < q; ++i) correct += a[i] == l[i];
    pope_ok += p.counts.total() == q && p.counts.true_positive + p.counts.true_negative == correct &&
               p.accuracy == pr.accuracy && std::abs(p.f1 - pr.f1) <= 1e-15;
  }
  const std::vector<std::vector<TokenId>> worked = {{100, 101, 102}};
  const std::vector<std::set<std::size_t>> worked_truth = {{0, 1}};
  const auto w = chair_metrics(worked, v, worked_truth);
  const bool example = w.chair_i == 1.0 / 3.0 && w.chair_s == 1.0;
  report(7, chair_ok == 100 && pope_ok == 100 && example, "metric calculators",
         fmt("CHAIR %d/100 and POPE %d/100 corpora match recounts, worked example CHAIR_I %.6f", chair_ok, pope_ok,
             w.chair_i));
}

SteeringConfig with_layers(const ModelConfig& m, std::vector<std::size_t> layers) {
  auto c = SteeringConfig::defaults_for(m);
  c.replaced_layers = std::move(layers);
  return c;
}

// 8 and 9. Directional benefit, layer sweep and head alignment.
void benchmark_criteria(const ModelWeights& w) {
  const auto& m = w.config;
  const std::size_t mid = middle_layers(m.num_layers)[0], last = m.num_layers - 1;
  auto on = SteeringConfig::defaults_for(m);
  auto off = on;
  off.enabled = false;
  auto random = on;
  random.alignment.mode = AlignmentMode::random;
  const std::vector<std::vector<std::size_t>> sweep = {{0}, {mid}, {mid + 1}, {last}, {mid, mid + 1}};
  const char* names[] = {"{0}", "{mid}", "{mid+1}", "{last}", "{mid,mid+1}"};

  std::vector<SteeringConfig> configs = {on, off, random};
  for (const auto& layers : sweep) configs.push_back(with_layers(m, layers));

  const std::uint64_t seeds[] = {11, 22, 33, 44, 55};
  constexpr std::size_t scenes = 200;
  std::vector<ChairCounts> pooled(configs.size());
  std::string batches;
  bool every_batch = true;
  for (auto seed : seeds) {
    const auto fixtures = generate_suite(FixtureSpec{}, kVocab, scenes, seed);
    BenchmarkOptions o;
    o.include_pope = false;
    const auto r = run_benchmark(fixtures, w, kVocab, configs, o);
    every_batch = every_batch && r[0].chair_s <= r[1].chair_s;
    batches += fmt(" %.3f/%.3f", r[0].chair_s, r[1].chair_s);
    for (std::size_t c = 0; c < configs.size(); ++c) {
      pooled[c].sentences += r[c].chair.sentences;
      pooled[c].hallucinated_sentences += r[c].chair.hallucinated_sentences;
      pooled[c].mentions += r[c].chair.mentions;
      pooled[c].hallucinated_mentions += r[c].chair.hallucinated_mentions;
    }
  }
  auto chair_s = [&](std::size_t c) { return ratio(pooled[c].hallucinated_sentences, pooled[c].sentences); };

  double best = 1.0;
  std::string sweep_text;
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    best = std::min(best, chair_s(3 + i));
    sweep_text += fmt(" %s=%.4f", names[i], chair_s(3 + i));
  }
  const bool pair_best = chair_s(3 + sweep.size() - 1) <= best;
  report(8, every_batch && pair_best, "directional steering benefit",
         fmt("5 x %zu scenes, CHAIR_S on/off per batch:%s; sweep:%s", scenes, batches.c_str(), sweep_text.c_str()));

  const double gap = 100.0 * std::abs(chair_s(0) - chair_s(2));
  report(9, gap <= 2.0, "head alignment ablation",
         fmt("CHAIR_S broadcast %.2f%%, random %.2f%%, gap %.2f points", 100 * chair_s(0), 100 * chair_s(2), gap));
}

// 10. Throughput ratio and path overlap.
void throughput(const ModelWeights& w) {
  const auto fixture = generate_fixture(FixtureSpec{}, kVocab, 1010);
  const auto config = SteeringConfig::defaults_for(w.config);
  const auto t = measure_throughput(w, caption_prompt(fixture), fixture.ve_concentrated, config, 32, 5, 1);
  const double ratio_toy = t.steered_tokens_per_second / t.vanilla_tokens_per_second;

  ModelConfig big;
  big.num_layers = 8;
  big.num_heads = 8;
  big.head_dim = 64;
  big.vocab_size = 512;
  big.num_visual_tokens = 576;
  big.ve_num_heads = 4;
  const auto wb = synthesize_weights(big);
  Rng rng(1011);
  Prompt prompt;
  for (std::size_t i = 0; i < 2 + big.num_visual_tokens + 8; ++i)
    prompt.tokens.push_back(static_cast<TokenId>(rng.below(big.vocab_size)));
  prompt.layout = make_layout(2, big.num_visual_tokens, 8);
  const auto ve = random_ve(rng, big);
  auto seq = SteeringConfig::defaults_for(big);
  auto par = seq;
  par.parallel = true;
  DecodeOptions opts;
  opts.max_new_tokens = 24;
  opts.stop_on_eos = false;
  opts.trace_stats = false;
  auto wall = [&](const SteeringConfig& c) {
    const DecoderSession s(wb, c, ve);
    const auto paths = s.start(prompt);
    s.greedy_from(paths, opts);
    std::vector<double> runs;
    for (int i = 0; i < 5; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      s.greedy_from(paths, opts);
      runs.push_back(seconds_since(t0));
    }
    std::sort(runs.begin(), runs.end());
    return runs[runs.size() / 2];
  };
  const double t_seq = wall(seq), t_par = wall(par);
  const unsigned cores = std::thread::hardware_concurrency();
  const bool overlap = t_par < t_seq;
  report(10, ratio_toy >= 0.4 && overlap, "throughput contract",
         fmt("toy steered/vanilla %.3f (%.0f vs %.0f tok/s, %s); large model steered wall %.4f s sequential, "
             "%.4f s parallel on %u hardware thread(s) (overlap %s)",
             ratio_toy, t.steered_tokens_per_second, t.vanilla_tokens_per_second, ratio_toy >= 0.4 ? "ok" : "too slow",
             t_seq, t_par, cores, overlap ? "shown" : "not shown"));
}

// 11. VAR range on traced steps and the uniform TVER closed form.
void tver_var_sanity(const ModelWeights& w) {
  const auto fixtures = generate_suite(FixtureSpec{}, kVocab, 20, 1012);
  DecodeOptions opts;
  opts.max_new_tokens = 12;
  opts.stop_on_eos = false;
  std::size_t values = 0;
  bool in_range = true;
  for (const auto& f : fixtures) {
    const DecoderSession s(w, SteeringConfig::defaults_for(w.config), f.ve_concentrated);
    for (const auto& rec : s.greedy(caption_prompt(f), opts).trace) {
      for (const auto& l : rec.layers) {
        in_range = in_range && l.var >= 0.0 && l.var <= 1.0;
        ++values;
      }
    }
  }

  Rng rng(1013);
  double worst = 0.0;
  for (int k = 0; k < 200; ++k) {
    const std::size_t before = 1 + rng.below(10), nv = 2 + rng.below(200), after = 1 + rng.below(20),
                      generated = rng.below(5), heads = 1 + rng.below(4);
    const auto layout = make_layout(before, nv, after);
    const std::size_t total = before + nv + after + generated;
    std::vector<std::vector<double>> rows(heads, std::vector<double>(total, 1.0 / static_cast<double>(total)));
    const double nt = static_cast<double>(before + after + generated);
    const double per_head = std::log(nt) / std::log(static_cast<double>(nv));
    if (nt < 2) continue;
    const double one = text_visual_entropy_ratio(std::span(rows.data(), 1), layout);
    const double all = text_visual_entropy_ratio(rows, layout);
    worst = std::max({worst, std::abs(one - per_head), std::abs(all - heads * per_head)});
  }
  report(11, in_range && worst <= 1e-9, "TVER/VAR sanity",
         fmt("%zu traced VAR values in [0,1]: %s; uniform TVER max |err| %.2e", values, in_range ? "yes" : "no",
             worst));
}

}  // namespace

int main() {
  const ModelConfig model;
  const auto weights = build_scene_model(model, kVocab);
  block_entropy_oracle();
  block_entropy_invariances();
  replace_segment_contract();
  identity_configurations(weights);
  cache_containment(weights);
  adaptive_alpha();
  metric_calculators();
  benchmark_criteria(weights);
  throughput(weights);
  tver_var_sanity(weights);
  std::printf("%d criteria failed\n", failures);
  return failures;
}
