#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <map>
#include <optional>
#include <set>
#include <thread>
#include <vector>

#include "vegas/fixtures.hpp"
#include "vegas/session.hpp"

namespace vegas {

/// Caption-word registry for CHAIR scoring. Mentions are single tokens;
/// aliases map a synonym token onto a registered word token.
struct ObjectVocabulary {
  std::map<TokenId, std::size_t> word_to_object;
  std::map<TokenId, TokenId> aliases;
  std::size_t num_objects = 0;
  TokenId separator = ToyVocabulary::sep;
  TokenId terminator = kEosToken;

  static ObjectVocabulary from(const ToyVocabulary& vocab) {
    ObjectVocabulary v;
    v.num_objects = vocab.num_objects;
    for (std::size_t o = 0; o < vocab.num_objects; ++o) v.word_to_object[vocab.object_word(o)] = o;
    return v;
  }

  void validate() const {
    for (const auto& [word, object] : word_to_object) {
      require(object < num_objects, "object vocabulary: token " + std::to_string(word) + " maps to unknown object " +
                                        std::to_string(object));
    }
    for (const auto& [alias, target] : aliases) {
      require(word_to_object.count(target) == 1, "object vocabulary: alias " + std::to_string(alias) +
                                                      " targets unregistered token " + std::to_string(target));
    }
  }

  std::optional<std::size_t> lookup(TokenId t) const {
    if (auto a = aliases.find(t); a != aliases.end()) t = a->second;
    if (auto w = word_to_object.find(t); w != word_to_object.end()) return w->second;
    return std::nullopt;
  }
};

struct ChairCounts {
  std::size_t sentences = 0;
  std::size_t hallucinated_sentences = 0;
  std::size_t mentions = 0;
  std::size_t hallucinated_mentions = 0;
  friend bool operator==(const ChairCounts&, const ChairCounts&) = default;
};

struct PopeCounts {
  std::size_t true_positive = 0;
  std::size_t false_positive = 0;
  std::size_t true_negative = 0;
  std::size_t false_negative = 0;
  std::size_t total() const { return true_positive + false_positive + true_negative + false_negative; }
  friend bool operator==(const PopeCounts&, const PopeCounts&) = default;
};

inline double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

struct ChairResult {
  double chair_s = 0.0;
  double chair_i = 0.0;
  ChairCounts counts;
};

/// Splits a caption into nonempty sentences at separator tokens; the
/// terminator ends the caption.
inline std::vector<std::vector<TokenId>> split_sentences(std::span<const TokenId> caption,
                                                         const ObjectVocabulary& vocab) {
  std::vector<std::vector<TokenId>> out(1);
  for (TokenId t : caption) {
    if (t == vocab.terminator) break;
    if (t == vocab.separator) {
      if (!out.back().empty()) out.emplace_back();
      continue;
    }
    out.back().push_back(t);
  }
  if (out.back().empty()) out.pop_back();
  return out;
}

inline ChairCounts chair_counts(std::span<const std::vector<TokenId>> captions, const ObjectVocabulary& vocab,
                                std::span<const std::set<std::size_t>> ground_truth) {
  require(!captions.empty(), "chair: no generations");
  require(captions.size() == ground_truth.size(), "chair: one ground-truth set per caption required");
  vocab.validate();
  ChairCounts c;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    for (auto o : ground_truth[i]) {
      require(o < vocab.num_objects, "chair: ground truth names unknown object " + std::to_string(o));
    }
    for (const auto& sentence : split_sentences(captions[i], vocab)) {
      ++c.sentences;
      bool hallucinated = false;
      for (TokenId t : sentence) {
        const auto object = vocab.lookup(t);
        if (!object) continue;
        ++c.mentions;
        if (!ground_truth[i].count(*object)) {
          ++c.hallucinated_mentions;
          hallucinated = true;
        }
      }
      if (hallucinated) ++c.hallucinated_sentences;
    }
  }
  return c;
}

/// CHAIR_S (hallucinated sentences / sentences) and CHAIR_I (hallucinated
/// mentions / mentions) over a corpus. Empty denominators give 0.
inline ChairResult chair_metrics(std::span<const std::vector<TokenId>> captions, const ObjectVocabulary& vocab,
                                 std::span<const std::set<std::size_t>> ground_truth) {
  ChairResult r;
  r.counts = chair_counts(captions, vocab, ground_truth);
  r.chair_s = ratio(r.counts.hallucinated_sentences, r.counts.sentences);
  r.chair_i = ratio(r.counts.hallucinated_mentions, r.counts.mentions);
  return r;
}

struct PopeResult {
  double accuracy = 0.0;
  double f1 = 0.0;
  PopeCounts counts;
};

inline PopeCounts pope_counts(const std::vector<bool>& answers, const std::vector<bool>& labels) {
  require(answers.size() == labels.size(), "pope: " + std::to_string(answers.size()) + " answers for " +
                                               std::to_string(labels.size()) + " labels");
  PopeCounts c;
  for (std::size_t i = 0; i < answers.size(); ++i) {
    if (answers[i]) {
      labels[i] ? ++c.true_positive : ++c.false_positive;
    } else {
      labels[i] ? ++c.false_negative : ++c.true_negative;
    }
  }
  return c;
}

inline double pope_accuracy(const PopeCounts& c) { return ratio(c.true_positive + c.true_negative, c.total()); }

/// F1 with "yes" as the positive class: 2TP / (2TP + FP + FN).
inline double pope_f1(const PopeCounts& c) {
  return ratio(2 * c.true_positive, 2 * c.true_positive + c.false_positive + c.false_negative);
}

inline PopeResult pope_metrics(const std::vector<bool>& answers, const std::vector<bool>& labels) {
  PopeResult r;
  r.counts = pope_counts(answers, labels);
  r.accuracy = pope_accuracy(r.counts);
  r.f1 = pope_f1(r.counts);
  return r;
}

struct BenchmarkOptions {
  DecodeMode mode = DecodeMode::greedy;
  std::size_t beam_width = 5;
  std::size_t max_caption_tokens = 6;
  bool include_pope = true;
  bool use_diffuse_ve = false;  // inject the near-uniform maps instead
  std::size_t threads = 0;      // 0: hardware concurrency
};

struct SceneResult {
  std::vector<TokenId> caption;
  std::vector<bool> pope_answers;
  friend bool operator==(const SceneResult&, const SceneResult&) = default;
};

struct EvalReport {
  double chair_s = 0.0;
  double chair_i = 0.0;
  double pope_accuracy = 0.0;
  double pope_f1 = 0.0;
  ChairCounts chair;
  PopeCounts pope;
  std::vector<SceneResult> scenes;

  static EvalReport from_counts(const ChairCounts& chair, const PopeCounts& pope) {
    EvalReport r;
    r.chair = chair;
    r.pope = pope;
    r.chair_s = ratio(chair.hallucinated_sentences, chair.sentences);
    r.chair_i = ratio(chair.hallucinated_mentions, chair.mentions);
    r.pope_accuracy = vegas::pope_accuracy(pope);
    r.pope_f1 = vegas::pope_f1(pope);
    return r;
  }
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Prompt states built on a prefilled scene prefix, so the shared
/// [BOS][image][context] part is computed once per scene.
class ScenePrefix {
 public:
  ScenePrefix(const ModelWeights& weights, const SceneFixture& fixture)
      : weights_(&weights), fixture_(&fixture), state_(weights.config, PromptLayout{}) {
    const auto tokens = scene_prefix(fixture);
    prefill(weights, state_, tokens);
  }

  PathPair paths_for(const Prompt& prompt) const {
    const auto prefix_len = state_.history.size();
    require(prompt.tokens.size() > prefix_len, "scene prompt must extend the prefix");
    prompt.layout.validate(weights_->config.num_visual_tokens);
    PathPair p;
    p.vanilla = state_;
    p.vanilla.layout = prompt.layout;
    prefill(*weights_, p.vanilla,
            std::span<const TokenId>(prompt.tokens.data() + prefix_len, prompt.tokens.size() - prefix_len - 1));
    p.replaced = p.vanilla;
    p.pending = prompt.tokens.back();
    return p;
  }

  const SceneFixture& fixture() const { return *fixture_; }

 private:
  const ModelWeights* weights_;
  const SceneFixture* fixture_;
  DecoderState state_;
};

/// Caption and POPE answers for one scene under one config.
inline SceneResult run_scene(const ModelWeights& weights, const ToyVocabulary& vocab, const ScenePrefix& prefix,
                             const SteeringConfig& config, const BenchmarkOptions& options) {
  const auto& f = prefix.fixture();
  DecoderSession session(weights, config, options.use_diffuse_ve ? f.ve_diffuse : f.ve_concentrated);
  DecodeOptions decode;
  decode.max_new_tokens = options.max_caption_tokens;
  decode.trace_stats = false;

  SceneResult out;
  auto paths = prefix.paths_for(caption_prompt(f));
  auto caption = options.mode == DecodeMode::beam ? session.beam_from(std::move(paths), options.beam_width, decode)
                                                  : session.greedy_from(std::move(paths), decode);
  out.caption = std::move(caption.tokens);

  if (options.include_pope) {
    decode.max_new_tokens = 1;
    for (const auto& q : f.pope_questions) {
      auto answer = session.greedy_from(prefix.paths_for(pope_prompt(f, vocab, q.object)), decode);
      out.pope_answers.push_back(answer.tokens.front() == ToyVocabulary::yes);
    }
  }
  return out;
}

/// Decodes every fixture under every config. Fixtures fan out over worker
/// threads; reports are reduced in fixture order, so results do not depend
/// on the thread count.
inline std::vector<EvalReport> run_benchmark(std::span<const SceneFixture> fixtures, const ModelWeights& weights,
                                             const ToyVocabulary& vocab, std::span<const SteeringConfig> configs,
                                             const BenchmarkOptions& options = {}) {
  require(!fixtures.empty(), "benchmark: no fixtures");
  require(!configs.empty(), "benchmark: no configs");
  for (const auto& c : configs) {
    SteeringConfig n = c;
    n.normalize();
    n.validate(weights.config);
  }

  std::vector<std::vector<SceneResult>> results(fixtures.size());
  std::vector<std::exception_ptr> errors(fixtures.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < fixtures.size(); i = next++) {
      try {
        ScenePrefix prefix(weights, fixtures[i]);
        for (const auto& c : configs) results[i].push_back(run_scene(weights, vocab, prefix, c, options));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::size_t threads = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, fixtures.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  const auto objects = ObjectVocabulary::from(vocab);
  std::vector<EvalReport> reports;
  for (std::size_t c = 0; c < configs.size(); ++c) {
    std::vector<std::vector<TokenId>> captions;
    std::vector<std::set<std::size_t>> truth;
    std::vector<bool> answers, labels;
    std::vector<SceneResult> scenes;
    for (std::size_t i = 0; i < fixtures.size(); ++i) {
      const auto& r = results[i][c];
      captions.push_back(r.caption);
      truth.push_back(fixtures[i].ground_truth_objects);
      answers.insert(answers.end(), r.pope_answers.begin(), r.pope_answers.end());
      for (std::size_t q = 0; q < r.pope_answers.size(); ++q) labels.push_back(fixtures[i].pope_questions[q].present);
      scenes.push_back(r);
    }
    auto report = EvalReport::from_counts(chair_counts(captions, objects, truth), pope_counts(answers, labels));
    report.scenes = std::move(scenes);
    reports.push_back(std::move(report));
  }
  return reports;
}

}  // namespace vegas
