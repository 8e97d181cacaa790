#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vegas/injection.hpp"
#include "vegas/metrics.hpp"
#include "vegas/random.hpp"
#include "vegas/session.hpp"
#include "vegas/weights.hpp"

namespace vegas {

/// Token ids of the synthetic scene world. Ids 0-7 are reserved; the rest are
/// laid out as background patches, object words, object patches, and
/// context (co-occurrence prior) tokens.
struct ToyVocabulary {
  std::size_t num_objects = 8;
  std::size_t background_variants = 4;
  std::size_t context_levels = 3;

  static constexpr TokenId eos = kEosToken;
  static constexpr TokenId bos = 1;
  static constexpr TokenId sep = 2;
  static constexpr TokenId describe = 3;
  static constexpr TokenId question = 4;
  static constexpr TokenId yes = 5;
  static constexpr TokenId no = 6;
  static constexpr TokenId answer = 7;
  static constexpr TokenId first_free = 8;

  TokenId background(std::size_t i) const { return first_free + static_cast<TokenId>(i); }
  TokenId object_word(std::size_t o) const {
    return first_free + static_cast<TokenId>(background_variants + o);
  }
  TokenId object_patch(std::size_t o) const {
    return first_free + static_cast<TokenId>(background_variants + num_objects + o);
  }
  TokenId context(std::size_t o, std::size_t level) const {
    return first_free +
           static_cast<TokenId>(background_variants + 2 * num_objects + o * context_levels + level);
  }
  std::size_t size() const {
    return static_cast<std::size_t>(first_free) + background_variants + num_objects * (2 + context_levels);
  }

  /// Object index of a caption word, if the token is one.
  std::optional<std::size_t> object_of_word(TokenId t) const {
    const TokenId lo = object_word(0);
    if (t >= lo && t < lo + static_cast<TokenId>(num_objects)) return static_cast<std::size_t>(t - lo);
    return std::nullopt;
  }

  void validate() const {
    require(num_objects >= 2, "vocabulary needs at least two objects");
    require(background_variants >= 1 && context_levels >= 1 && context_levels <= 8,
            "vocabulary: background_variants >= 1 and 1 <= context_levels <= 8 required");
  }
};

/// Strengths of the planted circuits of the scene world. Scores are in
/// pre-softmax units as seen by the querying token.
struct SceneModelParams {
  std::vector<double> context_scores = {2.0, 2.5, 3.0};  // per context level
  double reader_self_score = -4.0;
  double reader_word_score = -6.0;
  double inhibit_word_score = 8.0;
  double inhibit_sink_score = 4.0;
  double inhibit_strength = 2.0;
  double evidence_gain = 10.0;    // word logit per unit of evidence
  double eos_logit = 4.0;         // at caption/answer queries
  double compare_gain = 10.0;     // POPE score per unit of evidence
  double question_score = 4.0;    // POPE "no" sink
  double answer_bias = 30.0;
  double noise = 0.02;            // scaled-uniform background weights
  std::vector<std::size_t> reader_layers;  // empty: the middle layer pair
};

namespace scene_dims {
inline constexpr std::size_t reader = 0, patch = 1, context = 2, word = 3, bos = 4, answer = 5, caption = 6,
                             question = 7, level0 = 8, idents = 16;
}

/// Synthesized weights with a planted scene-reading circuit:
///  - reader heads in the reader layers move object evidence from image
///    patches (and from context tokens, the text prior) into an evidence block;
///  - one inhibition head per reader layer suppresses already-mentioned words;
///  - a compare head in the last layer answers yes/no probes by matching the
///    queried object against the evidence.
/// Caption words are emitted while their evidence exceeds the EOS logit.
inline ModelWeights build_scene_model(const ModelConfig& config, const ToyVocabulary& vocab,
                                      const SceneModelParams& params = {}) {
  using namespace scene_dims;
  vocab.validate();
  const std::size_t k = vocab.num_objects;
  const std::size_t d = config.model_dim();
  const std::size_t dk = config.head_dim;
  require(config.vocab_size >= vocab.size(), "scene model: vocab_size too small for the scene vocabulary");
  require(config.num_heads >= 2, "scene model: needs at least two heads");
  require(dk >= k + 1, "scene model: head_dim must exceed the object count");
  require(d >= idents + 3 * k + 2, "scene model: model dimension too small for the object count");
  require(params.context_scores.size() >= vocab.context_levels, "scene model: one context score per level");
  const auto readers = params.reader_layers.empty() ? middle_layers(config.num_layers) : params.reader_layers;
  require(config.num_layers >= 3, "scene model: needs at least three layers");
  for (auto l : readers) require(l + 1 < config.num_layers, "scene model: reader layers must precede the last layer");

  const std::size_t word_ident = idents, patch_ident = idents + k, evidence = idents + 2 * k;
  const std::size_t yes_ch = idents + 3 * k, no_ch = yes_ch + 1;

  ModelWeights w = synthesize_weights(config, params.noise);
  auto emb = [&](TokenId t, std::size_t dim, float v) { w.embedding.at(static_cast<std::size_t>(t), dim) += v; };
  emb(vocab.bos, bos, 1);
  emb(vocab.describe, reader, 1);
  emb(vocab.describe, caption, 1);
  emb(vocab.answer, reader, 1);
  emb(vocab.answer, answer, 1);
  emb(vocab.question, question, 1);
  for (std::size_t i = 0; i < vocab.background_variants; ++i) emb(vocab.background(i), patch, 1);
  for (std::size_t o = 0; o < k; ++o) {
    emb(vocab.object_word(o), reader, 1);
    emb(vocab.object_word(o), caption, 1);
    emb(vocab.object_word(o), word, 1);
    emb(vocab.object_word(o), word_ident + o, 1);
    emb(vocab.object_patch(o), patch, 1);
    emb(vocab.object_patch(o), patch_ident + o, 1);
    for (std::size_t j = 0; j < vocab.context_levels; ++j) {
      emb(vocab.context(o, j), context, 1);
      emb(vocab.context(o, j), level0 + j, 1);
      emb(vocab.context(o, j), patch_ident + o, 1);
    }
  }

  const auto sq = static_cast<float>(std::sqrt(static_cast<double>(dk)));
  const std::size_t inhibit_head = config.num_heads - 1;
  const auto n_readers = static_cast<float>(config.num_heads - 1);
  for (auto l : readers) {
    auto& lw = w.layers[l];
    for (std::size_t h = 0; h < inhibit_head; ++h) {
      const std::size_t base = h * dk;
      lw.wq.at(base, reader) += sq;
      for (std::size_t j = 0; j < vocab.context_levels; ++j) lw.wk.at(base, level0 + j) += float(params.context_scores[j]);
      lw.wk.at(base, bos) += float(params.reader_self_score);
      lw.wk.at(base, reader) += float(params.reader_self_score);
      lw.wk.at(base, question) += float(params.reader_self_score);
      lw.wk.at(base, word) += float(params.reader_word_score - params.reader_self_score);
      for (std::size_t o = 0; o < k; ++o) {
        lw.wv.at(base + o, patch_ident + o) += 1;
        lw.wo.at(evidence + o, base + o) += 1.0f / n_readers;
      }
    }
    const std::size_t base = inhibit_head * dk;
    lw.wq.at(base, caption) += sq;
    lw.wq.at(base + 1, answer) += sq;
    lw.wk.at(base, word) += float(params.inhibit_word_score);
    lw.wk.at(base, bos) += float(params.inhibit_sink_score);
    lw.wk.at(base, patch) -= 6;
    lw.wk.at(base, context) -= 6;
    lw.wk.at(base + 1, bos) += 6;
    for (std::size_t o = 0; o < k; ++o) {
      lw.wv.at(base + o, word_ident + o) += 1;
      lw.wo.at(evidence + o, base + o) -= float(params.inhibit_strength);
    }
  }

  auto& last = w.layers[config.num_layers - 1];
  for (std::size_t o = 0; o < k; ++o) {
    last.wq.at(o, evidence + o) += float(params.compare_gain) * sq;
    last.wk.at(o, word_ident + o) += 1;
  }
  last.wq.at(k, reader) += sq;
  last.wk.at(k, question) += float(params.question_score);
  last.wk.at(k, patch) -= 10;
  last.wv.at(0, word) += 1;
  last.wv.at(1, question) += 1;
  last.wo.at(yes_ch, 0) += 1;
  last.wo.at(no_ch, 1) += 1;

  auto un = [&](TokenId t, std::size_t dim, float v) { w.unembedding.at(static_cast<std::size_t>(t), dim) += v; };
  for (std::size_t o = 0; o < k; ++o) un(vocab.object_word(o), evidence + o, float(params.evidence_gain));
  un(vocab.eos, reader, float(params.eos_logit));
  for (TokenId t : {vocab.yes, vocab.no}) {
    un(t, answer, float(params.answer_bias));
    un(t, caption, -float(params.answer_bias));
  }
  un(vocab.yes, yes_ch, 10);
  un(vocab.no, no_ch, 10);
  for (std::size_t t = 0; t < config.vocab_size; ++t) {
    const auto id = static_cast<TokenId>(t);
    if (id == vocab.eos || id == vocab.yes || id == vocab.no || vocab.object_of_word(id)) continue;
    un(id, reader, -20);
  }
  return w;
}

struct PlantedObject {
  std::size_t object = 0;
  std::size_t block_row = 0;
  std::size_t block_col = 0;
  friend bool operator==(const PlantedObject&, const PlantedObject&) = default;
};

struct PopeQuestion {
  std::size_t object = 0;
  bool present = false;
  friend bool operator==(const PopeQuestion&, const PopeQuestion&) = default;
};

struct SceneFixture {
  std::size_t grid_side = 0;
  std::size_t block_size = 0;
  std::vector<PlantedObject> planted_objects;
  std::vector<TokenId> patch_tokens;    // row-major grid
  std::vector<TokenId> context_tokens;  // text prior placed after the image
  std::size_t primed_object = 0;        // absent object the context suggests
  std::set<std::size_t> ground_truth_objects;
  VEAttentionSet ve_concentrated;
  VEAttentionSet ve_diffuse;
  std::vector<PopeQuestion> pope_questions;
  friend bool operator==(const SceneFixture&, const SceneFixture&) = default;
};

struct FixtureSpec {
  std::size_t grid_side = 8;
  std::size_t block_size = 4;
  std::size_t min_objects = 1;
  std::size_t max_objects = 2;
  std::size_t ve_heads = 2;
  std::size_t min_context = 1;
  std::size_t max_context = 3;
  double min_peak = 1.5;         // VE pre-softmax lift on object blocks
  double max_peak = 2.5;
  double spike = 4.0;            // artifact spike on one background cell, in peak units
  std::size_t pope_questions = 6;
  VESourceKind source_kind = VESourceKind::cls_row;

  void validate(const ToyVocabulary& vocab) const {
    require(grid_side >= 2 && block_size >= 1 && grid_side % block_size == 0,
            "fixture: block size must divide the grid side");
    const std::size_t capacity = (grid_side / block_size) * (grid_side / block_size);
    require(min_objects >= 1 && max_objects >= min_objects, "fixture: scenes need at least one object");
    require(max_objects <= capacity, "fixture: " + std::to_string(max_objects) + " objects exceed the grid's " +
                                         std::to_string(capacity) + " blocks");
    require(max_objects < vocab.num_objects, "fixture: at least one object must stay absent");
    require(ve_heads >= 1, "fixture: need at least one VE head");
    require(max_context >= min_context && max_context >= 1, "fixture: bad context range");
    require(min_peak > 0.0 && max_peak >= min_peak, "fixture: bad peak range");
  }
};

/// Q-Former-style aggregate: each query cell's mean cross-attention logit
/// over all image cells. Queries lying on an object attend to that object.
inline std::vector<double> query_aggregate_map(const std::vector<int>& owner, std::size_t cells, double peak,
                                               Rng& rng) {
  std::vector<double> map(cells);
  for (std::size_t q = 0; q < cells; ++q) {
    double total = 0.0;
    for (std::size_t i = 0; i < cells; ++i) {
      double logit = rng.uniform(-0.05, 0.05) * peak;
      if (owner[q] >= 0 && owner[i] == owner[q]) logit += 4.0 * peak;
      total += logit;
    }
    map[q] = total / static_cast<double>(cells);
  }
  return map;
}

/// Deterministic scene: planted objects on disjoint blocks, a text prior for
/// one absent object, concentrated/diffuse VE maps, and POPE probes (half
/// present objects, half absent with the primed object first).
inline SceneFixture generate_fixture(const FixtureSpec& spec, const ToyVocabulary& vocab, std::uint64_t seed) {
  spec.validate(vocab);
  Rng rng(mix_seed(seed, 0xF1));
  SceneFixture f;
  f.grid_side = spec.grid_side;
  f.block_size = spec.block_size;
  const std::size_t blocks = spec.grid_side / spec.block_size;
  const std::size_t cells = spec.grid_side * spec.grid_side;

  const auto n_objects = static_cast<std::size_t>(rng.between(std::int64_t(spec.min_objects), std::int64_t(spec.max_objects)));
  std::vector<std::size_t> block_ids(blocks * blocks), object_ids(vocab.num_objects);
  for (std::size_t i = 0; i < block_ids.size(); ++i) block_ids[i] = i;
  for (std::size_t i = 0; i < object_ids.size(); ++i) object_ids[i] = i;
  rng.shuffle(block_ids.begin(), block_ids.end());
  rng.shuffle(object_ids.begin(), object_ids.end());

  std::vector<int> owner(cells, -1);
  for (std::size_t i = 0; i < n_objects; ++i) {
    PlantedObject p{object_ids[i], block_ids[i] / blocks, block_ids[i] % blocks};
    f.planted_objects.push_back(p);
    f.ground_truth_objects.insert(p.object);
    for (std::size_t r = 0; r < spec.block_size; ++r) {
      for (std::size_t c = 0; c < spec.block_size; ++c) {
        owner[(p.block_row * spec.block_size + r) * spec.grid_side + p.block_col * spec.block_size + c] =
            static_cast<int>(i);
      }
    }
  }
  std::vector<std::size_t> absent(object_ids.begin() + static_cast<std::ptrdiff_t>(n_objects), object_ids.end());
  f.primed_object = absent.front();

  for (std::size_t cell = 0; cell < cells; ++cell) {
    f.patch_tokens.push_back(owner[cell] >= 0 ? vocab.object_patch(f.planted_objects[owner[cell]].object)
                                            : vocab.background(rng.below(vocab.background_variants)));
  }
  const auto n_context = static_cast<std::size_t>(rng.between(std::int64_t(spec.min_context), std::int64_t(spec.max_context)));
  for (std::size_t i = 0; i < n_context; ++i) {
    f.context_tokens.push_back(vocab.context(f.primed_object, rng.below(vocab.context_levels)));
  }

  const double peak = rng.uniform(spec.min_peak, spec.max_peak);
  std::vector<std::size_t> background_cells;
  for (std::size_t cell = 0; cell < cells; ++cell) {
    if (owner[cell] < 0) background_cells.push_back(cell);
  }
  const std::size_t spike_cell =
      background_cells.empty() ? cells : background_cells[rng.below(background_cells.size())];

  f.ve_concentrated.source_kind = spec.source_kind;
  f.ve_diffuse.source_kind = spec.source_kind;
  for (std::size_t h = 0; h < spec.ve_heads; ++h) {
    const double head_peak = peak * rng.uniform(0.9, 1.1);
    std::vector<double> map;
    if (spec.source_kind == VESourceKind::query_aggregate) {
      map = query_aggregate_map(owner, cells, head_peak, rng);
    } else {
      map.resize(cells);
      for (std::size_t cell = 0; cell < cells; ++cell) {
        map[cell] = rng.uniform(-0.05, 0.05) * head_peak;
        if (owner[cell] >= 0) map[cell] += head_peak * rng.uniform(0.9, 1.1);
      }
    }
    if (spike_cell < cells && spec.spike > 0.0) map[spike_cell] += spec.spike * head_peak;
    f.ve_concentrated.heads.push_back(std::move(map));

    std::vector<double> diffuse(cells);
    for (auto& v : diffuse) v = rng.uniform(-0.005, 0.005);
    f.ve_diffuse.heads.push_back(std::move(diffuse));
  }

  for (std::size_t h = 0; h < spec.ve_heads; ++h) {
    const double be_c = block_entropy(GridMap(spec.grid_side, f.ve_concentrated.heads[h]), spec.block_size);
    const double be_d = block_entropy(GridMap(spec.grid_side, f.ve_diffuse.heads[h]), spec.block_size);
    require(be_c < be_d, "fixture: concentrated VE map is not more concentrated than the diffuse map");
  }

  const std::size_t positives = spec.pope_questions / 2;
  for (std::size_t i = 0; i < positives; ++i) {
    f.pope_questions.push_back({f.planted_objects[i % n_objects].object, true});
  }
  for (std::size_t i = 0; i + positives < spec.pope_questions; ++i) {
    f.pope_questions.push_back({absent[i % absent.size()], false});
  }
  return f;
}

/// `count` scenes with per-scene seeds derived from `seed`.
inline std::vector<SceneFixture> generate_suite(const FixtureSpec& spec, const ToyVocabulary& vocab,
                                                std::size_t count, std::uint64_t seed) {
  std::vector<SceneFixture> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_fixture(spec, vocab, mix_seed(seed, 1000 + i)));
  return out;
}

/// [BOS][image patches][context tokens]: shared by every prompt of a scene.
inline std::vector<TokenId> scene_prefix(const SceneFixture& f) {
  std::vector<TokenId> t{ToyVocabulary::bos};
  t.insert(t.end(), f.patch_tokens.begin(), f.patch_tokens.end());
  t.insert(t.end(), f.context_tokens.begin(), f.context_tokens.end());
  return t;
}

inline Prompt scene_prompt(const SceneFixture& f, std::span<const TokenId> suffix) {
  Prompt p;
  p.tokens = scene_prefix(f);
  p.tokens.insert(p.tokens.end(), suffix.begin(), suffix.end());
  const std::size_t n_visual = f.patch_tokens.size();
  p.layout = make_layout(1, n_visual, p.tokens.size() - 1 - n_visual);
  return p;
}

inline Prompt caption_prompt(const SceneFixture& f) {
  const TokenId suffix[] = {ToyVocabulary::describe};
  return scene_prompt(f, suffix);
}

inline Prompt pope_prompt(const SceneFixture& f, const ToyVocabulary& vocab, std::size_t object) {
  const TokenId suffix[] = {ToyVocabulary::question, vocab.object_word(object), ToyVocabulary::answer};
  return scene_prompt(f, suffix);
}

}  // namespace vegas
