// Captions one synthetic scene with and without steering and prints the
// per-step indicator and blend weight.

#include <cstdio>

#include "vegas/vegas.hpp"

int main() {
  using namespace vegas;
  const ModelConfig model;
  const ToyVocabulary vocab;
  const ModelWeights weights = build_scene_model(model, vocab);
  const SceneFixture scene = generate_fixture(FixtureSpec{}, vocab, 3);
  const Prompt prompt = caption_prompt(scene);

  std::printf("objects in scene:");
  for (auto o : scene.ground_truth_objects) std::printf(" %zu", o);
  std::printf("   primed by context: %zu\n", scene.primed_object);

  for (bool steer : {false, true}) {
    SteeringConfig config = SteeringConfig::defaults_for(model);
    config.enabled = steer;
    DecoderSession session(weights, config, scene.ve_concentrated);
    DecodeOptions options;
    options.max_new_tokens = 6;
    const DecodeResult r = session.greedy(prompt, options);
    std::printf("%s:\n", steer ? "steered" : "vanilla");
    for (const auto& step : r.trace) {
      const auto object = vocab.object_of_word(step.token);
      std::printf("  step %zu  token %d%s", step.step, step.token, step.token == kEosToken ? " (eos)" : "");
      if (object) std::printf(" (object %zu)", *object);
      if (step.decision) std::printf("  vabe %.4f  alpha %.2f", step.decision->indicator_value, step.decision->alpha_used);
      std::printf("\n");
    }
  }
  return 0;
}
