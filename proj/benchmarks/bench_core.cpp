#include <benchmark/benchmark.h>

#include "lcat/attack.hpp"
#include "lcat/dataset.hpp"
#include "lcat/episode.hpp"
#include "lcat/model.hpp"
#include "lcat/ops.hpp"
#include "lcat/trainer.hpp"

namespace {

using namespace lcat;

Tensor random_images(int64_t n, int64_t c, int64_t h, int64_t w, uint64_t seed) {
  Rng rng(seed);
  auto t = Tensor::zeros({n, c, h, w});
  for (auto& v : t.data()) v = static_cast<float>(rng.next_double());
  return t;
}

struct Fixture {
  EmbeddingNetConfig net;
  ModelParams params;
  Tensor images;

  explicit Fixture(bool denoise, int64_t batch) {
    net.denoise = denoise;
    Rng rng(1);
    params = init_embedding_params<float>(net, 1, rng);
    for (size_t i = 0; i < params.size(); ++i)
      if (params.name(i).find("denoise") != std::string::npos)
        for (auto& v : params.tensor(i).data()) v = 0.01f;
    images = random_images(batch, 1, 16, 16, 2);
  }
};

void BM_EmbedForward(benchmark::State& state) {
  Fixture fx(state.range(1) != 0, state.range(0));
  for (auto _ : state) {
    Tape tape;
    tape.set_recording(false);
    auto emb = embed_forward(tape, fx.params, fx.net, fx.images);
    benchmark::DoNotOptimize(emb.data().data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EmbedForward)->Args({75, 0})->Args({75, 1});

void BM_EmbedBackward(benchmark::State& state) {
  Fixture fx(state.range(1) != 0, state.range(0));
  for (auto _ : state) {
    Tape tape;
    auto emb = embed_forward(tape, fx.params, fx.net, fx.images);
    auto loss = sum(tape, emb);
    tape.backward(loss);
    fx.params.zero_grads();
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EmbedBackward)->Args({75, 0})->Args({75, 1});

void BM_Conv2dForward(benchmark::State& state) {
  const int64_t ch = state.range(0);
  const int64_t hw = state.range(1);
  auto x = random_images(75, ch, hw, hw, 3);
  Rng rng(4);
  auto k = Tensor::zeros({ch, ch, 3, 3});
  for (auto& v : k.data()) v = static_cast<float>(rng.uniform(-0.2, 0.2));
  for (auto _ : state) {
    Tape tape;
    tape.set_recording(false);
    auto y = conv2d(tape, x, k, 1, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_Conv2dForward)->Args({8, 16})->Args({16, 8})->Args({16, 4});

void BM_PgdAttack(benchmark::State& state) {
  Fixture fx(true, 25);
  HeadConfig head;
  SyntheticConfig scfg;
  scfg.seed = 11;
  auto store = generate_synthetic(scfg);
  SamplerConfig sampler_cfg{5, 1, 5, Split::Train};
  Rng rng(7);
  auto ep = sample_episode(store, sampler_cfg, rng);
  Tape tape;
  tape.set_recording(false);
  auto adapted = fine_tune(tape, fx.params, fx.net, head, ep);
  AttackConfig attack{0.15, 0.0375, 7, false, 0.0, 1.0,
                      AttackObjective::CrossEntropy};
  for (auto _ : state) {
    Rng arng(9);
    auto adv = pgd_attack(adapted, ep.query_images, ep.query_labels, attack,
                          arng, nullptr);
    benchmark::DoNotOptimize(adv.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 25);
}
BENCHMARK(BM_PgdAttack);

void BM_SampleEpisode(benchmark::State& state) {
  SyntheticConfig scfg;
  scfg.seed = 11;
  auto store = generate_synthetic(scfg);
  EpisodeSampler sampler(store, SamplerConfig{5, 1, 15, Split::Train});
  Rng rng(7);
  for (auto _ : state) {
    auto ep = sampler.sample(rng);
    benchmark::DoNotOptimize(ep.query_images.data().data());
  }
}
BENCHMARK(BM_SampleEpisode);

void BM_FineTuneRidge(benchmark::State& state) {
  Fixture fx(true, 25);
  HeadConfig head;
  head.kind = HeadKind::Ridge;
  SyntheticConfig scfg;
  scfg.seed = 11;
  auto store = generate_synthetic(scfg);
  Rng rng(7);
  auto ep = sample_episode(store, SamplerConfig{5, 5, 5, Split::Train}, rng);
  for (auto _ : state) {
    Tape tape;
    tape.set_recording(false);
    auto adapted = fine_tune(tape, fx.params, fx.net, head, ep);
    benchmark::DoNotOptimize(adapted.head_state.data().data());
  }
}
BENCHMARK(BM_FineTuneRidge);

}  // namespace

BENCHMARK_MAIN();
