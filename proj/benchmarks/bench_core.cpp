#include <benchmark/benchmark.h>

#include "chada/baselines.hpp"
#include "chada/encoder.hpp"
#include "chada/ops.hpp"
#include "chada/ssl.hpp"

using namespace chada;

namespace {

MultiChannelImage random_image(std::size_t channels, std::size_t side, Rng& rng) {
  MultiChannelImage img(channels, side, side);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(0);
  Tensor<float> a({n, n}), b({n, n});
  fill_normal(a, 1.0, rng);
  fill_normal(b, 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(192)->Arg(512);

// Masked attention over a padded sequence: cost follows the full length.
void BM_MaskedAttention(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  const std::size_t dim = 192, heads = 3;
  Rng rng(1);
  const auto block = BlockParams<float>::init(dim, 4, rng);
  Tensor<float> x({1, len, dim});
  fill_normal(x, 1.0, rng);
  std::vector<std::uint8_t> mask(len, 0);
  std::fill_n(mask.begin(), len / 2, std::uint8_t{1});
  for (auto _ : state) benchmark::DoNotOptimize(masked_multihead_attention(x, mask, block, heads));
}
BENCHMARK(BM_MaskedAttention)->Arg(65)->Arg(197)->Arg(589)->Unit(benchmark::kMillisecond);

void BM_EncodeChada(benchmark::State& state) {
  EncoderConfig cfg;
  cfg.depth = 2;
  cfg.image_side = 64;
  Rng rng(2);
  const auto params = EncoderParams<float>::init(cfg, rng);
  const auto img = random_image(static_cast<std::size_t>(state.range(0)), 64, rng);
  for (auto _ : state) benchmark::DoNotOptimize(encode(img, params, cfg));
}
BENCHMARK(BM_EncodeChada)->Arg(1)->Arg(3)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_EncodeOneChannel(benchmark::State& state) {
  EncoderConfig cfg;
  cfg.depth = 2;
  cfg.image_side = 64;
  const auto one = one_channel_config(cfg);
  Rng rng(3);
  const auto params = EncoderParams<float>::init(one, rng);
  const auto img = random_image(static_cast<std::size_t>(state.range(0)), 64, rng);
  for (auto _ : state) benchmark::DoNotOptimize(one_channel_encode(img, params, one));
}
BENCHMARK(BM_EncodeOneChannel)->Arg(1)->Arg(3)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_DinoStep(benchmark::State& state) {
  EncoderConfig cfg;
  cfg.dim = 64;
  cfg.depth = 4;
  cfg.heads = 4;
  cfg.image_side = 32;
  cfg.max_channels = 3;
  DinoConfig dino;
  dino.batch_size = 8;
  dino.steps = 1'000'000;
  DinoTrainer trainer(Arch::Chada, cfg, dino);
  Rng rng(4);
  std::vector<MultiChannelImage> pool;
  for (int i = 0; i < 16; ++i) pool.push_back(random_image(3, 32, rng));
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_step_from(pool));
}
BENCHMARK(BM_DinoStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
