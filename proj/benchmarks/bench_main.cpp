#include <benchmark/benchmark.h>

#include "cats/metrics.hpp"
#include "cats/model.hpp"
#include "cats/random.hpp"
#include "cats/swin.hpp"

namespace {

using namespace cats;

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal());
  return t;
}

ImageVolume random_image(GridDims dims, std::uint64_t seed) {
  Rng rng(seed);
  ImageVolume v(dims, 1);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
  return v;
}

// Same-padded 3^3 convolution on a 32^3 grid, channels in = out = arg.
void BM_Conv3d(benchmark::State& state) {
  const std::int64_t c = state.range(0);
  auto x = ag::constant(random_tensor<float>({32, 32, 32, c}, 1));
  auto w = ag::constant(random_tensor<float>({27 * c, c}, 2));
  auto b = ag::constant(Tensor<float>(Shape{c}));
  for (auto _ : state) benchmark::DoNotOptimize(ag::conv3d<float>(nullptr, x, w, b, 3));
  state.SetItemsProcessed(state.iterations() * 32 * 32 * 32);
}
BENCHMARK(BM_Conv3d)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

// Shifted-window block on a 16^3 token grid, window 4, 24 channels, 3 heads.
void BM_SwinBlock(benchmark::State& state) {
  ag::ParameterSet<float> params;
  const auto spec = geometry::WindowSpec::shifted({4, 4, 4});
  auto w = swin::make_block_weights(params, "blk", 24, 3, spec.window, 4.0, true, 3);
  auto x = ag::constant(random_tensor<float>({16, 16, 16, 24}, 4));
  const auto plan = swin::make_block_plan({16, 16, 16}, spec);
  for (auto _ : state) benchmark::DoNotOptimize(swin::swin_block<float>(nullptr, x, plan, w, 3));
}
BENCHMARK(BM_SwinBlock)->Unit(benchmark::kMillisecond);

ModelConfig default_config() {
  ModelConfig c;
  c.num_classes = 3;
  c.finalize();
  return c;
}

void BM_ModelForward(benchmark::State& state) {
  CatsModel<float> model(default_config());
  const auto img = random_image({32, 32, 32}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(nullptr, img));
}
BENCHMARK(BM_ModelForward)->Unit(benchmark::kMillisecond);

// Forward, loss and backward for one 32^3 case.
void BM_ModelTrainStep(benchmark::State& state) {
  CatsModel<float> model(default_config());
  const auto img = random_image({32, 32, 32}, 6);
  LabelVolume label({32, 32, 32}, 1);
  Rng rng(7);
  for (auto& v : label.voxels) v = static_cast<std::uint8_t>(rng.below(3));
  for (auto _ : state) {
    ag::Tape<float> tape;
    model.parameters().zero_grad();
    tape.backward(loss<float>(&tape, model.forward(&tape, img), label));
  }
}
BENCHMARK(BM_ModelTrainStep)->Unit(benchmark::kMillisecond);

// Dice, ASD and HD95 for every foreground class of a 32^3 volume pair.
void BM_EvaluateCase(benchmark::State& state) {
  LabelVolume gt({32, 32, 32}, 1), pred({32, 32, 32}, 1);
  for (std::int64_t i = 0; i < 32; ++i)
    for (std::int64_t j = 0; j < 32; ++j)
      for (std::int64_t k = 0; k < 32; ++k) {
        const auto r2 = (i - 16) * (i - 16) + (j - 16) * (j - 16) + (k - 16) * (k - 16);
        const auto s2 = (i - 15) * (i - 15) + (j - 17) * (j - 17) + (k - 16) * (k - 16);
        gt.at(i, j, k) = r2 < 36 ? 2 : r2 < 144 ? 1 : 0;
        pred.at(i, j, k) = s2 < 30 ? 2 : s2 < 150 ? 1 : 0;
      }
  for (auto _ : state) benchmark::DoNotOptimize(metrics::evaluate_case("bench", pred, gt, 3));
}
BENCHMARK(BM_EvaluateCase)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
