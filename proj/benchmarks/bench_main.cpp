#include "defectloc/balance.hpp"
#include "defectloc/graphseg.hpp"
#include "defectloc/loss.hpp"
#include "defectloc/metrics.hpp"
#include "defectloc/model.hpp"

#include <benchmark/benchmark.h>

using namespace defectloc;

namespace {

Image noise(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  Image img(rows, cols);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform();
  return img;
}

Tensor batch_of(int n, int size) {
  std::vector<Image> imgs;
  for (int i = 0; i < n; ++i) imgs.push_back(noise(size, size, i));
  return Tensor::from_images(imgs);
}

void BM_ForwardDesk(benchmark::State& state) {
  const ModelWeights w = build(NetworkConfig::scaled(96, {16, 32, 64, 64, 128, 128}), 1);
  const Tensor batch = batch_of(static_cast<int>(state.range(0)), 96);
  for (auto _ : state) benchmark::DoNotOptimize(forward(w, batch));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardDesk)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_ForwardBackwardDesk(benchmark::State& state) {
  ModelWeights w = build(NetworkConfig::scaled(96, {16, 32, 64, 64, 128, 128}), 1);
  const Tensor batch = batch_of(static_cast<int>(state.range(0)), 96);
  const Tensor upstream = batch_of(static_cast<int>(state.range(0)), 96);
  for (auto _ : state) {
    Network net(w);
    net.forward(batch, Mode::Train);
    benchmark::DoNotOptimize(net.backward(upstream));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackwardDesk)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_Ssim(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Image a = noise(n, n, 1), b = noise(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(ssim_score(a, b));
}
BENCHMARK(BM_Ssim)->Arg(96)->Arg(289);

void BM_LossWithGradient(benchmark::State& state) {
  std::vector<Image> t, r;
  std::vector<Mask> m;
  for (int i = 0; i < 16; ++i) {
    t.push_back(noise(96, 96, i));
    r.push_back(noise(96, 96, 100 + i));
    m.push_back(Mask::Constant(96, 96, i % 2 == 0));
  }
  std::vector<Image> grad;
  for (auto _ : state) benchmark::DoNotOptimize(compute_loss(t, r, m, LossConfig{}, &grad));
}
BENCHMARK(BM_LossWithGradient)->Unit(benchmark::kMillisecond);

void BM_Felzenszwalb(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Image img = gaussian_smooth(noise(n, n, 3), 3.0);
  for (auto _ : state) benchmark::DoNotOptimize(felzenszwalb_segment(img, SegParams{}));
}
BENCHMARK(BM_Felzenszwalb)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_KMeans(benchmark::State& state) {
  Rng rng(4);
  std::vector<FeatureVector> feats;
  for (int i = 0; i < state.range(0); ++i) {
    FeatureVector f{{"b", i, 0}, std::vector<double>(64)};
    for (double& v : f.values) v = rng.normal() + (i % 7);
    feats.push_back(std::move(f));
  }
  KMeansOptions opt;
  for (auto _ : state) benchmark::DoNotOptimize(kmeans_fit(feats, opt));
}
BENCHMARK(BM_KMeans)->Arg(2000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
