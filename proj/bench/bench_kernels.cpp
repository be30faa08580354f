// Serial reference vs OpenMP kernels on shapes taken from the CNN preset.
//
//   normlab_bench [--threads N] [benchmark flags]

#include <benchmark/benchmark.h>

#include <cstdlib>
#include <cstring>
#include <vector>

#include "normlab/kernels.hpp"
#include "normlab/rng.hpp"

using namespace normlab;
namespace k = normlab::kernels;

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

template <bool Parallel>
void gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::gemm(k::GemmOp::NN, a.data(), b.data(), c.data(), n, n, n);
    else
      k::reference::gemm(k::GemmOp::NN, a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

// Second conv stage of the CNN preset on 28x28 inputs: 32 -> 32 channels at 14x14.
const k::ConvShape kConv{64, 32, 32, 14, 14};

template <bool Parallel>
void conv_forward(benchmark::State& state) {
  const auto x = filled(kConv.batch * kConv.in_channels * kConv.plane(), 3);
  const auto w = filled(kConv.out_channels * kConv.patch(), 4);
  std::vector<double> y(kConv.batch * kConv.out_channels * kConv.plane());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::conv2d_forward(x, w, y, kConv);
    else
      k::reference::conv2d_forward(x, w, y, kConv);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void conv_backward_weight(benchmark::State& state) {
  const auto x = filled(kConv.batch * kConv.in_channels * kConv.plane(), 5);
  const auto dy = filled(kConv.batch * kConv.out_channels * kConv.plane(), 6);
  std::vector<double> dw(kConv.out_channels * kConv.patch());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::conv2d_backward_weight(x, dy, dw, kConv);
    else
      k::reference::conv2d_backward_weight(x, dy, dw, kConv);
    benchmark::DoNotOptimize(dw.data());
  }
}

template <bool Parallel>
void moments(benchmark::State& state) {
  const k::ChannelShape s{64, 32, 28 * 28};
  const auto x = filled(s.batch * s.channels * s.spatial, 7);
  std::vector<double> mean(s.channels), var(s.channels);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::channel_moments(x, mean, var, s);
    else
      k::reference::channel_moments(x, mean, var, s);
    benchmark::DoNotOptimize(var.data());
  }
}

}  // namespace

BENCHMARK(gemm<false>)->Name("gemm/reference")->Arg(64)->Arg(256);
BENCHMARK(gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(256);
BENCHMARK(conv_forward<false>)->Name("conv_forward/reference")->Unit(benchmark::kMillisecond);
BENCHMARK(conv_forward<true>)->Name("conv_forward/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(conv_backward_weight<false>)->Name("conv_backward_weight/reference")->Unit(benchmark::kMillisecond);
BENCHMARK(conv_backward_weight<true>)->Name("conv_backward_weight/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(moments<false>)->Name("channel_moments/reference");
BENCHMARK(moments<true>)->Name("channel_moments/parallel");

int main(int argc, char** argv) {
  std::vector<char*> rest;
  for (int i = 0; i < argc; ++i) {
    if (i + 1 < argc && std::strcmp(argv[i], "--threads") == 0) {
      k::set_num_threads(std::atoi(argv[++i]));
      continue;
    }
    rest.push_back(argv[i]);
  }
  int n = static_cast<int>(rest.size());
  benchmark::Initialize(&n, rest.data());
  if (benchmark::ReportUnrecognizedArguments(n, rest.data())) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
