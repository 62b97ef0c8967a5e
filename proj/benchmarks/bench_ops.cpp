#include <benchmark/benchmark.h>

#include "resprobe/ops.hpp"
#include "resprobe/rng.hpp"

using namespace resprobe;

namespace {

Tensor rand_tensor(Rng& rng, Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  int64_t c = state.range(0);
  Rng rng(1);
  Tensor x = rand_tensor(rng, {8, c, 32, 32});
  Tensor w = rand_tensor(rng, {c, c, 3, 3});
  Tensor b = Tensor::zeros({c});
  for (auto _ : state) {
    Tape tape;
    Tensor y = ops::conv2d(tape, x, w, b, 1, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 8);
  double macs = 8.0 * c * c * 9.0 * 32 * 32;
  state.counters["gflops"] =
      benchmark::Counter(2e-9 * macs, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv2dForward)->Arg(8)->Arg(16)->Arg(32);

void BM_Conv2dBackward(benchmark::State& state) {
  int64_t c = state.range(0);
  Rng rng(1);
  Tensor x0 = rand_tensor(rng, {8, c, 32, 32});
  Tensor w = rand_tensor(rng, {c, c, 3, 3});
  Tensor b = Tensor::zeros({c});
  w.set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    Tensor x = x0.clone();
    x.set_requires_grad(true);
    Tensor y = ops::conv2d(tape, x, w, b, 1, 1);
    Tensor s = ops::sum(tape, y);
    tape.backward(s);
    benchmark::DoNotOptimize(w.impl());
    w.clear_grad();
  }
}
BENCHMARK(BM_Conv2dBackward)->Arg(8)->Arg(16);

void BM_Matmul(benchmark::State& state) {
  int64_t n = state.range(0);
  Rng rng(1);
  Tensor a = rand_tensor(rng, {n, n});
  Tensor b = rand_tensor(rng, {n, n});
  for (auto _ : state) {
    Tape tape;
    Tensor y = ops::matmul(tape, a, b);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.counters["gflops"] = benchmark::Counter(
      2e-9 * n * n * n, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_BatchNormTrain(benchmark::State& state) {
  Rng rng(1);
  Tensor x = rand_tensor(rng, {32, 16, 32, 32});
  Tensor gamma = Tensor::full({16}, 1.0);
  Tensor beta = Tensor::zeros({16});
  std::vector<double> rm(16, 0.0), rv(16, 1.0);
  for (auto _ : state) {
    Tape tape;
    ops::BatchNormArgs args{Mode::train, 0.1, 1e-5, &rm, &rv};
    Tensor y = ops::batchnorm(tape, x, gamma, beta, args);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_BatchNormTrain);

}  // namespace

BENCHMARK_MAIN();
