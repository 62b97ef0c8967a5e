#include <benchmark/benchmark.h>

#include "resprobe/nn.hpp"
#include "resprobe/ops.hpp"
#include "resprobe/rng.hpp"

using namespace resprobe;

namespace {

nn::ArchitectureConfig desk_single_repr(int blocks, int channels) {
  nn::ArchitectureConfig a;
  a.family = nn::Family::single_repr;
  a.stages = {{blocks, channels}};
  a.stem_channels = channels;
  a.input_shape = {3, 32, 32};
  a.num_classes = 10;
  a.shortcut = nn::ShortcutKind::none;
  return a;
}

Tensor rand_batch(Rng& rng, int64_t n) {
  Tensor t = Tensor::zeros({n, 3, 32, 32});
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

void BM_ForwardEval(benchmark::State& state) {
  auto model = nn::build_model(desk_single_repr(static_cast<int>(state.range(0)),
                                                static_cast<int>(state.range(1))),
                               3);
  Rng rng(5);
  Tensor batch = rand_batch(rng, 32);
  for (auto _ : state) {
    Tape tape;
    tape.write_leaf_grads = false;
    auto trace = nn::forward_collect(tape, model, batch, {.mode = Mode::eval});
    benchmark::DoNotOptimize(trace.logits.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_ForwardEval)->Args({6, 8})->Args({8, 16});

void BM_TrainStep(benchmark::State& state) {
  auto model = nn::build_model(desk_single_repr(static_cast<int>(state.range(0)),
                                                static_cast<int>(state.range(1))),
                               3);
  Rng rng(5);
  Tensor batch = rand_batch(rng, 32);
  std::vector<int> labels(32);
  for (int i = 0; i < 32; ++i) labels[i] = i % 10;
  auto params = model.parameters();
  for (auto _ : state) {
    Tape tape;
    auto trace = nn::forward_collect(tape, model, batch, {.mode = Mode::train});
    LossValue loss = ops::softmax_cross_entropy(tape, trace.logits, labels);
    tape.backward(loss);
    for (auto& p : params) p.tensor.clear_grad();
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_TrainStep)->Args({6, 8})->Args({8, 16});

}  // namespace
