#include <doctest.h>

#include <cmath>
#include <fstream>

#include "resprobe/full_scale.hpp"
#include "resprobe/nn.hpp"
#include "resprobe/ops.hpp"
#include "resprobe/serialize.hpp"
#include "resprobe/share_unroll.hpp"
#include "support/testing.hpp"

using namespace resprobe;
using testing_support::randn_tensor;
using testing_support::tiny_original;
using testing_support::tiny_single_repr;

namespace {

std::vector<std::vector<double>> snapshot_state(nn::Model& m) {
  std::vector<std::vector<double>> out;
  for (auto& r : m.state_refs()) out.push_back(*r.values);
  return out;
}

void zero_block_outputs(nn::Model& m) {
  for (auto& stage : m.stages)
    for (auto& blk : stage) {
      for (auto& v : blk->conv2.weight.data()) v = 0.0;
      for (auto& v : blk->conv2.bias.data()) v = 0.0;
    }
}

}  // namespace

TEST_CASE("parameter count of a tiny config matches the hand-computed sum") {
  nn::ArchitectureConfig a = tiny_single_repr(4, 8, {1, 16, 16}, 5);
  nn::Model m = nn::build_model(a, 1);
  // stem 1->8 3x3 conv: 9*8 + 8
  int64_t stem = 9 * 1 * 8 + 8;
  // block: two BN (gamma+beta = 2*8 each) + two 8->8 3x3 convs
  int64_t block = 2 * (2 * 8) + 2 * (9 * 8 * 8 + 8);
  // head: BN + dense 8->5
  int64_t head = 2 * 8 + (8 * 5 + 5);
  int64_t want = stem + 4 * block + head;
  CHECK(m.parameter_count() == want);
  CHECK(share::expected_parameter_count(a) == want);
}

TEST_CASE("same seed builds bit-identical parameters") {
  nn::ArchitectureConfig a = tiny_original();
  nn::Model m1 = nn::build_model(a, 42);
  nn::Model m2 = nn::build_model(a, 42);
  auto p1 = m1.parameters();
  auto p2 = m2.parameters();
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i].name == p2[i].name);
    CHECK(p1[i].tensor.data() == p2[i].tensor.data());
  }
  nn::Model m3 = nn::build_model(a, 43);
  CHECK(m3.parameters()[0].tensor.data() != p1[0].tensor.data());
}

TEST_CASE("full-scale reference parameter counts") {
  CHECK(full_scale::wide_reference_count(10) == 45'732'842);
  CHECK(full_scale::single_repr_reference_count(10) == 1'829'210);
  int64_t ubn110 = full_scale::preact_resnet_ubn_reference_count(110, 5, 10);
  CHECK(ubn110 >= 570'000);
  CHECK(ubn110 <= 576'000);
  // the shared-from-depth family tracks the published rounded totals
  CHECK(std::llround(full_scale::preact_resnet_reference_count(32) / 1000.0) == 468);
  CHECK(std::llround(full_scale::preact_resnet_reference_count(110) / 1000.0) == 1735);
  CHECK(std::llround(full_scale::preact_resnet_ubn_reference_count(146, 5) / 1000.0) == 573);
  CHECK(std::llround(full_scale::preact_resnet_ubn_reference_count(182, 5) / 1000.0) == 576);
}

TEST_CASE("config validation rejects inconsistent settings") {
  nn::ArchitectureConfig a = tiny_single_repr();
  a.stem_channels = a.stages[0].channels + 1;
  CHECK_THROWS_WITH_AS(nn::build_model(a, 0), doctest::Contains("inconsistent channel chain"),
                       std::invalid_argument);

  nn::ArchitectureConfig b = tiny_single_repr();
  b.stages.push_back({2, 6});
  CHECK_THROWS_AS(b.validate(), std::invalid_argument);  // single_repr is one stage

  nn::ArchitectureConfig c = tiny_original();
  c.shortcut = nn::ShortcutKind::pool;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  nn::ArchitectureConfig d = tiny_original();
  d.stages[1].channels = d.stages[0].channels;
  d.family = nn::Family::avg_pool;
  d.shortcut = nn::ShortcutKind::pool;
  CHECK_NOTHROW(d.validate());
  d.stages[1].channels += 2;  // pool cannot change channels
  CHECK_THROWS_AS(d.validate(), std::invalid_argument);
}

TEST_CASE("zeroed residual blocks make every F vanish exactly") {
  nn::ArchitectureConfig a = tiny_single_repr(3, 6, {2, 6, 6});
  nn::Model m = nn::build_model(a, 3);
  zero_block_outputs(m);
  Rng rng(4);
  Tensor batch = randn_tensor(rng, {2, 2, 6, 6});
  Tape tape;
  auto trace = nn::forward_collect(tape, m, batch, {.mode = Mode::eval});
  for (int b = 0; b < m.num_blocks(); ++b) {
    for (double v : trace.F[b].data()) CHECK(v == 0.0);
    CHECK(trace.h[b].data() == trace.h[b + 1].data());
  }
}

TEST_CASE("eval forward twice gives identical logits and mutates no state") {
  nn::ArchitectureConfig a = tiny_original();
  nn::Model m = nn::build_model(a, 5);
  Rng rng(6);
  Tensor batch = randn_tensor(rng, {3, 2, 8, 8});
  auto before = snapshot_state(m);
  Tape t1;
  auto tr1 = nn::forward_collect(t1, m, batch, {.mode = Mode::eval});
  Tape t2;
  auto tr2 = nn::forward_collect(t2, m, batch, {.mode = Mode::eval});
  CHECK(tr1.logits.data() == tr2.logits.data());
  auto after = snapshot_state(m);
  CHECK(before == after);
}

TEST_CASE("train forward updates running statistics, eval does not") {
  nn::ArchitectureConfig a = tiny_single_repr();
  nn::Model m = nn::build_model(a, 5);
  Rng rng(6);
  Tensor batch = randn_tensor(rng, {4, 2, 6, 6});
  auto before = snapshot_state(m);
  Tape t;
  nn::forward_collect(t, m, batch, {.mode = Mode::train});
  CHECK(snapshot_state(m) != before);
}

TEST_CASE("head applied to the final representation reproduces pipeline logits bit-exactly") {
  nn::ArchitectureConfig a = tiny_original();
  nn::Model m = nn::build_model(a, 9);
  Rng rng(10);
  Tensor batch = randn_tensor(rng, {2, 2, 8, 8});
  Tape tape;
  auto trace = nn::forward_collect(tape, m, batch, {.mode = Mode::eval});
  Tensor again = nn::head_logits(tape, m, trace.h.back(), Mode::eval);
  CHECK(again.data() == trace.logits.data());
}

TEST_CASE("forward_through at any depth reproduces the final logits") {
  nn::ArchitectureConfig a = tiny_original();
  nn::Model m = nn::build_model(a, 12);
  Rng rng(13);
  Tensor batch = randn_tensor(rng, {2, 2, 8, 8});
  Tape tape;
  auto trace = nn::forward_collect(tape, m, batch, {.mode = Mode::eval});
  for (int b = 0; b < m.num_blocks(); ++b) {
    Tape t2;
    Tensor logits = nn::forward_through(t2, m, b, trace.h[b], Mode::eval);
    CHECK(logits.data() == trace.logits.data());
  }
}

TEST_CASE("shape preservation and additive decomposition over random configs") {
  Rng cfg_rng(77);
  for (int trial = 0; trial < 6; ++trial) {
    int blocks = 1 + static_cast<int>(cfg_rng.below(3));
    int channels = 4 + 2 * static_cast<int>(cfg_rng.below(3));
    nn::ArchitectureConfig a = tiny_single_repr(blocks, channels, {2, 5, 5}, 3);
    nn::Model m = nn::build_model(a, 100 + trial);
    Rng rng(trial);
    Tensor batch = randn_tensor(rng, {2, 2, 5, 5});
    Tape tape;
    auto trace = nn::forward_collect(tape, m, batch, {.mode = Mode::eval});
    for (int b = 0; b < m.num_blocks(); ++b) {
      CHECK(trace.F[b].shape() == trace.h[b].shape());
      // h[i+1] - h[i] == F[i] within 1e-12 inside the (single) stage
      const auto& h0 = trace.h[b].data();
      const auto& h1 = trace.h[b + 1].data();
      const auto& f = trace.F[b].data();
      double worst = 0.0;
      for (size_t i = 0; i < f.size(); ++i)
        worst = std::max(worst, std::fabs(h1[i] - h0[i] - f[i]));
      CHECK(worst < 1e-12);
    }
  }
}

TEST_CASE("multi-stage shapes: conv shortcut halves spatial extent and widens channels") {
  nn::ArchitectureConfig a = tiny_original({2, 8, 8});
  nn::Model m = nn::build_model(a, 21);
  Rng rng(22);
  Tensor batch = randn_tensor(rng, {1, 2, 8, 8});
  Tape tape;
  auto trace = nn::forward_collect(tape, m, batch, {.mode = Mode::eval});
  CHECK(trace.h[0].shape() == Shape{1, 6, 8, 8});
  CHECK(trace.h[2].shape() == Shape{1, 8, 4, 4});  // after the boundary shortcut
  CHECK(trace.h[4].shape() == Shape{1, 8, 4, 4});
  CHECK(trace.logits.shape() == Shape{1, 3});
}

TEST_CASE("avg_pool family halves spatial extent without changing channels") {
  nn::ArchitectureConfig a;
  a.family = nn::Family::avg_pool;
  a.stages = {{1, 5}, {1, 5}};
  a.stem_channels = 5;
  a.input_shape = {2, 8, 8};
  a.num_classes = 3;
  a.shortcut = nn::ShortcutKind::pool;
  nn::Model m = nn::build_model(a, 31);
  Rng rng(32);
  Tensor batch = randn_tensor(rng, {2, 2, 8, 8});
  Tape tape;
  auto trace = nn::forward_collect(tape, m, batch, {.mode = Mode::eval});
  CHECK(trace.h[1].shape() == Shape{2, 5, 4, 4});
}

TEST_CASE("He initialization: empirical stem variance tracks 2/fan_in") {
  // block conv of a 64-channel model: fan_in 576, 36864 weights
  nn::ArchitectureConfig a = tiny_single_repr(1, 64, {3, 8, 8}, 4);
  nn::Model m = nn::build_model(a, 7);
  const auto& w = m.stages[0][0]->conv1.weight.data();
  double mean = 0.0;
  for (double v : w) mean += v;
  mean /= static_cast<double>(w.size());
  double var = 0.0;
  for (double v : w) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.size());
  double want = 2.0 / (64.0 * 9.0);
  CHECK(var > 0.9 * want);
  CHECK(var < 1.1 * want);
  // biases start at zero, gamma at one
  for (double v : m.stem.bias.data()) CHECK(v == 0.0);
  for (double v : m.stages[0][0]->bn1.primary.gamma.data()) CHECK(v == 1.0);
}

TEST_CASE("batchnorm_forward step bank selection") {
  nn::BatchNormState s;
  s.primary.gamma = Tensor::full({4}, 1.0);
  s.primary.beta = Tensor::zeros({4});
  s.primary.running_mean.assign(4, 0.0);
  s.primary.running_var.assign(4, 1.0);
  Rng rng(3);
  Tensor x = randn_tensor(rng, {2, 4, 3, 3});
  Tape tape;
  CHECK_NOTHROW(nn::batchnorm_forward(tape, s, x, Mode::eval));
  CHECK_THROWS_WITH_AS(nn::batchnorm_forward(tape, s, x, Mode::eval, 0),
                       doctest::Contains("no step banks"), std::invalid_argument);
  // give it banks: now a step index is mandatory and bounded
  for (int k = 0; k < 2; ++k) {
    nn::BnBank b;
    b.gamma = Tensor::full({4}, 0.1);
    b.beta = Tensor::zeros({4});
    b.running_mean.assign(4, 0.0);
    b.running_var.assign(4, 1.0);
    s.step_banks.push_back(std::move(b));
  }
  CHECK_THROWS_WITH_AS(nn::batchnorm_forward(tape, s, x, Mode::eval),
                       doctest::Contains("required"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(nn::batchnorm_forward(tape, s, x, Mode::eval, 2),
                       doctest::Contains("out of range"), std::invalid_argument);
  CHECK_NOTHROW(nn::batchnorm_forward(tape, s, x, Mode::eval, 1));
}

TEST_CASE("checkpoint round-trips bit-exactly with embedded architecture") {
  auto dir = testing_support::scratch_dir("ckpt");
  nn::ArchitectureConfig a = tiny_original();
  nn::Model m = nn::build_model(a, 77);
  // dirty the running statistics so they carry information
  Rng rng(8);
  Tensor batch = randn_tensor(rng, {4, 2, 8, 8});
  Tape tape;
  nn::forward_collect(tape, m, batch, {.mode = Mode::train});

  std::string path = (dir / "model.ckpt").string();
  nn::save_checkpoint(path, m, 77, 5);
  auto ck = nn::load_checkpoint(path);
  CHECK(ck.seed == 77);
  CHECK(ck.epoch == 5);
  CHECK(nn::to_json(ck.model.config) == nn::to_json(a));

  auto ra = m.state_refs();
  auto rb = ck.model.state_refs();
  REQUIRE(ra.size() == rb.size());
  for (size_t i = 0; i < ra.size(); ++i) {
    CHECK(ra[i].name == rb[i].name);
    CHECK(*ra[i].values == *rb[i].values);  // bit exact
  }

  // and the file itself is reproducible byte for byte
  std::string path2 = (dir / "model2.ckpt").string();
  nn::save_checkpoint(path2, m, 77, 5);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  CHECK_THROWS(nn::load_checkpoint((dir / "missing.ckpt").string()));
}

TEST_CASE("architecture json round-trip is lossless and fail-closed") {
  nn::ArchitectureConfig a = tiny_original();
  auto j = nn::to_json(a);
  auto b = nn::architecture_from_json(j);
  CHECK(nn::to_json(b) == j);
  j["typo_key"] = 1;
  CHECK_THROWS_WITH_AS(nn::architecture_from_json(j), doctest::Contains("typo_key"),
                       std::invalid_argument);
}
