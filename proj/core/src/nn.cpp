#include "resprobe/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "resprobe/rng.hpp"

namespace resprobe::nn {

const char* family_name(Family f) {
  switch (f) {
    case Family::original: return "original";
    case Family::single_repr: return "single_repr";
    case Family::avg_pool: return "avg_pool";
    case Family::wide: return "wide";
  }
  return "?";
}

Family family_from_name(const std::string& name) {
  if (name == "original") return Family::original;
  if (name == "single_repr") return Family::single_repr;
  if (name == "avg_pool") return Family::avg_pool;
  if (name == "wide") return Family::wide;
  throw std::invalid_argument("unknown architecture family '" + name + "'");
}

const char* shortcut_name(ShortcutKind k) {
  switch (k) {
    case ShortcutKind::conv1x1: return "conv1x1";
    case ShortcutKind::pool: return "pool";
    case ShortcutKind::none: return "none";
  }
  return "?";
}

ShortcutKind shortcut_from_name(const std::string& name) {
  if (name == "conv1x1") return ShortcutKind::conv1x1;
  if (name == "pool") return ShortcutKind::pool;
  if (name == "none") return ShortcutKind::none;
  throw std::invalid_argument("unknown shortcut kind '" + name + "'");
}

const char* bn_mode_name(BnShareMode m) {
  switch (m) {
    case BnShareMode::naive: return "naive";
    case BnShareMode::unshared_stats: return "unshared_stats";
    case BnShareMode::ubn_full: return "ubn_full";
  }
  return "?";
}

BnShareMode bn_mode_from_name(const std::string& name) {
  if (name == "naive") return BnShareMode::naive;
  if (name == "unshared_stats") return BnShareMode::unshared_stats;
  if (name == "ubn_full") return BnShareMode::ubn_full;
  throw std::invalid_argument("unknown bn sharing mode '" + name + "'");
}

void ArchitectureConfig::validate() const {
  if (stages.empty()) throw std::invalid_argument("architecture needs at least one stage");
  for (const auto& st : stages) {
    if (st.num_blocks < 1 || st.channels < 1)
      throw std::invalid_argument("stage blocks and channels must be positive");
  }
  if (input_shape.size() != 3)
    throw std::invalid_argument("input_shape must be {C, H, W}, got " + shape_str(input_shape));
  for (int64_t d : input_shape)
    if (d < 1) throw std::invalid_argument("input_shape extents must be positive");
  if (num_classes < 2) throw std::invalid_argument("need at least two classes");
  if (stem_channels < 1) throw std::invalid_argument("stem_channels must be positive");
  if (stem_channels != stages[0].channels)
    throw std::invalid_argument("inconsistent channel chain: stem has " +
                                std::to_string(stem_channels) + " channels but stage 0 expects " +
                                std::to_string(stages[0].channels));
  switch (family) {
    case Family::single_repr:
      if (stages.size() != 1)
        throw std::invalid_argument("single_repr has exactly one stage");
      if (shortcut != ShortcutKind::none)
        throw std::invalid_argument("single_repr has no shortcut layers");
      break;
    case Family::avg_pool:
      if (shortcut != ShortcutKind::pool)
        throw std::invalid_argument("avg_pool family uses pool shortcuts");
      for (const auto& st : stages)
        if (st.channels != stages[0].channels)
          throw std::invalid_argument(
              "inconsistent channel chain: pool shortcuts cannot change channel count");
      break;
    case Family::original:
    case Family::wide:
      if (shortcut != ShortcutKind::conv1x1)
        throw std::invalid_argument(std::string(family_name(family)) +
                                    " family uses conv1x1 shortcuts");
      break;
  }
  if (stages.size() > 1) {
    // each stage transition halves spatial extent
    int64_t h = input_shape[1], w = input_shape[2];
    for (size_t s = 0; s + 1 < stages.size(); ++s) {
      if (h < 2 || w < 2)
        throw std::invalid_argument("input too small for " + std::to_string(stages.size()) +
                                    " stages");
      h /= 2;
      w /= 2;
    }
  }
}

int ArchitectureConfig::total_blocks() const {
  int n = 0;
  for (const auto& st : stages) n += st.num_blocks;
  return n;
}

void SharingSpec::validate() const {
  if (share_from_block < 1)
    throw std::invalid_argument("share_from_block must be at least 1");
  if (gamma_init_shared <= 0.0)
    throw std::invalid_argument("gamma_init_shared must be positive");
}

BnBank& BatchNormState::bank(std::optional<int> step) {
  if (step_banks.empty()) {
    if (step.has_value())
      throw std::invalid_argument("batchnorm has no step banks but step_index " +
                                  std::to_string(*step) + " was given");
    return primary;
  }
  if (!step.has_value())
    throw std::invalid_argument("batchnorm has step banks; step_index is required");
  if (*step < 0 || *step >= static_cast<int>(step_banks.size()))
    throw std::invalid_argument("step_index " + std::to_string(*step) + " out of range [0, " +
                                std::to_string(step_banks.size()) + ")");
  return step_banks[*step];
}

int Model::num_blocks() const {
  int n = 0;
  for (const auto& st : stages) n += static_cast<int>(st.size());
  return n;
}

std::pair<int, int> Model::stage_pos(int block) const {
  int b = block;
  for (size_t s = 0; s < stages.size(); ++s) {
    if (b < static_cast<int>(stages[s].size())) return {static_cast<int>(s), b};
    b -= static_cast<int>(stages[s].size());
  }
  throw std::out_of_range("block index " + std::to_string(block) + " out of range [0, " +
                          std::to_string(num_blocks()) + ")");
}

int Model::first_block_of_stage(int stage) const {
  if (stage < 0 || stage >= static_cast<int>(stages.size()))
    throw std::out_of_range("stage index out of range");
  int n = 0;
  for (int s = 0; s < stage; ++s) n += static_cast<int>(stages[s].size());
  return n;
}

std::optional<int> Model::bn_step_for(int stage, int pos) const {
  if (!sharing) return std::nullopt;
  if (pos < sharing->share_from_block) return std::nullopt;
  if (sharing->bn_mode == BnShareMode::naive) return std::nullopt;
  (void)stage;
  return pos - sharing->share_from_block;
}

// ---------------------------------------------------------------------------
// Registry walk. Order is construction order and stays stable across runs;
// tied tensors are emitted once, under the first owning position.
// ---------------------------------------------------------------------------

namespace {

struct Walker {
  std::unordered_set<const TensorImpl*> seen_tensors;
  std::unordered_set<const ResidualBlock*> seen_blocks;
  std::function<void(const std::string&, Tensor)> on_param;
  std::function<void(const std::string&, std::vector<double>*)> on_stat;

  void param(const std::string& name, const Tensor& t) {
    if (!seen_tensors.insert(t.impl()).second) return;
    if (on_param) on_param(name, t);
  }
  void stat(const std::string& name, std::vector<double>* v) {
    if (on_stat) on_stat(name, v);
  }
  void bn(const std::string& prefix, BatchNormState& s) {
    // with step banks present every application goes through a bank, so
    // the primary would be dead weight in the registry
    if (s.step_banks.empty()) {
      param(prefix + ".gamma", s.primary.gamma);
      param(prefix + ".beta", s.primary.beta);
      stat(prefix + ".running_mean", &s.primary.running_mean);
      stat(prefix + ".running_var", &s.primary.running_var);
    }
    for (size_t k = 0; k < s.step_banks.size(); ++k) {
      std::string p = prefix + ".step" + std::to_string(k);
      param(p + ".gamma", s.step_banks[k].gamma);
      param(p + ".beta", s.step_banks[k].beta);
      stat(p + ".running_mean", &s.step_banks[k].running_mean);
      stat(p + ".running_var", &s.step_banks[k].running_var);
    }
  }
  void conv(const std::string& prefix, Conv2dLayer& c) {
    param(prefix + ".weight", c.weight);
    param(prefix + ".bias", c.bias);
  }
  void walk(Model& m) {
    conv("stem", m.stem);
    for (size_t s = 0; s < m.stages.size(); ++s) {
      for (size_t j = 0; j < m.stages[s].size(); ++j) {
        ResidualBlock* blk = m.stages[s][j].get();
        if (!seen_blocks.insert(blk).second) continue;
        std::string p = "s" + std::to_string(s) + ".b" + std::to_string(j);
        bn(p + ".bn1", blk->bn1);
        conv(p + ".conv1", blk->conv1);
        bn(p + ".bn2", blk->bn2);
        conv(p + ".conv2", blk->conv2);
      }
      if (s + 1 < m.stages.size() && m.shortcuts[s].kind == ShortcutKind::conv1x1) {
        conv("shortcut" + std::to_string(s), m.shortcuts[s].conv);
      }
    }
    bn("head.bn", m.head.bn);
    param("head.fc.weight", m.head.fc.weight);
    param("head.fc.bias", m.head.fc.bias);
  }
};

}  // namespace

std::vector<Model::NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out;
  Walker w;
  w.on_param = [&](const std::string& name, Tensor t) { out.push_back({name, std::move(t)}); };
  w.walk(const_cast<Model&>(*this));
  return out;
}

int64_t Model::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

std::vector<Model::StateRef> Model::state_refs() {
  std::vector<StateRef> out;
  Walker w;
  w.on_param = [&](const std::string& name, Tensor t) {
    out.push_back({name, t.shape(), &t.data()});
  };
  w.on_stat = [&](const std::string& name, std::vector<double>* v) {
    out.push_back({name, Shape{static_cast<int64_t>(v->size())}, v});
  };
  w.walk(*this);
  return out;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace {

Tensor he_normal(Rng& rng, Shape shape, int64_t fan_in) {
  Tensor t = Tensor::zeros(std::move(shape));
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& x : t.data()) x = rng.normal(0.0, stddev);
  t.set_requires_grad(true);
  return t;
}

Tensor param_full(Shape shape, double value) {
  Tensor t = Tensor::full(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

Conv2dLayer make_conv(Rng& rng, int in_ch, int out_ch, int k, int stride, int pad) {
  Conv2dLayer c;
  c.weight = he_normal(rng, {out_ch, in_ch, k, k}, static_cast<int64_t>(in_ch) * k * k);
  c.bias = param_full({out_ch}, 0.0);
  c.stride = stride;
  c.pad = pad;
  return c;
}

BnBank make_bank(int channels, double gamma_init) {
  BnBank b;
  b.gamma = param_full({channels}, gamma_init);
  b.beta = param_full({channels}, 0.0);
  b.running_mean.assign(channels, 0.0);
  b.running_var.assign(channels, 1.0);
  return b;
}

BatchNormState make_bn(int channels) {
  BatchNormState s;
  s.primary = make_bank(channels, 1.0);
  return s;
}

std::shared_ptr<ResidualBlock> make_block(Rng& rng, int channels) {
  auto b = std::make_shared<ResidualBlock>();
  b->channels = channels;
  b->bn1 = make_bn(channels);
  b->conv1 = make_conv(rng, channels, channels, 3, 1, 1);
  b->bn2 = make_bn(channels);
  b->conv2 = make_conv(rng, channels, channels, 3, 1, 1);
  return b;
}

}  // namespace

Model build_model(const ArchitectureConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Model m;
  m.config = config;
  int64_t in_c = config.input_shape[0];
  m.stem = make_conv(rng, static_cast<int>(in_c), config.stem_channels, 3, 1, 1);
  m.stages.resize(config.stages.size());
  for (size_t s = 0; s < config.stages.size(); ++s) {
    for (int j = 0; j < config.stages[s].num_blocks; ++j) {
      m.stages[s].push_back(make_block(rng, config.stages[s].channels));
    }
    if (s + 1 < config.stages.size()) {
      Shortcut sc;
      sc.kind = config.shortcut;
      if (config.shortcut == ShortcutKind::conv1x1) {
        sc.conv = make_conv(rng, config.stages[s].channels, config.stages[s + 1].channels, 1,
                            /*stride=*/2, /*pad=*/0);
      }
      m.shortcuts.push_back(sc);
    }
  }
  int last_c = config.stages.back().channels;
  m.head.bn = make_bn(last_c);
  DenseLayer fc;
  fc.weight = he_normal(rng, {last_c, config.num_classes}, last_c);
  fc.bias = param_full({config.num_classes}, 0.0);
  m.head.fc = fc;
  return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

Tensor batchnorm_forward(Tape& tape, BatchNormState& state, const Tensor& x, Mode mode,
                         std::optional<int> step_index) {
  BnBank& bank = state.bank(step_index);
  ops::BatchNormArgs args;
  args.mode = mode;
  args.momentum = state.momentum;
  args.eps = state.eps;
  args.running_mean = &bank.running_mean;
  args.running_var = &bank.running_var;
  return ops::batchnorm(tape, x, bank.gamma, bank.beta, args);
}

Tensor block_output(Tape& tape, ResidualBlock& block, const Tensor& h, Mode mode,
                    std::optional<int> step_index) {
  Tensor x = batchnorm_forward(tape, block.bn1, h, mode, step_index);
  x = ops::relu(tape, x);
  x = ops::conv2d(tape, x, block.conv1.weight, block.conv1.bias, block.conv1.stride,
                  block.conv1.pad);
  x = batchnorm_forward(tape, block.bn2, x, mode, step_index);
  x = ops::relu(tape, x);
  x = ops::conv2d(tape, x, block.conv2.weight, block.conv2.bias, block.conv2.stride,
                  block.conv2.pad);
  return x;
}

namespace {

Tensor apply_shortcut(Tape& tape, Shortcut& sc, const Tensor& h, Mode mode) {
  (void)mode;
  switch (sc.kind) {
    case ShortcutKind::conv1x1:
      return ops::conv2d(tape, h, sc.conv.weight, sc.conv.bias, sc.conv.stride, sc.conv.pad);
    case ShortcutKind::pool:
      return ops::avg_pool2d(tape, h, 2, 2, 2, 2);
    case ShortcutKind::none:
      break;
  }
  throw std::logic_error("no shortcut between these stages");
}

void check_batch(const Model& m, const Tensor& batch) {
  if (batch.rank() != 4)
    throw std::invalid_argument("expected NCHW batch, got " + shape_str(batch.shape()));
  const Shape& in = m.config.input_shape;
  if (batch.size(1) != in[0] || batch.size(2) != in[1] || batch.size(3) != in[2])
    throw std::invalid_argument("batch " + shape_str(batch.shape()) +
                                " does not match configured input " + shape_str(in));
}

}  // namespace

ForwardTrace forward_collect(Tape& tape, Model& model, const Tensor& batch,
                             const CollectOptions& opts) {
  check_batch(model, batch);
  const int total = model.num_blocks();
  if (opts.drop_block >= total)
    throw std::invalid_argument("drop_block " + std::to_string(opts.drop_block) +
                                " out of range: model has " + std::to_string(total) + " blocks");
  ForwardTrace trace;
  Tensor cur = ops::conv2d(tape, batch, model.stem.weight, model.stem.bias, model.stem.stride,
                           model.stem.pad);
  if (opts.retain_h) cur.set_retain_grad(true);
  trace.h.push_back(cur);
  int gi = 0;
  for (size_t s = 0; s < model.stages.size(); ++s) {
    for (size_t j = 0; j < model.stages[s].size(); ++j, ++gi) {
      if (gi == opts.drop_block) {
        trace.F.push_back(Tensor());
      } else {
        Tensor f = block_output(tape, *model.stages[s][j], cur, opts.mode,
                                model.bn_step_for(static_cast<int>(s), static_cast<int>(j)));
        trace.F.push_back(f);
        cur = ops::add(tape, cur, f);
      }
      if (j + 1 == model.stages[s].size() && s + 1 < model.stages.size()) {
        cur = apply_shortcut(tape, model.shortcuts[s], cur, opts.mode);
      }
      if (opts.retain_h) cur.set_retain_grad(true);
      trace.h.push_back(cur);
    }
  }
  trace.logits = head_logits(tape, model, cur, opts.mode);
  return trace;
}

Tensor head_logits(Tape& tape, Model& model, const Tensor& h, Mode mode) {
  if (h.rank() != 4 || h.size(1) != model.config.stages.back().channels)
    throw std::invalid_argument("head expects a last-stage representation with " +
                                std::to_string(model.config.stages.back().channels) +
                                " channels, got " + shape_str(h.shape()));
  Tensor x = batchnorm_forward(tape, model.head.bn, h, mode);
  x = ops::relu(tape, x);
  x = ops::avg_pool2d(tape, x, static_cast<int>(h.size(2)), static_cast<int>(h.size(3)),
                      static_cast<int>(h.size(2)), static_cast<int>(h.size(3)));
  x = ops::flatten(tape, x);
  x = ops::matmul(tape, x, model.head.fc.weight);
  return ops::bias_add(tape, x, model.head.fc.bias);
}

Tensor forward_from(Tape& tape, Model& model, int after_block, const Tensor& h, Mode mode) {
  const int total = model.num_blocks();
  if (after_block < 0 || after_block >= total)
    throw std::out_of_range("block index " + std::to_string(after_block) + " out of range");
  auto [s0, j0] = model.stage_pos(after_block);
  Tensor cur = h;
  int s = s0, j = j0;
  // resume right after the residual add of `after_block`
  if (j + 1 == static_cast<int>(model.stages[s].size()) &&
      s + 1 < static_cast<int>(model.stages.size())) {
    cur = apply_shortcut(tape, model.shortcuts[s], cur, mode);
  }
  ++j;
  for (; s < static_cast<int>(model.stages.size()); ++s, j = 0) {
    for (; j < static_cast<int>(model.stages[s].size()); ++j) {
      Tensor f = block_output(tape, *model.stages[s][j], cur, mode, model.bn_step_for(s, j));
      cur = ops::add(tape, cur, f);
      if (j + 1 == static_cast<int>(model.stages[s].size()) &&
          s + 1 < static_cast<int>(model.stages.size())) {
        cur = apply_shortcut(tape, model.shortcuts[s], cur, mode);
      }
    }
  }
  return head_logits(tape, model, cur, mode);
}

Tensor forward_through(Tape& tape, Model& model, int from_block, const Tensor& h, Mode mode) {
  auto [s, j] = model.stage_pos(from_block);
  Tensor f = block_output(tape, *model.stages[s][j], h, mode, model.bn_step_for(s, j));
  Tensor cur = ops::add(tape, h, f);
  return forward_from(tape, model, from_block, cur, mode);
}

}  // namespace resprobe::nn
