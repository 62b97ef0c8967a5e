#include "resprobe/share_unroll.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace resprobe::share {

namespace {

nn::BnBank make_bank(int channels, double gamma_init) {
  nn::BnBank b;
  b.gamma = Tensor::full({channels}, gamma_init);
  b.beta = Tensor::zeros({channels});
  b.gamma.set_requires_grad(true);
  b.beta.set_requires_grad(true);
  b.running_mean.assign(static_cast<size_t>(channels), 0.0);
  b.running_var.assign(static_cast<size_t>(channels), 1.0);
  return b;
}

void attach_step_banks(nn::BatchNormState& bn, const SharingSpec& spec, int applications) {
  int channels = static_cast<int>(bn.channels());
  bn.step_banks.clear();
  if (spec.bn_mode == BnShareMode::naive) return;  // one bank for every application
  for (int k = 0; k < applications; ++k) {
    if (spec.bn_mode == BnShareMode::unshared_stats && k > 0) {
      // shared affine, fresh statistics
      nn::BnBank b;
      b.gamma = bn.step_banks[0].gamma;
      b.beta = bn.step_banks[0].beta;
      b.running_mean.assign(static_cast<size_t>(channels), 0.0);
      b.running_var.assign(static_cast<size_t>(channels), 1.0);
      bn.step_banks.push_back(std::move(b));
    } else {
      bn.step_banks.push_back(make_bank(channels, spec.gamma_init_shared));
    }
  }
}

}  // namespace

Model build_shared_model(const ArchitectureConfig& config, const SharingSpec& spec,
                         uint64_t seed) {
  config.validate();
  spec.validate();
  for (const auto& st : config.stages) {
    if (spec.share_from_block > st.num_blocks)
      throw std::invalid_argument("share_from_block " + std::to_string(spec.share_from_block) +
                                  " is beyond a stage of " + std::to_string(st.num_blocks) +
                                  " blocks");
  }
  Model m = nn::build_model(config, seed);
  m.sharing = spec;
  for (auto& stage : m.stages) {
    int nb = static_cast<int>(stage.size());
    int applications = nb - spec.share_from_block;
    if (applications <= 0) continue;  // degenerate: nothing shared in this stage
    auto shared = stage[spec.share_from_block];
    attach_step_banks(shared->bn1, spec, applications);
    attach_step_banks(shared->bn2, spec, applications);
    for (int j = spec.share_from_block + 1; j < nb; ++j) stage[j] = shared;
  }
  return m;
}

int64_t expected_parameter_count(const ArchitectureConfig& config, const SharingSpec* sharing) {
  config.validate();
  auto conv = [](int64_t in, int64_t out, int64_t k) { return k * k * in * out + out; };
  int64_t total = conv(config.input_shape[0], config.stem_channels, 3);
  for (size_t s = 0; s < config.stages.size(); ++s) {
    int64_t c = config.stages[s].channels;
    int nb = config.stages[s].num_blocks;
    int unique = nb;
    int apps = 0;
    if (sharing && sharing->share_from_block < nb) {
      unique = sharing->share_from_block + 1;
      apps = nb - sharing->share_from_block;
    }
    total += unique * 2 * conv(c, c, 3);  // two convs per unique block
    // gamma/beta pairs: every unique block has two batch norms; the shared
    // block's pair count depends on the sharing mode
    int64_t bn_pairs = 2 * unique;
    if (apps > 0 && sharing->bn_mode == BnShareMode::ubn_full) bn_pairs += 2 * (apps - 1);
    total += bn_pairs * 2 * c;
    if (s + 1 < config.stages.size() && config.shortcut == nn::ShortcutKind::conv1x1)
      total += conv(c, config.stages[s + 1].channels, 1);
  }
  int64_t last_c = config.stages.back().channels;
  total += 2 * last_c;                                        // head batch norm
  total += last_c * config.num_classes + config.num_classes;  // classifier
  return total;
}

// ---------------------------------------------------------------------------
// Unrolling
// ---------------------------------------------------------------------------

void UnrollSpec::validate() const {
  if (extra_steps < 0) throw std::invalid_argument("extra_steps must be nonnegative");
  if (alpha <= 0.0) throw std::invalid_argument("alpha must be positive");
}

namespace {

// The affine parameters the final trained application of the last block
// used; fresh unroll banks keep these and own only statistics.
std::pair<const nn::BnBank*, const nn::BnBank*> final_application_banks(Model& m) {
  auto& last_stage = m.stages.back();
  int pos = static_cast<int>(last_stage.size()) - 1;
  nn::ResidualBlock& blk = *last_stage[pos];
  auto step = m.bn_step_for(m.last_stage(), pos);
  return {&blk.bn1.bank(step), &blk.bn2.bank(step)};
}

Tensor apply_block_with_banks(Tape& tape, nn::ResidualBlock& blk, const Tensor& h, Mode mode,
                              nn::BnBank& b1, nn::BnBank& b2, double momentum, double eps) {
  ops::BatchNormArgs a1{mode, momentum, eps, &b1.running_mean, &b1.running_var};
  Tensor x = ops::batchnorm(tape, h, b1.gamma, b1.beta, a1);
  x = ops::relu(tape, x);
  x = ops::conv2d(tape, x, blk.conv1.weight, blk.conv1.bias, blk.conv1.stride, blk.conv1.pad);
  ops::BatchNormArgs a2{mode, momentum, eps, &b2.running_mean, &b2.running_var};
  x = ops::batchnorm(tape, x, b2.gamma, b2.beta, a2);
  x = ops::relu(tape, x);
  x = ops::conv2d(tape, x, blk.conv2.weight, blk.conv2.bias, blk.conv2.stride, blk.conv2.pad);
  return x;
}

}  // namespace

UnrolledModel unroll_last_block(Model& model, const UnrollSpec& spec,
                                const data::Dataset& calibration, int batch_size) {
  spec.validate();
  if (model.stages.empty() || model.stages.back().empty())
    throw std::invalid_argument("model has no last block to unroll");
  UnrolledModel um;
  um.base = &model;
  um.spec = spec;
  if (spec.extra_steps == 0) return um;

  auto [trained_b1, trained_b2] = final_application_banks(model);
  int channels = model.config.stages.back().channels;
  for (int t = 0; t < spec.extra_steps; ++t) {
    nn::BnBank b1, b2;
    b1.gamma = trained_b1->gamma;
    b1.beta = trained_b1->beta;
    b1.running_mean.assign(static_cast<size_t>(channels), 0.0);
    b1.running_var.assign(static_cast<size_t>(channels), 1.0);
    b2.gamma = trained_b2->gamma;
    b2.beta = trained_b2->beta;
    b2.running_mean.assign(static_cast<size_t>(channels), 0.0);
    b2.running_var.assign(static_cast<size_t>(channels), 1.0);
    um.bn1_banks.push_back(std::move(b1));
    um.bn2_banks.push_back(std::move(b2));
  }

  // One pass over the calibration split: each step normalizes by batch
  // statistics while its bank accumulates their running average
  // (momentum 1/k for the k-th batch); afterwards the banks are frozen.
  calibration.validate();
  nn::ResidualBlock& blk = *model.stages.back().back();
  double eps = blk.bn1.eps;
  int64_t n_batches = calibration.size() / batch_size;
  if (n_batches == 0)
    throw std::invalid_argument("calibration split smaller than one batch");
  std::vector<int> idx(static_cast<size_t>(batch_size));
  for (int64_t b = 0; b < n_batches; ++b) {
    for (int i = 0; i < batch_size; ++i) idx[i] = static_cast<int>(b * batch_size + i);
    auto [batch, labels] = data::gather(calibration, idx);
    (void)labels;
    Tape tape;
    tape.write_leaf_grads = false;
    auto trace = nn::forward_collect(tape, model, batch, {.mode = Mode::eval});
    Tensor h = trace.h.back();
    double momentum = 1.0 / static_cast<double>(b + 1);
    for (int t = 0; t < spec.extra_steps; ++t) {
      Tensor f = apply_block_with_banks(tape, blk, h, Mode::train, um.bn1_banks[t],
                                        um.bn2_banks[t], momentum, eps);
      h = ops::add(tape, h, ops::scale(tape, f, spec.alpha));
    }
  }
  return um;
}

UnrollTrace unrolled_forward(Tape& tape, UnrolledModel& um, const Tensor& batch, bool retain) {
  Model& model = *um.base;
  auto trace = nn::forward_collect(tape, model, batch, {.mode = Mode::eval, .retain_h = retain});
  UnrollTrace out;
  Tensor h = trace.h.back();
  out.h.push_back(h);
  nn::ResidualBlock& blk = *model.stages.back().back();
  for (int t = 0; t < um.spec.extra_steps; ++t) {
    Tensor f = apply_block_with_banks(tape, blk, h, Mode::eval, um.bn1_banks[t], um.bn2_banks[t],
                                      blk.bn1.momentum, blk.bn1.eps);
    out.F.push_back(f);
    h = ops::add(tape, h, ops::scale(tape, f, um.spec.alpha));
    if (retain) h.set_retain_grad(true);
    out.h.push_back(h);
  }
  out.logits = nn::head_logits(tape, model, h, Mode::eval);
  return out;
}

// ---------------------------------------------------------------------------
// Activation norms
// ---------------------------------------------------------------------------

double span_growth(const std::vector<double>& h_norms, int from_h, int to_h) {
  if (from_h < 0 || to_h <= from_h || to_h >= static_cast<int>(h_norms.size()))
    throw std::invalid_argument("bad span [" + std::to_string(from_h) + ", " +
                                std::to_string(to_h) + "]");
  double a = h_norms[from_h], b = h_norms[to_h];
  if (a <= 0.0) return std::numeric_limits<double>::infinity();
  return std::pow(b / a, 1.0 / static_cast<double>(to_h - from_h));
}

ExplosionReport activation_explosion_probe(Model& model, const Tensor& batch, Mode mode) {
  // train-statistics mode would fold batch statistics into the running
  // buffers; snapshot and restore so the probe stays read-only.
  std::vector<std::vector<double>> snapshot;
  std::vector<nn::Model::StateRef> refs;
  if (mode == Mode::train) {
    refs = model.state_refs();
    for (auto& r : refs) snapshot.push_back(*r.values);
  }

  Tape tape;
  tape.write_leaf_grads = false;
  auto trace = nn::forward_collect(tape, model, batch, {.mode = mode});

  ExplosionReport rep;
  int64_t n = batch.size(0);
  for (const auto& h : trace.h) {
    int64_t per = h.numel() / n;
    const auto& v = h.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      double s = 0.0;
      const double* p = v.data() + i * per;
      for (int64_t k = 0; k < per; ++k) s += p[k] * p[k];
      acc += std::sqrt(s);
    }
    rep.h_norms.push_back(acc / static_cast<double>(n));
  }

  // geometric per-block growth inside each stage, stopping before the
  // boundary shortcut so the factor reflects residual adds only
  rep.max_stage_growth = 0.0;
  for (size_t s = 0; s < model.stages.size(); ++s) {
    int fs = model.first_block_of_stage(static_cast<int>(s));
    int nb = static_cast<int>(model.stages[s].size());
    int last = (s + 1 == model.stages.size()) ? fs + nb : fs + nb - 1;
    if (last <= fs) continue;
    rep.max_stage_growth = std::max(rep.max_stage_growth, span_growth(rep.h_norms, fs, last));
  }
  rep.shared_span_growth = 1.0;
  if (model.sharing) {
    int sl = model.last_stage();
    int fs = model.first_block_of_stage(sl);
    int nb = static_cast<int>(model.stages[sl].size());
    if (model.sharing->share_from_block < nb)
      rep.shared_span_growth =
          span_growth(rep.h_norms, fs + model.sharing->share_from_block, fs + nb);
  }

  if (mode == Mode::train) {
    for (size_t i = 0; i < refs.size(); ++i) *refs[i].values = snapshot[i];
  }
  return rep;
}

}  // namespace resprobe::share
