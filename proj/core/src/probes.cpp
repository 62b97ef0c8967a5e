#include "resprobe/probes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace resprobe::probes {

namespace {

void check_block(const nn::Model& model, int block, const char* what) {
  if (block < 0 || block >= model.num_blocks())
    throw std::invalid_argument(std::string(what) + ": block " + std::to_string(block) +
                                " does not name a residual block (model has " +
                                std::to_string(model.num_blocks()) + ")");
}

int argmax_row(const double* row, int64_t k) {
  int arg = 0;
  for (int64_t j = 1; j < k; ++j)
    if (row[j] > row[arg]) arg = static_cast<int>(j);
  return arg;
}

struct CosineL2Acc {
  double cos_sum = 0.0;
  int cos_n = 0, cos_excluded = 0;
  double l2_sum = 0.0;
  int l2_n = 0, l2_excluded = 0;
};

// One eval forward + backward per batch; accumulates per-sample cosine and
// norm-ratio statistics for the requested blocks.
void accumulate_batch(nn::Model& model, const Tensor& batch, const std::vector<int>& labels,
                      const std::vector<int>& blocks, std::vector<CosineL2Acc>& acc) {
  Tape tape;
  tape.write_leaf_grads = false;
  auto trace = nn::forward_collect(tape, model, batch, {.mode = Mode::eval, .retain_h = true});
  LossValue loss = ops::softmax_cross_entropy(tape, trace.logits, labels);
  tape.backward(loss);

  int64_t n = batch.size(0);
  for (size_t bi = 0; bi < blocks.size(); ++bi) {
    int b = blocks[bi];
    const auto& h = trace.h[b];
    const auto& f = trace.F[b];
    const auto& g = h.grad();
    const auto& hv = h.data();
    const auto& fv = f.data();
    int64_t per = h.numel() / n;
    for (int64_t i = 0; i < n; ++i) {
      const double* fp = fv.data() + i * per;
      const double* gp = g.data() + i * per;
      const double* hp = hv.data() + i * per;
      double nf = 0.0, ng = 0.0, nh = 0.0, fg = 0.0;
      for (int64_t k = 0; k < per; ++k) {
        nf += fp[k] * fp[k];
        ng += gp[k] * gp[k];
        nh += hp[k] * hp[k];
        fg += fp[k] * gp[k];
      }
      nf = std::sqrt(nf);
      ng = std::sqrt(ng);
      nh = std::sqrt(nh);
      if (nf == 0.0 || ng == 0.0) {
        ++acc[bi].cos_excluded;
      } else {
        acc[bi].cos_sum += fg / (nf * ng);
        ++acc[bi].cos_n;
      }
      if (nh == 0.0) {
        ++acc[bi].l2_excluded;
      } else {
        acc[bi].l2_sum += nf / nh;
        ++acc[bi].l2_n;
      }
    }
  }
}

ProbeStat finish_cos(const CosineL2Acc& a, int block) {
  if (a.cos_n == 0)
    throw std::runtime_error("cosine_loss_probe: every sample excluded at block " +
                             std::to_string(block));
  return {a.cos_sum / a.cos_n, a.cos_excluded};
}

ProbeStat finish_l2(const CosineL2Acc& a, int block) {
  if (a.l2_n == 0)
    throw std::runtime_error("l2_ratio_probe: every sample excluded at block " +
                             std::to_string(block));
  return {a.l2_sum / a.l2_n, a.l2_excluded};
}

}  // namespace

ProbeStat batch_cosine(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("batch_cosine: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  int64_t n = a.size(0);
  int64_t per = a.numel() / n;
  const auto& av = a.data();
  const auto& bv = b.data();
  ProbeStat out;
  int kept = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double* ap = av.data() + i * per;
    const double* bp = bv.data() + i * per;
    double na = 0.0, nb = 0.0, ab = 0.0;
    for (int64_t k = 0; k < per; ++k) {
      na += ap[k] * ap[k];
      nb += bp[k] * bp[k];
      ab += ap[k] * bp[k];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na == 0.0 || nb == 0.0) {
      ++out.excluded;
      continue;
    }
    out.value += ab / (na * nb);
    ++kept;
  }
  if (kept == 0) throw std::runtime_error("batch_cosine: every sample excluded");
  out.value /= kept;
  return out;
}

ProbeStat batch_norm_ratio(const Tensor& num, const Tensor& den) {
  if (num.shape() != den.shape())
    throw std::invalid_argument("batch_norm_ratio: shape mismatch " + shape_str(num.shape()) +
                                " vs " + shape_str(den.shape()));
  int64_t n = num.size(0);
  int64_t per = num.numel() / n;
  const auto& nv = num.data();
  const auto& dv = den.data();
  ProbeStat out;
  int kept = 0;
  for (int64_t i = 0; i < n; ++i) {
    double a = 0.0, b = 0.0;
    for (int64_t k = 0; k < per; ++k) {
      a += nv[i * per + k] * nv[i * per + k];
      b += dv[i * per + k] * dv[i * per + k];
    }
    if (b == 0.0) {
      ++out.excluded;
      continue;
    }
    out.value += std::sqrt(a) / std::sqrt(b);
    ++kept;
  }
  if (kept == 0) throw std::runtime_error("batch_norm_ratio: every sample excluded");
  out.value /= kept;
  return out;
}

ProbeStat cosine_loss_probe(nn::Model& model, const Tensor& batch, const std::vector<int>& labels,
                            int block) {
  check_block(model, block, "cosine_loss_probe");
  std::vector<CosineL2Acc> acc(1);
  accumulate_batch(model, batch, labels, {block}, acc);
  return finish_cos(acc[0], block);
}

ProbeStat l2_ratio_probe(nn::Model& model, const Tensor& batch, int block) {
  check_block(model, block, "l2_ratio_probe");
  // the ratio needs no labels; the gradient side of the shared pass is
  // simply unused
  std::vector<int> labels(static_cast<size_t>(batch.size(0)), 0);
  std::vector<CosineL2Acc> acc(1);
  accumulate_batch(model, batch, labels, {block}, acc);
  return finish_l2(acc[0], block);
}

SweepResult cosine_l2_sweep(nn::Model& model, const data::Dataset& dataset, int batch_size) {
  dataset.validate();
  const int nb = model.num_blocks();
  std::vector<int> blocks(nb);
  for (int b = 0; b < nb; ++b) blocks[b] = b;
  std::vector<CosineL2Acc> acc(static_cast<size_t>(nb));
  for (int64_t start = 0; start < dataset.size(); start += batch_size) {
    int64_t end = std::min<int64_t>(dataset.size(), start + batch_size);
    std::vector<int> idx(static_cast<size_t>(end - start));
    for (int64_t i = start; i < end; ++i) idx[i - start] = static_cast<int>(i);
    auto [batch, labels] = data::gather(dataset, idx);
    accumulate_batch(model, batch, labels, blocks, acc);
  }
  SweepResult out;
  for (int b = 0; b < nb; ++b) {
    out.cosine.push_back(finish_cos(acc[b], b));
    out.l2_ratio.push_back(finish_l2(acc[b], b));
  }
  return out;
}

double drop_block_eval(nn::Model& model, int block, const data::Dataset& dataset, int batch_size) {
  check_block(model, block, "drop_block_eval");
  dataset.validate();
  int64_t correct = 0;
  for (int64_t start = 0; start < dataset.size(); start += batch_size) {
    int64_t end = std::min<int64_t>(dataset.size(), start + batch_size);
    std::vector<int> idx(static_cast<size_t>(end - start));
    for (int64_t i = start; i < end; ++i) idx[i - start] = static_cast<int>(i);
    auto [batch, labels] = data::gather(dataset, idx);
    Tape tape;
    tape.write_leaf_grads = false;
    auto trace =
        nn::forward_collect(tape, model, batch, {.mode = Mode::eval, .drop_block = block});
    const auto& lv = trace.logits.data();
    int64_t k = trace.logits.size(1);
    for (size_t i = 0; i < labels.size(); ++i)
      if (argmax_row(lv.data() + static_cast<int64_t>(i) * k, k) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

double intermediate_accuracy(nn::Model& model, int block, const data::Dataset& dataset,
                             int batch_size) {
  check_block(model, block, "intermediate_accuracy");
  if (model.stage_of_block(block) != model.last_stage())
    throw std::invalid_argument(
        "intermediate_accuracy: block " + std::to_string(block) +
        " is outside the final stage; its representation does not fit the classifier head");
  dataset.validate();
  int64_t correct = 0;
  for (int64_t start = 0; start < dataset.size(); start += batch_size) {
    int64_t end = std::min<int64_t>(dataset.size(), start + batch_size);
    std::vector<int> idx(static_cast<size_t>(end - start));
    for (int64_t i = start; i < end; ++i) idx[i - start] = static_cast<int>(i);
    auto [batch, labels] = data::gather(dataset, idx);
    Tape tape;
    tape.write_leaf_grads = false;
    auto trace = nn::forward_collect(tape, model, batch, {.mode = Mode::eval});
    Tensor logits = nn::head_logits(tape, model, trace.h[block + 1], Mode::eval);
    const auto& lv = logits.data();
    int64_t k = logits.size(1);
    for (size_t i = 0; i < labels.size(); ++i)
      if (argmax_row(lv.data() + static_cast<int64_t>(i) * k, k) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

BorderlineReport borderline_from_probs(const std::vector<double>& probs,
                                       const std::vector<int>& labels, int classes, double tau) {
  if (tau <= 0.0 || tau > 0.5)
    throw std::invalid_argument("borderline tau must lie in (0, 0.5], got " + std::to_string(tau));
  if (probs.size() != labels.size() * static_cast<size_t>(classes))
    throw std::invalid_argument("borderline_from_probs: probability matrix does not match labels");
  BorderlineReport rep;
  rep.tau = tau;
  for (size_t i = 0; i < labels.size(); ++i) {
    const double* p = probs.data() + i * static_cast<size_t>(classes);
    int y = labels[i];
    double runner_up = -1.0;
    for (int j = 0; j < classes; ++j)
      if (j != y) runner_up = std::max(runner_up, p[j]);
    double margin = p[y] - runner_up;
    int sample = static_cast<int>(i);
    rep.all.push_back(sample);
    if (std::fabs(margin) < 2.0 * tau) rep.borderline.push_back(sample);
    if (margin > 0.0) rep.correct.push_back(sample);
  }
  return rep;
}

BorderlineReport borderline_split(nn::Model& model, const data::Dataset& dataset, double tau,
                                  int batch_size) {
  if (tau <= 0.0 || tau > 0.5)
    throw std::invalid_argument("borderline tau must lie in (0, 0.5], got " + std::to_string(tau));
  dataset.validate();
  std::vector<double> probs;
  probs.reserve(static_cast<size_t>(dataset.size()) * dataset.class_count);
  for (int64_t start = 0; start < dataset.size(); start += batch_size) {
    int64_t end = std::min<int64_t>(dataset.size(), start + batch_size);
    std::vector<int> idx(static_cast<size_t>(end - start));
    for (int64_t i = start; i < end; ++i) idx[i - start] = static_cast<int>(i);
    auto [batch, labels] = data::gather(dataset, idx);
    Tape tape;
    tape.write_leaf_grads = false;
    auto trace = nn::forward_collect(tape, model, batch, {.mode = Mode::eval});
    auto rows = ops::softmax_rows(trace.logits);
    probs.insert(probs.end(), rows.begin(), rows.end());
  }
  return borderline_from_probs(probs, dataset.labels, dataset.class_count, tau);
}

GroupMetricsTable group_metrics(nn::Model& model, const BorderlineReport& groups, int first_block,
                                int last_block, const data::Dataset& dataset, int batch_size) {
  check_block(model, first_block, "group_metrics");
  check_block(model, last_block, "group_metrics");
  if (first_block > last_block) throw std::invalid_argument("group_metrics: empty block range");
  if (model.stage_of_block(first_block) != model.last_stage())
    throw std::invalid_argument("group_metrics: block range must lie in the final stage");
  dataset.validate();

  GroupMetricsTable table;
  table.group_names = {"borderline", "correct", "all"};
  const std::vector<const std::vector<int>*> members = {&groups.borderline, &groups.correct,
                                                        &groups.all};
  for (int b = first_block; b <= last_block; ++b) table.blocks.push_back(b);

  // membership flags per group
  std::vector<std::vector<uint8_t>> in_group(3, std::vector<uint8_t>(dataset.size(), 0));
  for (int g = 0; g < 3; ++g)
    for (int s : *members[g]) in_group[g][s] = 1;

  size_t depths = table.blocks.size();
  std::vector<std::vector<GroupMetrics>> sums(3, std::vector<GroupMetrics>(depths));

  for (int64_t start = 0; start < dataset.size(); start += batch_size) {
    int64_t end = std::min<int64_t>(dataset.size(), start + batch_size);
    std::vector<int> idx(static_cast<size_t>(end - start));
    for (int64_t i = start; i < end; ++i) idx[i - start] = static_cast<int>(i);
    auto [batch, labels] = data::gather(dataset, idx);
    Tape tape;
    tape.write_leaf_grads = false;
    auto trace = nn::forward_collect(tape, model, batch, {.mode = Mode::eval});
    for (size_t d = 0; d < depths; ++d) {
      Tensor logits = nn::head_logits(tape, model, trace.h[table.blocks[d] + 1], Mode::eval);
      auto probs = ops::softmax_rows(logits);
      int64_t k = logits.size(1);
      for (size_t i = 0; i < labels.size(); ++i) {
        const double* p = probs.data() + static_cast<int64_t>(i) * k;
        int y = labels[i];
        double loss = -std::log(std::max(p[y], 1e-300));
        double entropy = 0.0;
        for (int64_t j = 0; j < k; ++j)
          if (p[j] > 0.0) entropy -= p[j] * std::log(p[j]);
        bool hit = argmax_row(p, k) == y;
        int sample = static_cast<int>(start + static_cast<int64_t>(i));
        for (int g = 0; g < 3; ++g) {
          if (!in_group[g][sample]) continue;
          auto& m = sums[g][d];
          m.loss += loss;
          m.entropy += entropy;
          m.accuracy += hit ? 1.0 : 0.0;
          ++m.count;
        }
      }
    }
  }

  table.values.assign(3, std::vector<std::optional<GroupMetrics>>(depths));
  for (int g = 0; g < 3; ++g)
    for (size_t d = 0; d < depths; ++d) {
      if (sums[g][d].count == 0) continue;  // empty group: absent, not zero
      GroupMetrics m = sums[g][d];
      m.loss /= static_cast<double>(m.count);
      m.entropy /= static_cast<double>(m.count);
      m.accuracy /= static_cast<double>(m.count);
      table.values[g][d] = m;
    }
  return table;
}

GradNormReport grad_norm_ratio(nn::Model& model, const Tensor& batch,
                               const std::vector<int>& labels) {
  if (model.stages.size() < 2)
    throw std::invalid_argument("grad_norm_ratio needs at least two stages");
  Tape tape;
  tape.write_leaf_grads = false;
  auto trace = nn::forward_collect(tape, model, batch, {.mode = Mode::eval, .retain_h = true});
  LossValue loss = ops::softmax_cross_entropy(tape, trace.logits, labels);
  tape.backward(loss);

  int h_first = 0;  // input to the first stage's first block
  int h_last = model.first_block_of_stage(model.last_stage());
  GradNormReport rep;
  rep.grad_norm_first = l2_norm(trace.h[h_first].grad());
  rep.grad_norm_last = l2_norm(trace.h[h_last].grad());
  if (rep.grad_norm_last == 0.0) {
    rep.infinite = true;
    rep.ratio = std::numeric_limits<double>::infinity();
  } else {
    rep.ratio = rep.grad_norm_first / rep.grad_norm_last;
  }
  int64_t n = batch.size(0);
  for (const auto& h : trace.h) {
    const auto& v = h.data();
    int64_t per = h.numel() / n;
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      double s = 0.0;
      const double* p = v.data() + i * per;
      for (int64_t k = 0; k < per; ++k) s += p[k] * p[k];
      acc += std::sqrt(s);
    }
    rep.activation_norms.push_back(acc / static_cast<double>(n));
  }
  return rep;
}

FirstLayerCheck first_layer_gradient_step_check(nn::Model& model, const Tensor& sample, int label,
                                                double eta) {
  if (sample.rank() != 4 || sample.size(0) != 1)
    throw std::invalid_argument(
        "first_layer_gradient_step_check holds per sample: pass a batch of exactly one");
  // a conv stem acts as the dense map h_o = Wx + b only when its output
  // has a single spatial position
  if (model.config.input_shape[1] != 1 || model.config.input_shape[2] != 1)
    throw std::invalid_argument(
        "first_layer_gradient_step_check requires a dense-equivalent stem (1x1 spatial input)");

  auto params = model.parameters();
  std::vector<double> w_before = model.stem.weight.data();
  std::vector<double> b_before = model.stem.bias.data();

  Tape tape;
  auto trace = nn::forward_collect(tape, model, sample, {.mode = Mode::eval, .retain_h = true});
  std::vector<double> h_before = trace.h[0].data();
  LossValue loss =
      ops::softmax_cross_entropy(tape, trace.logits, std::vector<int>{label});
  tape.backward(loss);

  const auto& g_h = trace.h[0].grad();  // dL/dh_o; batch of one, no mean factor
  const auto& g_w = model.stem.weight.grad();
  const auto& g_b = model.stem.bias.grad();

  // one plain SGD step on the stem only
  auto& wv = model.stem.weight.data();
  auto& bv = model.stem.bias.data();
  for (size_t k = 0; k < wv.size(); ++k) wv[k] -= eta * g_w[k];
  for (size_t k = 0; k < bv.size(); ++k) bv[k] -= eta * g_b[k];

  Tape after_tape;
  after_tape.write_leaf_grads = false;
  Tensor h_after = ops::conv2d(after_tape, sample, model.stem.weight, model.stem.bias,
                               model.stem.stride, model.stem.pad);

  FirstLayerCheck out;
  double x_sq = 0.0;
  for (double v : sample.data()) x_sq += v * v;
  const auto& ha = h_after.data();
  out.delta_h.resize(h_before.size());
  out.predicted.resize(h_before.size());
  double err = 0.0, pred_norm = 0.0;
  for (size_t k = 0; k < h_before.size(); ++k) {
    out.delta_h[k] = ha[k] - h_before[k];
    out.predicted[k] = -eta * (x_sq + 1.0) * g_h[k];
    double d = out.delta_h[k] - out.predicted[k];
    err += d * d;
    pred_norm += out.predicted[k] * out.predicted[k];
  }
  out.rel_error = pred_norm > 0.0 ? std::sqrt(err / pred_norm)
                                  : (err > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);

  // restore the model exactly
  model.stem.weight.data() = w_before;
  model.stem.bias.data() = b_before;
  for (auto& p : params) p.tensor.clear_grad();
  return out;
}

// ---------------------------------------------------------------------------
// Taylor residuals
// ---------------------------------------------------------------------------

namespace {

constexpr uint64_t kFnvOffset = 1469598103934665603ull;
constexpr uint64_t kFnvPrime = 1099511628211ull;

// Per-sample hash of every relu input's sign pattern along the forward.
struct SignObserver {
  int64_t batch = 0;
  std::vector<uint64_t> sig;
  void reset(int64_t n) {
    batch = n;
    sig.assign(static_cast<size_t>(n), kFnvOffset);
  }
  void operator()(const Tensor& x) {
    int64_t per = x.numel() / batch;
    const auto& v = x.data();
    for (int64_t i = 0; i < batch; ++i) {
      uint64_t h = sig[i];
      const double* p = v.data() + i * per;
      for (int64_t k = 0; k < per; ++k) {
        h ^= p[k] > 0.0 ? 1u : 0u;
        h *= kFnvPrime;
      }
      sig[i] = h;
    }
  }
};

}  // namespace

TaylorResiduals taylor_residuals(nn::Model& model, const Tensor& batch,
                                 const std::vector<int>& labels, int block,
                                 const std::vector<double>& scales, TaylorReadout readout) {
  check_block(model, block, "taylor_residuals");
  const int64_t n = batch.size(0);

  Tape fw;
  fw.write_leaf_grads = false;
  auto trace = nn::forward_collect(fw, model, batch, {.mode = Mode::eval});
  Tensor h = trace.h[block].clone();
  Tensor f = trace.F[block].clone();

  auto read_loss = [&](Tape& tape, const Tensor& logits) {
    if (readout == TaylorReadout::cross_entropy)
      return ops::softmax_cross_entropy(tape, logits, labels);
    // per-sample sum of logits, a linear readout for exactness checks
    LossValue lv;
    int64_t k = logits.size(1);
    lv.per_sample.resize(static_cast<size_t>(n));
    const auto& d = logits.data();
    for (int64_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < k; ++j) s += d[i * k + j];
      lv.per_sample[i] = s;
    }
    Tensor flat = ops::reshape(tape, logits, {1, logits.numel()});
    Tensor ones = Tensor::full({logits.numel(), 1}, 1.0 / static_cast<double>(n));
    lv.total = ops::matmul(tape, flat, ones);
    return lv;
  };

  // gradient of the downstream map at h (per-sample losses need the mean
  // factor undone)
  Tensor h_leaf = h.clone();
  h_leaf.set_retain_grad(true);
  Tape gt;
  gt.write_leaf_grads = false;
  Tensor logits = nn::forward_from(gt, model, block, h_leaf, Mode::eval);
  LossValue l0 = read_loss(gt, logits);
  gt.backward(l0);
  std::vector<double> grad = h_leaf.grad();
  for (double& v : grad) v *= static_cast<double>(n);

  auto downstream = [&](const Tensor& point, SignObserver* obs) {
    Tape tape;
    tape.write_leaf_grads = false;
    if (obs) {
      obs->reset(n);
      tape.on_relu = [obs](const Tensor& x) { (*obs)(x); };
    }
    Tensor lg = nn::forward_from(tape, model, block, point, Mode::eval);
    LossValue lv = read_loss(tape, lg);
    if (!std::isfinite(lv.total.item()))
      throw std::runtime_error("taylor_residuals: non-finite downstream loss");
    return lv.per_sample;
  };

  SignObserver base_obs;
  std::vector<double> base = downstream(h, &base_obs);

  const int64_t per = h.numel() / n;
  const auto& hv = h.data();
  const auto& fv = f.data();
  std::vector<double> fdotg(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    const double* fp = fv.data() + i * per;
    const double* gp = grad.data() + i * per;
    double acc = 0.0;
    for (int64_t k = 0; k < per; ++k) acc += fp[k] * gp[k];
    fdotg[i] = acc;
  }

  TaylorResiduals out;
  out.base_loss = base;
  out.residuals.assign(static_cast<size_t>(n), std::vector<double>(scales.size(), 0.0));
  out.kink_free.assign(static_cast<size_t>(n), true);

  double max_scale = 0.0;
  for (double s : scales) max_scale = std::max(max_scale, std::fabs(s));

  for (size_t si = 0; si < scales.size(); ++si) {
    double s = scales[si];
    Tensor point = Tensor::zeros(h.shape());
    auto& pv = point.data();
    for (size_t k = 0; k < pv.size(); ++k) pv[k] = hv[k] + s * fv[k];
    bool at_max = std::fabs(s) == max_scale && s != 0.0;
    SignObserver obs;
    std::vector<double> pert = downstream(point, at_max ? &obs : nullptr);
    for (int64_t i = 0; i < n; ++i) {
      out.residuals[i][si] = std::fabs(pert[i] - base[i] - s * fdotg[i]);
      if (at_max && obs.sig[i] != base_obs.sig[i]) out.kink_free[i] = false;
    }
  }
  return out;
}

int TaylorReport::n_converged(double min_slope) const {
  int n = 0;
  for (const auto& s : samples)
    if (s.kink_free && (s.degenerate || s.slope >= min_slope)) ++n;
  return n;
}

TaylorReport taylor_residual_check(nn::Model& model, const Tensor& batch,
                                   const std::vector<int>& labels, int block) {
  const std::vector<double> scales = {1.0, 0.5, 0.25, 0.125};
  auto res = taylor_residuals(model, batch, labels, block, scales);

  TaylorReport rep;
  for (size_t i = 0; i < res.residuals.size(); ++i) {
    TaylorReport::Sample s;
    s.kink_free = res.kink_free[i];
    double noise = 1e-13 * std::max(1.0, std::fabs(res.base_loss[i]));
    double mx = 0.0;
    for (double r : res.residuals[i]) mx = std::max(mx, r);
    if (mx < noise) {
      s.degenerate = true;
      s.slope = std::numeric_limits<double>::infinity();
    } else {
      // least-squares slope of log R against log s
      double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
      int m = 0;
      for (size_t k = 0; k < scales.size(); ++k) {
        double r = std::max(res.residuals[i][k], 1e-300);
        double x = std::log(scales[k]);
        double y = std::log(r);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++m;
      }
      s.slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    }
    if (s.kink_free) {
      ++rep.n_kink_free;
      if (!s.degenerate) ++rep.n_fitted;
    }
    rep.samples.push_back(s);
  }
  return rep;
}

}  // namespace resprobe::probes
