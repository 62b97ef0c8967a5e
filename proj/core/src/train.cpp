#include "resprobe/train.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace resprobe::train {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0, 1)");
  if (lr_schedule.empty()) throw std::invalid_argument("lr_schedule must not be empty");
  int prev = -1;
  for (size_t i = 0; i < lr_schedule.size(); ++i) {
    const auto& p = lr_schedule[i];
    if (p.lr <= 0.0) throw std::invalid_argument("learning rates must be positive");
    if (p.until_epoch == -1) {
      if (i + 1 != lr_schedule.size())
        throw std::invalid_argument("open-ended schedule entry must come last");
    } else {
      if (p.until_epoch <= prev)
        throw std::invalid_argument("schedule epochs must be strictly increasing");
      prev = p.until_epoch;
    }
  }
  if (augment.translate_pixels < 0)
    throw std::invalid_argument("translate_pixels must be nonnegative");
}

double lr_at(const std::vector<LrPoint>& schedule, int epoch) {
  for (const auto& p : schedule) {
    if (p.until_epoch == -1 || epoch < p.until_epoch) return p.lr;
  }
  return schedule.back().lr;
}

OptimizerState OptimizerState::for_model(const nn::Model& model) {
  OptimizerState s;
  for (const auto& p : model.parameters())
    s.velocity.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
  return s;
}

void sgd_momentum_step(std::vector<nn::Model::NamedTensor>& params, OptimizerState& state,
                       double lr, double momentum) {
  if (lr <= 0.0) throw std::invalid_argument("learning rate must be positive");
  if (params.size() != state.velocity.size())
    throw std::invalid_argument("optimizer state does not match parameter list");
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.tensor.has_grad()) continue;  // parameter unused in this step
    const auto& g = p.tensor.grad();
    auto& v = state.velocity[i];
    auto& w = p.tensor.data();
    if (v.size() != g.size())
      throw std::invalid_argument("velocity shape mismatch for " + p.name);
    for (size_t k = 0; k < g.size(); ++k) {
      if (!std::isfinite(g[k]))
        throw std::runtime_error("non-finite gradient in parameter '" + p.name + "'");
      v[k] = momentum * v[k] + g[k];
      w[k] -= lr * v[k];
    }
    p.tensor.clear_grad();
  }
}

void augment_image(std::vector<double>& img, int64_t c, int64_t h, int64_t w, const Augment& aug,
                   Rng& rng) {
  if (aug.flip && rng.coin()) {
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < h; ++y) {
        double* row = img.data() + (ch * h + y) * w;
        std::reverse(row, row + w);
      }
  }
  if (aug.translate_pixels > 0) {
    int dy = rng.range(-aug.translate_pixels, aug.translate_pixels);
    int dx = rng.range(-aug.translate_pixels, aug.translate_pixels);
    if (dy != 0 || dx != 0) {
      std::vector<double> shifted(img.size(), 0.0);
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < h; ++y) {
          int64_t sy = y - dy;
          if (sy < 0 || sy >= h) continue;
          for (int64_t x = 0; x < w; ++x) {
            int64_t sx = x - dx;
            if (sx < 0 || sx >= w) continue;
            shifted[(ch * h + y) * w + x] = img[(ch * h + sy) * w + sx];
          }
        }
      img = std::move(shifted);
    }
  }
}

EpochMetrics train_epoch(nn::Model& model, const data::Dataset& dataset, const TrainConfig& cfg,
                         int epoch, OptimizerState& state) {
  cfg.validate();
  dataset.validate();
  if (dataset.size() == 0) throw std::invalid_argument("cannot train on an empty dataset");

  auto params = model.parameters();
  const double lr = lr_at(cfg.lr_schedule, epoch);
  const int64_t c = dataset.images.size(1), h = dataset.images.size(2), w = dataset.images.size(3);
  const int64_t sample_len = c * h * w;

  Rng shuffle_rng = Rng::derive(cfg.seed, static_cast<uint64_t>(epoch), 0x5151);
  auto batches = data::batch_indices(dataset.size(), cfg.batch_size, shuffle_rng);

  double loss_sum = 0.0;
  int64_t correct = 0, seen = 0;
  std::vector<double> img(static_cast<size_t>(sample_len));
  for (const auto& batch_idx : batches) {
    Tensor batch = Tensor::zeros({static_cast<int64_t>(batch_idx.size()), c, h, w});
    std::vector<int> labels(batch_idx.size());
    auto& bv = batch.data();
    const auto& src = dataset.images.data();
    for (size_t i = 0; i < batch_idx.size(); ++i) {
      int64_t row = batch_idx[i];
      std::copy(src.begin() + row * sample_len, src.begin() + (row + 1) * sample_len, img.begin());
      Rng aug_rng = Rng::derive(cfg.seed, static_cast<uint64_t>(epoch),
                                static_cast<uint64_t>(row) + 0x100);
      augment_image(img, c, h, w, cfg.augment, aug_rng);
      std::copy(img.begin(), img.end(), bv.begin() + static_cast<int64_t>(i) * sample_len);
      labels[i] = dataset.labels[row];
    }

    Tape tape;
    auto trace = nn::forward_collect(tape, model, batch, {.mode = Mode::train});
    LossValue loss = ops::softmax_cross_entropy(tape, trace.logits, labels);
    tape.backward(loss);

    loss_sum += loss.total.item() * static_cast<double>(labels.size());
    const auto& lv = trace.logits.data();
    int64_t k = trace.logits.size(1);
    for (size_t i = 0; i < labels.size(); ++i) {
      const double* row = lv.data() + static_cast<int64_t>(i) * k;
      int arg = 0;
      for (int64_t j = 1; j < k; ++j)
        if (row[j] > row[arg]) arg = static_cast<int>(j);
      if (arg == labels[i]) ++correct;
    }
    seen += static_cast<int64_t>(labels.size());

    sgd_momentum_step(params, state, lr, cfg.momentum);
  }
  return {loss_sum / static_cast<double>(seen),
          static_cast<double>(correct) / static_cast<double>(seen)};
}

EvalResult evaluate(nn::Model& model, const data::Dataset& dataset, int batch_size) {
  dataset.validate();
  EvalResult result;
  result.probs.resize(static_cast<size_t>(dataset.size()) * dataset.class_count);
  double loss_sum = 0.0;
  int64_t correct = 0;
  for (int64_t start = 0; start < dataset.size(); start += batch_size) {
    int64_t end = std::min<int64_t>(dataset.size(), start + batch_size);
    std::vector<int> idx(static_cast<size_t>(end - start));
    for (int64_t i = start; i < end; ++i) idx[i - start] = static_cast<int>(i);
    auto [batch, labels] = data::gather(dataset, idx);
    Tape tape;
    tape.write_leaf_grads = false;
    auto trace = nn::forward_collect(tape, model, batch, {.mode = Mode::eval});
    LossValue loss = ops::softmax_cross_entropy(tape, trace.logits, labels);
    loss_sum += loss.total.item() * static_cast<double>(labels.size());
    auto probs = ops::softmax_rows(trace.logits);
    int64_t k = trace.logits.size(1);
    for (size_t i = 0; i < labels.size(); ++i) {
      const double* row = probs.data() + static_cast<int64_t>(i) * k;
      int arg = 0;
      for (int64_t j = 1; j < k; ++j)
        if (row[j] > row[arg]) arg = static_cast<int>(j);
      if (arg == labels[i]) ++correct;
      std::copy(row, row + k, result.probs.begin() + (start + static_cast<int64_t>(i)) * k);
    }
  }
  result.loss = loss_sum / static_cast<double>(dataset.size());
  result.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
  return result;
}

}  // namespace resprobe::train
