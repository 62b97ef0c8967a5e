#include "resprobe/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace resprobe::data {

void Dataset::validate() const {
  if (!images.defined() || images.rank() != 4)
    throw std::invalid_argument("dataset images must be [N, C, H, W]");
  if (static_cast<int64_t>(labels.size()) != images.size(0))
    throw std::invalid_argument("dataset has " + std::to_string(images.size(0)) + " images but " +
                                std::to_string(labels.size()) + " labels");
  if (class_count < 2) throw std::invalid_argument("dataset class_count must be at least 2");
  for (int y : labels)
    if (y < 0 || y >= class_count)
      throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(class_count) + ")");
}

NormStats compute_norm_stats(const Dataset& train) {
  train.validate();
  int64_t n = train.images.size(0), c = train.images.size(1);
  int64_t hw = train.images.size(2) * train.images.size(3);
  NormStats s;
  s.mean.assign(c, 0.0);
  s.stddev.assign(c, 0.0);
  const auto& v = train.images.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* p = v.data() + (i * c + ch) * hw;
      double acc = 0.0;
      for (int64_t k = 0; k < hw; ++k) acc += p[k];
      s.mean[ch] += acc;
    }
  for (int64_t ch = 0; ch < c; ++ch) s.mean[ch] /= static_cast<double>(n * hw);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* p = v.data() + (i * c + ch) * hw;
      double mu = s.mean[ch], acc = 0.0;
      for (int64_t k = 0; k < hw; ++k) acc += (p[k] - mu) * (p[k] - mu);
      s.stddev[ch] += acc;
    }
  for (int64_t ch = 0; ch < c; ++ch) {
    s.stddev[ch] = std::sqrt(s.stddev[ch] / static_cast<double>(n * hw));
    if (s.stddev[ch] < 1e-12) s.stddev[ch] = 1.0;  // constant channel
  }
  return s;
}

void apply_norm(Dataset& d, const NormStats& stats) {
  int64_t n = d.images.size(0), c = d.images.size(1);
  int64_t hw = d.images.size(2) * d.images.size(3);
  if (static_cast<int64_t>(stats.mean.size()) != c)
    throw std::invalid_argument("normalization stats have " + std::to_string(stats.mean.size()) +
                                " channels, dataset has " + std::to_string(c));
  auto& v = d.images.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      double* p = v.data() + (i * c + ch) * hw;
      double mu = stats.mean[ch], inv = 1.0 / stats.stddev[ch];
      for (int64_t k = 0; k < hw; ++k) p[k] = (p[k] - mu) * inv;
    }
}

// ---------------------------------------------------------------------------
// CIFAR binary
// ---------------------------------------------------------------------------

Dataset load_cifar_binary(const std::vector<std::string>& paths, const CifarOptions& opts) {
  if (opts.classes != 10 && opts.classes != 100)
    throw std::invalid_argument("CIFAR loader supports 10 or 100 classes");
  const int label_bytes = opts.classes == 100 ? 2 : 1;
  const int64_t pixel_bytes = 3072;
  const int64_t record = label_bytes + pixel_bytes;

  std::vector<double> pixels;
  std::vector<int> labels;
  for (const auto& path : paths) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open CIFAR file: " + path);
    std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() % record != 0)
      throw std::runtime_error("truncated CIFAR record in " + path + " at byte offset " +
                               std::to_string((buf.size() / record) * record));
    int64_t n = static_cast<int64_t>(buf.size()) / record;
    for (int64_t i = 0; i < n; ++i) {
      const auto* rec = reinterpret_cast<const uint8_t*>(buf.data() + i * record);
      int label = rec[label_bytes - 1];  // fine label for the 100-class layout
      if (label >= opts.classes)
        throw std::runtime_error("CIFAR label " + std::to_string(label) + " out of range in " + path);
      labels.push_back(label);
      for (int64_t k = 0; k < pixel_bytes; ++k)
        pixels.push_back(static_cast<double>(rec[label_bytes + k]) / 255.0);
    }
  }
  Dataset d;
  int64_t n = static_cast<int64_t>(labels.size());
  d.images = Tensor::from({n, 3, 32, 32}, std::move(pixels));
  d.labels = std::move(labels);
  d.class_count = opts.classes;
  d.split = opts.split;
  d.validate();
  if (opts.subset_size) return balanced_subset(d, *opts.subset_size, opts.seed);
  return d;
}

void write_cifar_binary(const std::string& path, const RawImages& raw) {
  if (raw.channels != 3 || raw.height != 32 || raw.width != 32)
    throw std::invalid_argument("CIFAR records are 3x32x32");
  const int label_bytes = raw.classes == 100 ? 2 : 1;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  size_t n = raw.labels.size();
  for (size_t i = 0; i < n; ++i) {
    uint8_t lab = static_cast<uint8_t>(raw.labels[i]);
    if (label_bytes == 2) {
      uint8_t coarse = static_cast<uint8_t>(raw.labels[i] / 5);
      os.put(static_cast<char>(coarse));
    }
    os.put(static_cast<char>(lab));
    os.write(reinterpret_cast<const char*>(raw.pixels.data() + i * 3072), 3072);
  }
  if (!os) throw std::runtime_error("failed writing " + path);
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

namespace {

uint32_t read_be32(std::istream& is, const std::string& path) {
  uint8_t b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("truncated IDX header in " + path);
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_be32(std::ostream& os, uint32_t v) {
  char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
               static_cast<char>(v)};
  os.write(b, 4);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split, int class_count) {
  std::ifstream is(images_path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open IDX images: " + images_path);
  uint32_t magic = read_be32(is, images_path);
  if (magic != 0x00000803u)
    throw std::runtime_error("bad IDX image magic in " + images_path + ": expected 0x00000803");
  uint32_t n = read_be32(is, images_path);
  uint32_t h = read_be32(is, images_path);
  uint32_t w = read_be32(is, images_path);
  std::vector<uint8_t> buf(static_cast<size_t>(n) * h * w);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw std::runtime_error("truncated IDX image data in " + images_path);

  std::ifstream ls(labels_path, std::ios::binary);
  if (!ls) throw std::runtime_error("cannot open IDX labels: " + labels_path);
  uint32_t lmagic = read_be32(ls, labels_path);
  if (lmagic != 0x00000801u)
    throw std::runtime_error("bad IDX label magic in " + labels_path + ": expected 0x00000801");
  uint32_t ln = read_be32(ls, labels_path);
  if (ln != n)
    throw std::runtime_error("IDX label count " + std::to_string(ln) + " does not match " +
                             std::to_string(n) + " images");
  std::vector<uint8_t> labs(ln);
  ls.read(reinterpret_cast<char*>(labs.data()), ln);
  if (!ls) throw std::runtime_error("truncated IDX label data in " + labels_path);

  std::vector<double> pixels(buf.size());
  for (size_t i = 0; i < buf.size(); ++i) pixels[i] = static_cast<double>(buf[i]) / 255.0;
  Dataset d;
  d.images = Tensor::from({n, 1, h, w}, std::move(pixels));
  d.labels.assign(labs.begin(), labs.end());
  d.class_count = class_count;
  d.split = split;
  d.validate();
  return d;
}

void write_idx(const std::string& images_path, const std::string& labels_path,
               const RawImages& raw) {
  if (raw.channels != 1) throw std::invalid_argument("IDX images are single channel");
  std::ofstream os(images_path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + images_path);
  write_be32(os, 0x00000803u);
  write_be32(os, static_cast<uint32_t>(raw.labels.size()));
  write_be32(os, static_cast<uint32_t>(raw.height));
  write_be32(os, static_cast<uint32_t>(raw.width));
  os.write(reinterpret_cast<const char*>(raw.pixels.data()),
           static_cast<std::streamsize>(raw.pixels.size()));
  std::ofstream ls(labels_path, std::ios::binary | std::ios::trunc);
  if (!ls) throw std::runtime_error("cannot open for writing: " + labels_path);
  write_be32(ls, 0x00000801u);
  write_be32(ls, static_cast<uint32_t>(raw.labels.size()));
  for (int y : raw.labels) ls.put(static_cast<char>(y));
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

Dataset synthetic_clusters(int n_per_class, int class_count, const Shape& image_shape,
                           double separation, uint64_t seed) {
  if (separation < 0.0) throw std::invalid_argument("separation must be nonnegative");
  if (image_shape.size() != 3) throw std::invalid_argument("image_shape must be {C, H, W}");
  int64_t dim = shape_numel(image_shape);
  Rng dir_rng = Rng::derive(seed, 1);
  // class means: separation * unit direction
  std::vector<std::vector<double>> means(class_count, std::vector<double>(dim));
  for (int c = 0; c < class_count; ++c) {
    double norm = 0.0;
    for (auto& x : means[c]) {
      x = dir_rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(std::max(norm, 1e-12));
    for (auto& x : means[c]) x = separation * x / norm;
  }
  int64_t n = static_cast<int64_t>(n_per_class) * class_count;
  std::vector<double> pixels(static_cast<size_t>(n * dim));
  std::vector<int> labels(static_cast<size_t>(n));
  Rng rng = Rng::derive(seed, 2);
  for (int64_t i = 0; i < n; ++i) {
    int c = static_cast<int>(i % class_count);
    labels[i] = c;
    double* p = pixels.data() + i * dim;
    for (int64_t k = 0; k < dim; ++k) p[k] = means[c][k] + rng.normal();
  }
  Dataset d;
  d.images = Tensor::from({n, image_shape[0], image_shape[1], image_shape[2]}, std::move(pixels));
  d.labels = std::move(labels);
  d.class_count = class_count;
  return d;
}

namespace {

// Smooth random field: sum of a few low-frequency sinusoids per channel.
std::vector<double> make_template(Rng& rng, int channels, int h, int w, double amplitude) {
  std::vector<double> t(static_cast<size_t>(channels) * h * w, 0.0);
  for (int c = 0; c < channels; ++c) {
    for (int wave = 0; wave < 4; ++wave) {
      double fx = rng.uniform(0.5, 3.0) * 2.0 * 3.14159265358979323846 / w;
      double fy = rng.uniform(0.5, 3.0) * 2.0 * 3.14159265358979323846 / h;
      double phase = rng.uniform(0.0, 6.28318530717958647692);
      double amp = amplitude * rng.uniform(0.3, 1.0) / 2.0;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          t[(static_cast<size_t>(c) * h + i) * w + j] += amp * std::sin(fy * i + fx * j + phase);
    }
    double offset = rng.uniform(-0.15, 0.15);
    for (int i = 0; i < h * w; ++i) t[static_cast<size_t>(c) * h * w + i] += offset;
  }
  return t;
}

RawImages render_textures(const TextureOptions& opts,
                          const std::vector<std::vector<double>>& templates, int per_class,
                          uint64_t stream) {
  const int c = 3, h = 32, w = 32;
  RawImages raw;
  raw.classes = opts.classes;
  int64_t n = static_cast<int64_t>(per_class) * opts.classes;
  raw.pixels.resize(static_cast<size_t>(n) * c * h * w);
  raw.labels.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int cls = static_cast<int>(i % opts.classes);
    raw.labels[i] = cls;
    Rng rng = Rng::derive(opts.seed, stream, static_cast<uint64_t>(i));
    int dy = rng.range(-opts.max_shift, opts.max_shift);
    int dx = rng.range(-opts.max_shift, opts.max_shift);
    double gain = 1.0 + 0.25 * rng.normal();
    // pull the sample toward its fixed partner class's template, so
    // ambiguity concentrates on two-way confusions
    int other = cls;
    double mix = 1.0;
    if (opts.confuse > 0.0 && opts.classes > 1) {
      other = cls % 2 == 0 ? (cls + 1) % opts.classes : cls - 1;
      mix = 1.0 - opts.confuse * rng.uniform();
    }
    uint8_t* out = raw.pixels.data() + i * c * h * w;
    const auto& tpl = templates[cls];
    const auto& tpl2 = templates[other];
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          int sy = ((y + dy) % h + h) % h;
          int sx = ((x + dx) % w + w) % w;
          size_t at = (static_cast<size_t>(ch) * h + sy) * w + sx;
          double v = 0.5 + gain * (mix * tpl[at] + (1.0 - mix) * tpl2[at]) +
                     opts.noise * rng.normal() * 0.25;
          v = std::clamp(v, 0.0, 1.0);
          out[(static_cast<size_t>(ch) * h + y) * w + x] = static_cast<uint8_t>(std::lround(v * 255.0));
        }
  }
  return raw;
}

}  // namespace

std::pair<RawImages, RawImages> synthetic_textures(const TextureOptions& opts) {
  Rng tpl_rng = Rng::derive(opts.seed, 0xfeed);
  std::vector<std::vector<double>> templates;
  templates.reserve(opts.classes);
  for (int cls = 0; cls < opts.classes; ++cls)
    templates.push_back(make_template(tpl_rng, 3, 32, 32, opts.template_amplitude));
  RawImages train = render_textures(opts, templates, opts.train_per_class, 1);
  RawImages test = render_textures(opts, templates, opts.test_per_class, 2);
  return {std::move(train), std::move(test)};
}

Dataset balanced_subset(const Dataset& d, int subset_size, uint64_t seed) {
  d.validate();
  if (subset_size < 0 || subset_size > d.size())
    throw std::invalid_argument("subset_size " + std::to_string(subset_size) +
                                " out of range for dataset of " + std::to_string(d.size()));
  if (subset_size == d.size()) return d;
  if (subset_size % d.class_count != 0)
    throw std::invalid_argument("subset_size must be a multiple of class_count for balance");
  int per_class = subset_size / d.class_count;
  std::vector<std::vector<int>> by_class(d.class_count);
  for (int64_t i = 0; i < d.size(); ++i) by_class[d.labels[i]].push_back(static_cast<int>(i));
  Rng rng = Rng::derive(seed, 0x5b5e7);
  std::vector<int> chosen;
  for (int c = 0; c < d.class_count; ++c) {
    if (static_cast<int>(by_class[c].size()) < per_class)
      throw std::invalid_argument("class " + std::to_string(c) + " has only " +
                                  std::to_string(by_class[c].size()) + " samples, need " +
                                  std::to_string(per_class));
    rng.shuffle(by_class[c]);
    chosen.insert(chosen.end(), by_class[c].begin(), by_class[c].begin() + per_class);
  }
  std::sort(chosen.begin(), chosen.end());
  auto [images, labels] = gather(d, chosen);
  Dataset out;
  out.images = images;
  out.labels = labels;
  out.class_count = d.class_count;
  out.split = d.split;
  return out;
}

std::vector<std::vector<int>> batch_indices(int64_t n, int batch_size, Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  std::vector<int> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

std::pair<Tensor, std::vector<int>> gather(const Dataset& d, const std::vector<int>& idx) {
  int64_t c = d.images.size(1), h = d.images.size(2), w = d.images.size(3);
  int64_t stride = c * h * w;
  Tensor batch = Tensor::zeros({static_cast<int64_t>(idx.size()), c, h, w});
  std::vector<int> labels(idx.size());
  const auto& src = d.images.data();
  auto& dst = batch.data();
  for (size_t i = 0; i < idx.size(); ++i) {
    int64_t row = idx[i];
    if (row < 0 || row >= d.size())
      throw std::out_of_range("sample index " + std::to_string(row) + " out of range");
    std::copy(src.begin() + row * stride, src.begin() + (row + 1) * stride,
              dst.begin() + static_cast<int64_t>(i) * stride);
    labels[i] = d.labels[row];
  }
  return {std::move(batch), std::move(labels)};
}

}  // namespace resprobe::data
