#include "resprobe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace resprobe {
namespace ops {

namespace testing {
double bn_backward_gamma_scale = 1.0;
}

namespace {

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

void require(bool cond, const char* op, const std::string& detail) {
  if (!cond) shape_error(op, detail);
}

// C[m,n] += A[m,k] * B[k,n]; row-major, j-innermost so the compiler can
// vectorize the accumulation over contiguous C and B rows.
void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Four independent accumulator chains so the reduction is not bound by
// floating-point add latency and can vectorize.
double dot_fast(const double* a, const double* b, int64_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int64_t p = 0;
  for (; p + 4 <= n; p += 4) {
    s0 += a[p] * b[p];
    s1 += a[p + 1] * b[p + 1];
    s2 += a[p + 2] * b[p + 2];
    s3 += a[p + 3] * b[p + 3];
  }
  for (; p < n; ++p) s0 += a[p] * b[p];
  return (s0 + s1) + (s2 + s3);
}

double sum_fast(const double* a, int64_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int64_t p = 0;
  for (; p + 4 <= n; p += 4) {
    s0 += a[p];
    s1 += a[p + 1];
    s2 += a[p + 2];
    s3 += a[p + 3];
  }
  for (; p < n; ++p) s0 += a[p];
  return (s0 + s1) + (s2 + s3);
}

double sq_dev_sum(const double* a, int64_t n, double mu) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int64_t p = 0;
  for (; p + 4 <= n; p += 4) {
    double d0 = a[p] - mu, d1 = a[p + 1] - mu, d2 = a[p + 2] - mu, d3 = a[p + 3] - mu;
    s0 += d0 * d0;
    s1 += d1 * d1;
    s2 += d2 * d2;
    s3 += d3 * d3;
  }
  for (; p < n; ++p) {
    double d = a[p] - mu;
    s0 += d * d;
  }
  return (s0 + s1) + (s2 + s3);
}

// C[m,n] += sum_k A[m,k] * B[n,k]  (A * B^T), contiguous dot products.
void gemm_abt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (int64_t j = 0; j < n; ++j) {
      c[i * n + j] += dot_fast(arow, b + j * k, k);
    }
  }
}

// C[k,n] += sum_m A[m,k] * B[m,n]  (A^T * B).
void gemm_atb(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require(same_shape(a.shape(), b.shape()), "add",
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  return tape.record("add", {a, b}, out, [](Tape& t, const Tape::Node& n) {
    const auto& dy = *t.find_grad_buf(n.output.get());
    for (int side = 0; side < 2; ++side) {
      auto& dx = t.grad_buf(n.inputs[side]);
      for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    }
  });
}

Tensor bias_add(Tape& tape, const Tensor& x, const Tensor& bias) {
  require(x.rank() == 2, "bias_add", "expected rank-2 input, got " + shape_str(x.shape()));
  require(bias.rank() == 1 && bias.size(0) == x.size(1), "bias_add",
          "bias " + shape_str(bias.shape()) + " does not match input " + shape_str(x.shape()));
  int64_t n = x.size(0), k = x.size(1);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.data();
  const auto& bv = bias.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < k; ++j) ov[i * k + j] = xv[i * k + j] + bv[j];
  return tape.record("bias_add", {x, bias}, out, [n, k](Tape& t, const Tape::Node& node) {
    const auto& dy = *t.find_grad_buf(node.output.get());
    auto& dx = t.grad_buf(node.inputs[0]);
    auto& db = t.grad_buf(node.inputs[1]);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < k; ++j) {
        dx[i * k + j] += dy[i * k + j];
        db[j] += dy[i * k + j];
      }
  });
}

Tensor scale(Tape& tape, const Tensor& x, double alpha) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = alpha * xv[i];
  return tape.record("scalar_multiply", {x}, out, [alpha](Tape& t, const Tape::Node& n) {
    const auto& dy = *t.find_grad_buf(n.output.get());
    auto& dx = t.grad_buf(n.inputs[0]);
    for (size_t i = 0; i < dy.size(); ++i) dx[i] += alpha * dy[i];
  });
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul",
          "expected rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  require(a.size(1) == b.size(0), "matmul",
          "inner dimensions disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t m = a.size(0), k = a.size(1), n = b.size(1);
  Tensor out = Tensor::zeros({m, n});
  gemm_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  return tape.record("matmul", {a, b}, out, [m, k, n](Tape& t, const Tape::Node& node) {
    const auto& dy = *t.find_grad_buf(node.output.get());
    const auto& av = node.inputs[0]->data;
    const auto& bv = node.inputs[1]->data;
    // dA += dY * B^T ; dB += A^T * dY
    gemm_abt(dy.data(), bv.data(), t.grad_buf(node.inputs[0]).data(), m, n, k);
    gemm_atb(av.data(), dy.data(), t.grad_buf(node.inputs[1]).data(), m, k, n);
  });
}

Tensor relu(Tape& tape, const Tensor& x) {
  if (tape.on_relu) tape.on_relu(x);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return tape.record("relu", {x}, out, [](Tape& t, const Tape::Node& n) {
    const auto& dy = *t.find_grad_buf(n.output.get());
    const auto& xv = n.inputs[0]->data;
    auto& dx = t.grad_buf(n.inputs[0]);
    for (size_t i = 0; i < dy.size(); ++i)
      if (xv[i] > 0.0) dx[i] += dy[i];
  });
}

Tensor sum(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  return tape.record("sum", {x}, out, [](Tape& t, const Tape::Node& n) {
    double dy = (*t.find_grad_buf(n.output.get()))[0];
    auto& dx = t.grad_buf(n.inputs[0]);
    for (double& v : dx) v += dy;
  });
}

Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape) {
  require(shape_numel(new_shape) == x.numel(), "reshape",
          "cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  Tensor out = Tensor::from(std::move(new_shape), x.data());
  return tape.record("reshape", {x}, out, [](Tape& t, const Tape::Node& n) {
    const auto& dy = *t.find_grad_buf(n.output.get());
    auto& dx = t.grad_buf(n.inputs[0]);
    for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

Tensor flatten(Tape& tape, const Tensor& x) {
  require(x.rank() >= 2, "flatten", "expected rank >= 2, got " + shape_str(x.shape()));
  return reshape(tape, x, {x.size(0), x.numel() / x.size(0)});
}

// ---------------------------------------------------------------------------
// Convolution: im2col + GEMM per sample. The patch matrix has one row per
// (channel, kernel position) and one column per output position.
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int64_t n, c, h, w, o, kh, kw, oh, ow;
  int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  require(x.rank() == 4, "conv2d", "expected NCHW input, got " + shape_str(x.shape()));
  require(w.rank() == 4, "conv2d", "expected OIHW kernel, got " + shape_str(w.shape()));
  require(stride >= 1, "conv2d", "stride must be positive");
  require(pad >= 0, "conv2d", "padding must be nonnegative");
  require(x.size(1) == w.size(1), "conv2d",
          "input channels " + std::to_string(x.size(1)) + " do not match kernel channels " +
              std::to_string(w.size(1)));
  ConvDims d;
  d.n = x.size(0);
  d.c = x.size(1);
  d.h = x.size(2);
  d.w = x.size(3);
  d.o = w.size(0);
  d.kh = w.size(2);
  d.kw = w.size(3);
  d.stride = stride;
  d.pad = pad;
  int64_t oh = (d.h + 2 * pad - d.kh) / stride + 1;
  int64_t ow = (d.w + 2 * pad - d.kw) / stride + 1;
  require(oh >= 1 && ow >= 1, "conv2d",
          "kernel " + shape_str(w.shape()) + " larger than padded input " + shape_str(x.shape()));
  d.oh = oh;
  d.ow = ow;
  return d;
}

void im2col(const double* x, const ConvDims& d, double* col) {
  const int64_t p = d.oh * d.ow;
  for (int64_t c = 0; c < d.c; ++c) {
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj) {
        double* row = col + ((c * d.kh + ki) * d.kw + kj) * p;
        for (int64_t oh = 0; oh < d.oh; ++oh) {
          int64_t ih = oh * d.stride - d.pad + ki;
          if (ih < 0 || ih >= d.h) {
            std::fill(row + oh * d.ow, row + (oh + 1) * d.ow, 0.0);
            continue;
          }
          const double* xrow = x + (c * d.h + ih) * d.w;
          for (int64_t ow = 0; ow < d.ow; ++ow) {
            int64_t iw = ow * d.stride - d.pad + kj;
            row[oh * d.ow + ow] = (iw >= 0 && iw < d.w) ? xrow[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, const ConvDims& d, double* dx) {
  for (int64_t c = 0; c < d.c; ++c) {
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj) {
        const double* row = col + ((c * d.kh + ki) * d.kw + kj) * d.oh * d.ow;
        for (int64_t oh = 0; oh < d.oh; ++oh) {
          int64_t ih = oh * d.stride - d.pad + ki;
          if (ih < 0 || ih >= d.h) continue;
          double* xrow = dx + (c * d.h + ih) * d.w;
          for (int64_t ow = 0; ow < d.ow; ++ow) {
            int64_t iw = ow * d.stride - d.pad + kj;
            if (iw >= 0 && iw < d.w) xrow[iw] += row[oh * d.ow + ow];
          }
        }
      }
    }
  }
}

// Direct row kernels for the dominant 3x3 / stride 1 / pad 1 case: no
// patch matrix is materialized, every inner loop is a contiguous fma row.

bool fast3x3(const ConvDims& d) {
  return d.kh == 3 && d.kw == 3 && d.stride == 1 && d.pad == 1 && d.w >= 2;
}

// out[y, :] += w0*row[shift -1] + w1*row[0] + w2*row[+1], edges clipped
inline void axpy_row3(double* __restrict out, const double* __restrict row, double w0, double w1,
                      double w2, int64_t width) {
  out[0] += w1 * row[0] + w2 * row[1];
  for (int64_t j = 1; j < width - 1; ++j)
    out[j] += w0 * row[j - 1] + w1 * row[j] + w2 * row[j + 1];
  out[width - 1] += w0 * row[width - 2] + w1 * row[width - 1];
}

// Source rows are shared across all output channels per pass, so each
// input row is loaded once while up to eight output rows stay hot.
void conv3x3_forward(const double* x, const double* w, const double* bias, double* out,
                     const ConvDims& d) {
  const int64_t hw = d.h * d.w;
  for (int64_t s = 0; s < d.n; ++s) {
    const double* xs = x + s * d.c * hw;
    double* os = out + s * d.o * hw;
    if (bias) {
      for (int64_t o = 0; o < d.o; ++o) {
        double b = bias[o];
        double* oplane = os + o * hw;
        for (int64_t i = 0; i < hw; ++i) oplane[i] = b;
      }
    }
    for (int64_t c = 0; c < d.c; ++c) {
      const double* xplane = xs + c * hw;
      for (int64_t ih = 0; ih < d.h; ++ih) {
        const double* xrow = xplane + ih * d.w;
        for (int64_t ki = 0; ki < 3; ++ki) {
          int64_t y = ih - ki + 1;  // output row this source row feeds
          if (y < 0 || y >= d.h) continue;
          for (int64_t o = 0; o < d.o; ++o) {
            const double* wk = w + (o * d.c + c) * 9 + ki * 3;
            axpy_row3(os + o * hw + y * d.w, xrow, wk[0], wk[1], wk[2], d.w);
          }
        }
      }
    }
  }
}

// dx = conv(dy, kernel rotated 180 and transposed in o/c)
void conv3x3_backward_data(const double* dy, const double* w, double* dx, const ConvDims& d) {
  const int64_t hw = d.h * d.w;
  for (int64_t s = 0; s < d.n; ++s) {
    const double* dys = dy + s * d.o * hw;
    double* dxs = dx + s * d.c * hw;
    for (int64_t o = 0; o < d.o; ++o) {
      const double* dyplane = dys + o * hw;
      for (int64_t oh = 0; oh < d.h; ++oh) {
        const double* dyrow = dyplane + oh * d.w;
        for (int64_t ki = 0; ki < 3; ++ki) {
          int64_t y = oh + ki - 1;  // dx row this dy row feeds
          if (y < 0 || y >= d.h) continue;
          for (int64_t c = 0; c < d.c; ++c) {
            // flipped taps: w[ki, 2-kj]
            const double* wk = w + (o * d.c + c) * 9 + ki * 3;
            axpy_row3(dxs + c * hw + y * d.w, dyrow, wk[2], wk[1], wk[0], d.w);
          }
        }
      }
    }
  }
}

// One pass per (o, c, ki) row pair; the three taps accumulate into
// four-lane partial sums so the reductions vectorize.
void conv3x3_backward_weights(const double* x, const double* dy, double* dw, const ConvDims& d) {
  const int64_t hw = d.h * d.w;
  const int64_t w_len = d.w;
  for (int64_t s = 0; s < d.n; ++s) {
    const double* xs = x + s * d.c * hw;
    const double* dys = dy + s * d.o * hw;
    for (int64_t o = 0; o < d.o; ++o) {
      const double* dyplane = dys + o * hw;
      for (int64_t c = 0; c < d.c; ++c) {
        const double* xplane = xs + c * hw;
        double* wk = dw + (o * d.c + c) * 9;
        for (int64_t ki = 0; ki < 3; ++ki) {
          double p0[4] = {0, 0, 0, 0}, p1[4] = {0, 0, 0, 0}, p2[4] = {0, 0, 0, 0};
          double e0 = 0.0, e1 = 0.0, e2 = 0.0;
          for (int64_t y = 0; y < d.h; ++y) {
            int64_t ih = y + ki - 1;
            if (ih < 0 || ih >= d.h) continue;
            const double* dr = dyplane + y * w_len;
            const double* xr = xplane + ih * w_len;
            // interior: all three taps in bounds for j in [1, w-2]
            int64_t j = 1;
            for (; j + 4 <= w_len - 1; j += 4) {
              for (int u = 0; u < 4; ++u) {
                double dv = dr[j + u];
                p0[u] += dv * xr[j + u - 1];
                p1[u] += dv * xr[j + u];
                p2[u] += dv * xr[j + u + 1];
              }
            }
            for (; j < w_len - 1; ++j) {
              double dv = dr[j];
              e0 += dv * xr[j - 1];
              e1 += dv * xr[j];
              e2 += dv * xr[j + 1];
            }
            // edges: j = 0 misses the left tap, j = w-1 misses the right
            e1 += dr[0] * xr[0];
            e2 += dr[0] * xr[1];
            e0 += dr[w_len - 1] * xr[w_len - 2];
            e1 += dr[w_len - 1] * xr[w_len - 1];
          }
          wk[ki * 3] += (p0[0] + p0[1]) + (p0[2] + p0[3]) + e0;
          wk[ki * 3 + 1] += (p1[0] + p1[1]) + (p1[2] + p1[3]) + e1;
          wk[ki * 3 + 2] += (p2[0] + p2[1]) + (p2[2] + p2[3]) + e2;
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias,
              int stride, int pad) {
  ConvDims d = conv_dims(x, w, stride, pad);
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.size(0) == d.o, "conv2d",
            "bias " + shape_str(bias.shape()) + " does not match " + std::to_string(d.o) +
                " output channels");
  }
  const int64_t ckk = d.c * d.kh * d.kw;
  const int64_t p = d.oh * d.ow;
  Tensor out = Tensor::zeros({d.n, d.o, d.oh, d.ow});
  const auto& xv = x.data();
  const auto& wv = w.data();
  auto& ov = out.data();
  if (fast3x3(d)) {
    conv3x3_forward(xv.data(), wv.data(), bias.defined() ? bias.data().data() : nullptr,
                    ov.data(), d);
  } else {
    std::vector<double> col(static_cast<size_t>(ckk * p));
    for (int64_t s = 0; s < d.n; ++s) {
      im2col(xv.data() + s * d.c * d.h * d.w, d, col.data());
      gemm_acc(wv.data(), col.data(), ov.data() + s * d.o * p, d.o, ckk, p);
    }
    if (bias.defined()) {
      const auto& bv = bias.data();
      for (int64_t s = 0; s < d.n; ++s)
        for (int64_t o = 0; o < d.o; ++o) {
          double b = bv[o];
          double* orow = ov.data() + (s * d.o + o) * p;
          for (int64_t i = 0; i < p; ++i) orow[i] += b;
        }
    }
  }

  std::vector<Tensor> inputs = bias.defined() ? std::vector<Tensor>{x, w, bias}
                                              : std::vector<Tensor>{x, w};
  return tape.record("conv2d", std::move(inputs), out, [d, ckk, p](Tape& t, const Tape::Node& n) {
    const auto& dy = *t.find_grad_buf(n.output.get());
    const auto& xv = n.inputs[0]->data;
    const auto& wv = n.inputs[1]->data;
    // the input gradient feeds upstream propagation; a plain leaf that
    // nobody marked can skip it (typically the image batch at the stem)
    const TensorImpl* xi = n.inputs[0].get();
    bool need_dx = xi->node_id >= 0 || xi->requires_grad || xi->retain_grad;
    auto& dw = t.grad_buf(n.inputs[1]);
    if (fast3x3(d)) {
      if (need_dx) conv3x3_backward_data(dy.data(), wv.data(), t.grad_buf(n.inputs[0]).data(), d);
      conv3x3_backward_weights(xv.data(), dy.data(), dw.data(), d);
    } else {
      std::vector<double> col(static_cast<size_t>(ckk * p));
      std::vector<double> colgrad(static_cast<size_t>(ckk * p));
      // W^T once: [ckk, o]
      std::vector<double> wt(static_cast<size_t>(ckk * d.o));
      for (int64_t o = 0; o < d.o; ++o)
        for (int64_t k = 0; k < ckk; ++k) wt[k * d.o + o] = wv[o * ckk + k];
      double* dx = need_dx ? t.grad_buf(n.inputs[0]).data() : nullptr;
      for (int64_t s = 0; s < d.n; ++s) {
        const double* dys = dy.data() + s * d.o * p;
        im2col(xv.data() + s * d.c * d.h * d.w, d, col.data());
        // dW += dY * col^T
        gemm_abt(dys, col.data(), dw.data(), d.o, p, ckk);
        if (dx) {
          // dcol = W^T * dY, then scatter back
          std::fill(colgrad.begin(), colgrad.end(), 0.0);
          gemm_acc(wt.data(), dys, colgrad.data(), ckk, d.o, p);
          col2im_acc(colgrad.data(), d, dx + s * d.c * d.h * d.w);
        }
      }
    }
    if (n.inputs.size() > 2) {
      auto& db = t.grad_buf(n.inputs[2]);
      for (int64_t s = 0; s < d.n; ++s)
        for (int64_t o = 0; o < d.o; ++o) db[o] += sum_fast(dy.data() + (s * d.o + o) * p, p);
    }
  });
}

Tensor avg_pool2d(Tape& tape, const Tensor& x, int kh, int kw, int sh, int sw) {
  require(x.rank() == 4, "avg_pool2d", "expected NCHW input, got " + shape_str(x.shape()));
  require(kh >= 1 && kw >= 1 && sh >= 1 && sw >= 1, "avg_pool2d", "window and stride must be positive");
  int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  require(h >= kh && w >= kw, "avg_pool2d",
          "window " + std::to_string(kh) + "x" + std::to_string(kw) + " larger than input " +
              shape_str(x.shape()));
  int64_t oh = (h - kh) / sh + 1;
  int64_t ow = (w - kw) / sw + 1;
  Tensor out = Tensor::zeros({n, c, oh, ow});
  const auto& xv = x.data();
  auto& ov = out.data();
  const double inv = 1.0 / (static_cast<double>(kh) * kw);
  for (int64_t s = 0; s < n; ++s)
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* xp = xv.data() + (s * c + ch) * h * w;
      double* op = ov.data() + (s * c + ch) * oh * ow;
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) acc += xp[(i * sh + ki) * w + (j * sw + kj)];
          op[i * ow + j] = acc * inv;
        }
    }
  return tape.record("avg_pool2d", {x}, out,
                     [n, c, h, w, oh, ow, kh, kw, sh, sw, inv](Tape& t, const Tape::Node& node) {
                       const auto& dy = *t.find_grad_buf(node.output.get());
                       auto& dx = t.grad_buf(node.inputs[0]);
                       for (int64_t s = 0; s < n; ++s)
                         for (int64_t ch = 0; ch < c; ++ch) {
                           const double* dp = dy.data() + (s * c + ch) * oh * ow;
                           double* xp = dx.data() + (s * c + ch) * h * w;
                           for (int64_t i = 0; i < oh; ++i)
                             for (int64_t j = 0; j < ow; ++j) {
                               double g = dp[i * ow + j] * inv;
                               for (int64_t ki = 0; ki < kh; ++ki)
                                 for (int64_t kj = 0; kj < kw; ++kj)
                                   xp[(i * sh + ki) * w + (j * sw + kj)] += g;
                             }
                         }
                     });
}

Tensor batchnorm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 const BatchNormArgs& args) {
  require(x.rank() == 4, "batchnorm", "expected NCHW input, got " + shape_str(x.shape()));
  int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  require(gamma.rank() == 1 && gamma.size(0) == c, "batchnorm",
          "gamma " + shape_str(gamma.shape()) + " does not match " + std::to_string(c) + " channels");
  require(beta.rank() == 1 && beta.size(0) == c, "batchnorm",
          "beta " + shape_str(beta.shape()) + " does not match " + std::to_string(c) + " channels");
  require(args.running_mean && args.running_var, "batchnorm", "running statistics not provided");
  require(static_cast<int64_t>(args.running_mean->size()) == c &&
              static_cast<int64_t>(args.running_var->size()) == c,
          "batchnorm", "running statistics do not match " + std::to_string(c) + " channels");

  const int64_t hw = h * w;
  const int64_t m = n * hw;
  std::vector<double> mean(c, 0.0), var(c, 0.0), rstd(c);
  const auto& xv = x.data();

  if (args.mode == Mode::train) {
    for (int64_t s = 0; s < n; ++s)
      for (int64_t ch = 0; ch < c; ++ch)
        mean[ch] += sum_fast(xv.data() + (s * c + ch) * hw, hw);
    for (int64_t ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(m);
    for (int64_t s = 0; s < n; ++s)
      for (int64_t ch = 0; ch < c; ++ch)
        var[ch] += sq_dev_sum(xv.data() + (s * c + ch) * hw, hw, mean[ch]);
    for (int64_t ch = 0; ch < c; ++ch) var[ch] /= static_cast<double>(m);
    for (int64_t ch = 0; ch < c; ++ch) {
      (*args.running_mean)[ch] = (1.0 - args.momentum) * (*args.running_mean)[ch] + args.momentum * mean[ch];
      (*args.running_var)[ch] = (1.0 - args.momentum) * (*args.running_var)[ch] + args.momentum * var[ch];
    }
  } else {
    mean = *args.running_mean;
    var = *args.running_var;
  }
  for (int64_t ch = 0; ch < c; ++ch) rstd[ch] = 1.0 / std::sqrt(var[ch] + args.eps);

  Tensor out = Tensor::zeros(x.shape());
  auto& ov = out.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  for (int64_t s = 0; s < n; ++s)
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* xp = xv.data() + (s * c + ch) * hw;
      double* op = ov.data() + (s * c + ch) * hw;
      double mu = mean[ch], rs = rstd[ch], g = gv[ch], b = bv[ch];
      for (int64_t i = 0; i < hw; ++i) op[i] = (xp[i] - mu) * rs * g + b;
    }

  const bool train = args.mode == Mode::train;
  return tape.record(
      "batchnorm", {x, gamma, beta}, out,
      [n, c, hw, m, train, mean, rstd](Tape& t, const Tape::Node& node) {
        const auto& dy = *t.find_grad_buf(node.output.get());
        const auto& xv = node.inputs[0]->data;
        const auto& gv = node.inputs[1]->data;
        auto& dx = t.grad_buf(node.inputs[0]);
        auto& dg = t.grad_buf(node.inputs[1]);
        auto& db = t.grad_buf(node.inputs[2]);
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0), sum_xm(c, 0.0);
        for (int64_t s = 0; s < n; ++s)
          for (int64_t ch = 0; ch < c; ++ch) {
            const double* xp = xv.data() + (s * c + ch) * hw;
            const double* dp = dy.data() + (s * c + ch) * hw;
            double mu = mean[ch], rs = rstd[ch];
            double a0 = sum_fast(dp, hw);
            double a1 = dot_fast(dp, xp, hw);
            double a2 = sum_fast(xp, hw);
            sum_dy[ch] += a0;
            sum_dy_xhat[ch] += (a1 - mu * a0) * rs;
            sum_xm[ch] += a2 - mu * static_cast<double>(hw);
          }
        for (int64_t ch = 0; ch < c; ++ch) {
          dg[ch] += sum_dy_xhat[ch] * testing::bn_backward_gamma_scale;
          db[ch] += sum_dy[ch];
        }
        if (!train) {
          // Running statistics are constants: the op is per-channel affine.
          for (int64_t s = 0; s < n; ++s)
            for (int64_t ch = 0; ch < c; ++ch) {
              const double* dp = dy.data() + (s * c + ch) * hw;
              double* xg = dx.data() + (s * c + ch) * hw;
              double grs = gv[ch] * rstd[ch];
              for (int64_t i = 0; i < hw; ++i) xg[i] += dp[i] * grs;
            }
          return;
        }
        // Differentiate through batch mean and variance.
        for (int64_t s = 0; s < n; ++s)
          for (int64_t ch = 0; ch < c; ++ch) {
            const double* xp = xv.data() + (s * c + ch) * hw;
            const double* dp = dy.data() + (s * c + ch) * hw;
            double* xg = dx.data() + (s * c + ch) * hw;
            double mu = mean[ch], rs = rstd[ch], g = gv[ch];
            // sum_dy_xhat carries one rstd factor already, so
            // d(loss)/d(var) = sum(dxhat*(x-mu)) * (-1/2) rstd^3 = below
            double dvar = -0.5 * rs * rs * g * sum_dy_xhat[ch];
            double dmean = -g * rs * sum_dy[ch] - 2.0 * dvar * sum_xm[ch] / static_cast<double>(m);
            double inv_m = 1.0 / static_cast<double>(m);
            for (int64_t i = 0; i < hw; ++i) {
              xg[i] += g * rs * dp[i] + dvar * 2.0 * (xp[i] - mu) * inv_m + dmean * inv_m;
            }
          }
      });
}

LossValue softmax_cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
  require(logits.rank() == 2, "softmax_cross_entropy",
          "expected [N, classes] logits, got " + shape_str(logits.shape()));
  int64_t n = logits.size(0), k = logits.size(1);
  require(static_cast<int64_t>(labels.size()) == n, "softmax_cross_entropy",
          "label count " + std::to_string(labels.size()) + " does not match batch " + std::to_string(n));
  for (int y : labels)
    require(y >= 0 && y < k, "softmax_cross_entropy", "label " + std::to_string(y) + " out of range");

  const auto& lv = logits.data();
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n * k));
  std::vector<double> per_sample(static_cast<size_t>(n));
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * k;
    double mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    double logz = std::log(z);
    for (int64_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - mx) / z;
    per_sample[i] = logz - (row[labels[i]] - mx);
    total += per_sample[i];
  }
  total /= static_cast<double>(n);

  Tensor out = Tensor::scalar(total);
  Tensor recorded = tape.record(
      "softmax_cross_entropy", {logits}, out,
      [n, k, probs, labels](Tape& t, const Tape::Node& node) {
        double dy = (*t.find_grad_buf(node.output.get()))[0];
        auto& dl = t.grad_buf(node.inputs[0]);
        double inv_n = dy / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) {
          const double* p = probs->data() + i * k;
          double* g = dl.data() + i * k;
          for (int64_t j = 0; j < k; ++j) g[j] += p[j] * inv_n;
          g[labels[i]] -= inv_n;
        }
      });
  return LossValue{recorded, std::move(per_sample)};
}

std::vector<double> softmax_rows(const Tensor& logits) {
  int64_t n = logits.size(0), k = logits.size(1);
  const auto& lv = logits.data();
  std::vector<double> out(static_cast<size_t>(n * k));
  for (int64_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * k;
    double mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (int64_t j = 0; j < k; ++j) out[i * k + j] = std::exp(row[j] - mx) / z;
  }
  return out;
}

Tensor forward_op(Tape& tape, std::string_view op_kind, const std::vector<Tensor>& inputs,
                  const OpAttrs& attrs) {
  auto arity = [&](size_t want) {
    require(inputs.size() == want, "forward_op",
            std::string(op_kind) + " expects " + std::to_string(want) + " inputs, got " +
                std::to_string(inputs.size()));
  };
  if (op_kind == "add") {
    arity(2);
    return add(tape, inputs[0], inputs[1]);
  }
  if (op_kind == "scalar_multiply") {
    arity(1);
    return scale(tape, inputs[0], attrs.alpha);
  }
  if (op_kind == "matmul") {
    arity(2);
    return matmul(tape, inputs[0], inputs[1]);
  }
  if (op_kind == "conv2d") {
    require(inputs.size() == 2 || inputs.size() == 3, "forward_op", "conv2d expects 2 or 3 inputs");
    Tensor bias = inputs.size() == 3 ? inputs[2] : Tensor();
    return conv2d(tape, inputs[0], inputs[1], bias, attrs.stride, attrs.pad);
  }
  if (op_kind == "relu") {
    arity(1);
    return relu(tape, inputs[0]);
  }
  if (op_kind == "avg_pool2d") {
    arity(1);
    return avg_pool2d(tape, inputs[0], attrs.kh, attrs.kw, attrs.sh ? attrs.sh : attrs.kh,
                      attrs.sw ? attrs.sw : attrs.kw);
  }
  if (op_kind == "batchnorm") {
    arity(1);
    return batchnorm(tape, inputs[0], attrs.gamma, attrs.beta, attrs.bn);
  }
  if (op_kind == "flatten") {
    arity(1);
    return flatten(tape, inputs[0]);
  }
  if (op_kind == "reshape") {
    arity(1);
    return reshape(tape, inputs[0], attrs.new_shape);
  }
  if (op_kind == "sum") {
    arity(1);
    return sum(tape, inputs[0]);
  }
  if (op_kind == "softmax_cross_entropy") {
    arity(1);
    return softmax_cross_entropy(tape, inputs[0], attrs.labels).total;
  }
  throw std::invalid_argument("forward_op: unknown op kind '" + std::string(op_kind) + "'");
}

}  // namespace ops
}  // namespace resprobe
