#include "continuum/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace continuum {

namespace {

std::atomic<long> g_live_tensors{0};
std::atomic<long> g_peak_live_tensors{0};
std::atomic<std::uint64_t> g_next_node_id{1};

thread_local bool g_grad_enabled = true;

void note_live(long live) {
  long peak = g_peak_live_tensors.load(std::memory_order_relaxed);
  while (live > peak && !g_peak_live_tensors.compare_exchange_weak(
                            peak, live, std::memory_order_relaxed)) {
  }
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

[[noreturn]] void shape_fail(const std::string& op, const Tensor& a,
                             const Tensor& b) {
  throw ShapeError(op + ": shape mismatch " + shape_str(a.shape) + " vs " +
                   shape_str(b.shape));
}

// Records `out = f(parents...)`. The closure receives the output node and must
// push its grad into the parents. Recording is skipped when grad mode is off
// or no parent wants gradients; the op then behaves as a pure value.
void record(const TensorPtr& out, std::vector<TensorPtr> parents,
            std::function<void(Tensor&)> fn) {
  if (!grad_enabled()) return;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (!needs) return;
  out->requires_grad = true;
  out->parents = std::move(parents);
  out->backward_fn = std::move(fn);
}

struct ConvDims {
  int n, c, h, w;      // input
  int f, k;            // kernel
  int ho, wo;          // output
  bool batched;        // input had an explicit N axis
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel,
                   const Tensor& bias, int padding) {
  if (kernel.shape.size() != 4)
    throw ShapeError("conv2d: kernel must be [F,C,k,k], got " +
                     shape_str(kernel.shape));
  ConvDims d{};
  if (input.shape.size() == 4) {
    d.batched = true;
    d.n = input.shape[0];
    d.c = input.shape[1];
    d.h = input.shape[2];
    d.w = input.shape[3];
  } else if (input.shape.size() == 3) {
    d.batched = false;
    d.n = 1;
    d.c = input.shape[0];
    d.h = input.shape[1];
    d.w = input.shape[2];
  } else {
    throw ShapeError("conv2d: input must be [N,C,H,W] or [C,H,W], got " +
                     shape_str(input.shape));
  }
  d.f = kernel.shape[0];
  d.k = kernel.shape[2];
  if (kernel.shape[2] != kernel.shape[3])
    throw ShapeError("conv2d: kernel window must be square, got " +
                     shape_str(kernel.shape));
  if (d.k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  if (kernel.shape[1] != d.c)
    throw ShapeError("conv2d: kernel expects " +
                     std::to_string(kernel.shape[1]) + " input channels, got " +
                     std::to_string(d.c));
  if (bias.shape != Shape{d.f})
    throw ShapeError("conv2d: bias must be [F]=[" + std::to_string(d.f) +
                     "], got " + shape_str(bias.shape));
  if (padding < 0) throw ShapeError("conv2d: padding must be non-negative");
  d.ho = d.h + 2 * padding - d.k + 1;
  d.wo = d.w + 2 * padding - d.k + 1;
  if (d.ho < 1 || d.wo < 1)
    throw ShapeError("conv2d: output would be empty for input " +
                     shape_str(input.shape) + ", kernel " +
                     shape_str(kernel.shape) + ", padding " +
                     std::to_string(padding));
  return d;
}

// out[n,f,:,:] += sum_c corr(in[n,c,:,:], ker[f,c,:,:]); row-contiguous inner
// loops so the compiler can vectorize.
void conv_forward(const double* in, const double* ker, const double* bias,
                  double* out, const ConvDims& d, int p) {
  const int H = d.h, W = d.w, Ho = d.ho, Wo = d.wo, K = d.k;
  for (int n = 0; n < d.n; ++n) {
    for (int f = 0; f < d.f; ++f) {
      double* oplane = out + (static_cast<std::size_t>(n) * d.f + f) * Ho * Wo;
      std::fill(oplane, oplane + static_cast<std::size_t>(Ho) * Wo, bias[f]);
      for (int c = 0; c < d.c; ++c) {
        const double* iplane =
            in + (static_cast<std::size_t>(n) * d.c + c) * H * W;
        const double* kwin =
            ker + (static_cast<std::size_t>(f) * d.c + c) * K * K;
        for (int ky = 0; ky < K; ++ky) {
          const int y0 = std::max(0, p - ky);
          const int y1 = std::min(Ho, H + p - ky);
          for (int kx = 0; kx < K; ++kx) {
            const double kv = kwin[ky * K + kx];
            const int x0 = std::max(0, p - kx);
            const int x1 = std::min(Wo, W + p - kx);
            if (x1 <= x0) continue;
            for (int y = y0; y < y1; ++y) {
              const double* irow = iplane + (y + ky - p) * W + (x0 + kx - p);
              double* orow = oplane + y * Wo + x0;
              for (int i = 0; i < x1 - x0; ++i) orow[i] += kv * irow[i];
            }
          }
        }
      }
    }
  }
}

void conv_backward(const double* in, const double* ker, const double* gout,
                   double* gin, double* gker, double* gbias, const ConvDims& d,
                   int p) {
  const int H = d.h, W = d.w, Ho = d.ho, Wo = d.wo, K = d.k;
  for (int n = 0; n < d.n; ++n) {
    for (int f = 0; f < d.f; ++f) {
      const double* gplane =
          gout + (static_cast<std::size_t>(n) * d.f + f) * Ho * Wo;
      if (gbias) {
        double s = 0.0;
        for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i)
          s += gplane[i];
        gbias[f] += s;
      }
      for (int c = 0; c < d.c; ++c) {
        const double* iplane =
            in + (static_cast<std::size_t>(n) * d.c + c) * H * W;
        double* giplane =
            gin ? gin + (static_cast<std::size_t>(n) * d.c + c) * H * W
                : nullptr;
        const double* kwin =
            ker + (static_cast<std::size_t>(f) * d.c + c) * K * K;
        double* gkwin =
            gker ? gker + (static_cast<std::size_t>(f) * d.c + c) * K * K
                 : nullptr;
        for (int ky = 0; ky < K; ++ky) {
          const int y0 = std::max(0, p - ky);
          const int y1 = std::min(Ho, H + p - ky);
          for (int kx = 0; kx < K; ++kx) {
            const int x0 = std::max(0, p - kx);
            const int x1 = std::min(Wo, W + p - kx);
            if (x1 <= x0) continue;
            const double kv = kwin[ky * K + kx];
            double kacc = 0.0;
            for (int y = y0; y < y1; ++y) {
              const double* grow = gplane + y * Wo + x0;
              const std::size_t ioff =
                  static_cast<std::size_t>(y + ky - p) * W + (x0 + kx - p);
              if (giplane) {
                double* girow = giplane + ioff;
                for (int i = 0; i < x1 - x0; ++i) girow[i] += kv * grow[i];
              }
              if (gkwin) {
                const double* irow = iplane + ioff;
                for (int i = 0; i < x1 - x0; ++i) kacc += grow[i] * irow[i];
              }
            }
            if (gkwin) gkwin[ky * K + kx] += kacc;
          }
        }
      }
    }
  }
}

}  // namespace

int numel(const Shape& shape) {
  int n = 1;
  for (int e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d, bool rg)
    : shape(std::move(s)),
      data(std::move(d)),
      requires_grad(rg),
      node_id(g_next_node_id.fetch_add(1, std::memory_order_relaxed)) {
  note_live(g_live_tensors.fetch_add(1, std::memory_order_relaxed) + 1);
}

Tensor::~Tensor() { g_live_tensors.fetch_sub(1, std::memory_order_relaxed); }

TensorPtr Tensor::create(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (static_cast<std::size_t>(numel(shape)) != data.size())
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  return TensorPtr(new Tensor(std::move(shape), std::move(data), requires_grad));
}

TensorPtr Tensor::zeros(Shape shape, bool requires_grad) {
  int n = numel(shape);
  return TensorPtr(new Tensor(std::move(shape), std::vector<double>(n, 0.0),
                              requires_grad));
}

TensorPtr Tensor::full(Shape shape, double value, bool requires_grad) {
  int n = numel(shape);
  return TensorPtr(new Tensor(std::move(shape), std::vector<double>(n, value),
                              requires_grad));
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
  return TensorPtr(new Tensor(Shape{1}, {value}, requires_grad));
}

TensorPtr Tensor::leaf_like(const Tensor& src, bool requires_grad) {
  return TensorPtr(new Tensor(src.shape, src.data, requires_grad));
}

double Tensor::item() const {
  if (!is_scalar())
    throw ShapeError("item(): tensor is not scalar, shape " + shape_str(shape));
  return data[0];
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::accum_grad(const double* g, std::size_t n) {
  if (n != data.size())
    throw ShapeError("gradient length " + std::to_string(n) +
                     " does not match tensor of " +
                     std::to_string(data.size()));
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) grad[i] += g[i];
}

void Tensor::zero_grad() {
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
}

long Tensor::live_count() {
  return g_live_tensors.load(std::memory_order_relaxed);
}

long Tensor::peak_live_count() {
  return g_peak_live_tensors.load(std::memory_order_relaxed);
}

void Tensor::reset_peak_live_count() {
  g_peak_live_tensors.store(g_live_tensors.load(std::memory_order_relaxed),
                            std::memory_order_relaxed);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::Relu;
  if (name == "softplus") return Activation::Softplus;
  if (name == "sigmoid") return Activation::Sigmoid;
  if (name == "tanh") return Activation::Tanh;
  throw ShapeError("unknown activation '" + name + "'");
}

std::string to_string(Activation kind) {
  switch (kind) {
    case Activation::Relu: return "relu";
    case Activation::Softplus: return "softplus";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Tanh: return "tanh";
  }
  return "?";
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  return add_scaled(a, 1.0, b);
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  return add_scaled(a, -1.0, b);
}

TensorPtr add_scaled(const TensorPtr& a, double c, const TensorPtr& b) {
  if (!same_shape(*a, *b)) shape_fail("add_scaled", *a, *b);
  std::vector<double> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a->data[i] + c * b->data[i];
  auto r = Tensor::create(a->shape, std::move(out));
  record(r, {a, b}, [a, b, c](Tensor& self) {
    if (self.grad.empty()) return;
    if (a->requires_grad) a->accum_grad(self.grad.data(), self.grad.size());
    if (b->requires_grad) {
      std::vector<double> gb(self.grad.size());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = c * self.grad[i];
      b->accum_grad(gb.data(), gb.size());
    }
  });
  return r;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  if (!same_shape(*a, *b)) shape_fail("mul", *a, *b);
  std::vector<double> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * b->data[i];
  auto r = Tensor::create(a->shape, std::move(out));
  record(r, {a, b}, [a, b](Tensor& self) {
    if (self.grad.empty()) return;
    std::vector<double> g(self.grad.size());
    if (a->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * b->data[i];
      a->accum_grad(g.data(), g.size());
    }
    if (b->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * a->data[i];
      b->accum_grad(g.data(), g.size());
    }
  });
  return r;
}

TensorPtr scale(const TensorPtr& a, double c) {
  std::vector<double> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a->data[i];
  auto r = Tensor::create(a->shape, std::move(out));
  record(r, {a}, [a, c](Tensor& self) {
    if (self.grad.empty() || !a->requires_grad) return;
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = c * self.grad[i];
    a->accum_grad(g.data(), g.size());
  });
  return r;
}

TensorPtr identity(const TensorPtr& a) {
  auto r = Tensor::create(a->shape, a->data);
  record(r, {a}, [a](Tensor& self) {
    if (self.grad.empty() || !a->requires_grad) return;
    a->accum_grad(self.grad.data(), self.grad.size());
  });
  return r;
}

TensorPtr sum(const TensorPtr& a) {
  double s = 0.0;
  for (double v : a->data) s += v;
  auto r = Tensor::scalar(s);
  record(r, {a}, [a](Tensor& self) {
    if (self.grad.empty() || !a->requires_grad) return;
    std::vector<double> g(a->data.size(), self.grad[0]);
    a->accum_grad(g.data(), g.size());
  });
  return r;
}

TensorPtr activation(const TensorPtr& a, Activation kind) {
  std::vector<double> out(a->data.size());
  switch (kind) {
    case Activation::Relu:
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
      break;
    case Activation::Softplus:
      for (std::size_t i = 0; i < out.size(); ++i) {
        double x = a->data[i];
        out[i] = x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0)));
      }
      break;
    case Activation::Sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) {
        double x = a->data[i];
        out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                          : std::exp(x) / (1.0 + std::exp(x));
      }
      break;
    case Activation::Tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a->data[i]);
      break;
  }
  auto r = Tensor::create(a->shape, std::move(out));
  record(r, {a}, [a, kind](Tensor& self) {
    if (self.grad.empty() || !a->requires_grad) return;
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      double x = a->data[i];
      switch (kind) {
        case Activation::Relu: d = x > 0.0 ? 1.0 : 0.0; break;
        case Activation::Softplus:
          d = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                       : std::exp(x) / (1.0 + std::exp(x));
          break;
        case Activation::Sigmoid: {
          double s = self.data[i];
          d = s * (1.0 - s);
          break;
        }
        case Activation::Tanh: {
          double t = self.data[i];
          d = 1.0 - t * t;
          break;
        }
      }
      g[i] = d * self.grad[i];
    }
    a->accum_grad(g.data(), g.size());
  });
  return r;
}

TensorPtr reshape(const TensorPtr& a, Shape shape) {
  if (numel(shape) != a->size())
    throw ShapeError("reshape: " + shape_str(a->shape) + " to " +
                     shape_str(shape) + " changes element count");
  auto r = Tensor::create(std::move(shape), a->data);
  record(r, {a}, [a](Tensor& self) {
    if (self.grad.empty() || !a->requires_grad) return;
    a->accum_grad(self.grad.data(), self.grad.size());
  });
  return r;
}

TensorPtr conv2d(const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, int padding) {
  ConvDims d = conv_dims(*input, *kernel, *bias, padding);
  Shape oshape = d.batched ? Shape{d.n, d.f, d.ho, d.wo}
                           : Shape{d.f, d.ho, d.wo};
  std::vector<double> out(static_cast<std::size_t>(numel(oshape)), 0.0);
  conv_forward(input->data.data(), kernel->data.data(), bias->data.data(),
               out.data(), d, padding);
  auto r = Tensor::create(std::move(oshape), std::move(out));
  record(r, {input, kernel, bias}, [input, kernel, bias, d, padding](Tensor& self) {
    if (self.grad.empty()) return;
    std::vector<double> gin, gker, gbias;
    if (input->requires_grad) gin.assign(input->data.size(), 0.0);
    if (kernel->requires_grad) gker.assign(kernel->data.size(), 0.0);
    if (bias->requires_grad) gbias.assign(bias->data.size(), 0.0);
    conv_backward(input->data.data(), kernel->data.data(), self.grad.data(),
                  gin.empty() ? nullptr : gin.data(),
                  gker.empty() ? nullptr : gker.data(),
                  gbias.empty() ? nullptr : gbias.data(), d, padding);
    if (!gin.empty()) input->accum_grad(gin.data(), gin.size());
    if (!gker.empty()) kernel->accum_grad(gker.data(), gker.size());
    if (!gbias.empty()) bias->accum_grad(gbias.data(), gbias.size());
  });
  return r;
}

TensorPtr downsample(const TensorPtr& input) {
  const Shape& s = input->shape;
  if (s.size() != 3 && s.size() != 4)
    throw ShapeError("downsample: input must be [N,C,H,W] or [C,H,W], got " +
                     shape_str(s));
  const bool batched = s.size() == 4;
  const int n = batched ? s[0] : 1;
  const int c = batched ? s[1] : s[0];
  const int h = batched ? s[2] : s[1];
  const int w = batched ? s[3] : s[2];
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("downsample: spatial extents must be even, got " +
                     shape_str(s));
  const int ho = h / 2, wo = w / 2;
  Shape oshape = batched ? Shape{n, c, ho, wo} : Shape{c, ho, wo};
  std::vector<double> out(static_cast<std::size_t>(numel(oshape)));
  std::vector<std::uint32_t> argmax(out.size());
  const double* in = input->data.data();
  std::size_t o = 0;
  for (int p = 0; p < n * c; ++p) {
    const double* plane = in + static_cast<std::size_t>(p) * h * w;
    for (int y = 0; y < ho; ++y) {
      for (int x = 0; x < wo; ++x, ++o) {
        std::size_t base = static_cast<std::size_t>(2 * y) * w + 2 * x;
        std::size_t best = base;
        double m = plane[base];
        const std::size_t cand[3] = {base + 1, base + w, base + w + 1};
        for (std::size_t idx : cand) {
          if (plane[idx] > m) {
            m = plane[idx];
            best = idx;
          }
        }
        out[o] = m;
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  auto r = Tensor::create(std::move(oshape), std::move(out));
  const std::size_t plane_elems = static_cast<std::size_t>(h) * w;
  const std::size_t oplane_elems = static_cast<std::size_t>(ho) * wo;
  record(r, {input},
         [input, argmax = std::move(argmax), plane_elems,
          oplane_elems](Tensor& self) {
           if (self.grad.empty() || !input->requires_grad) return;
           std::vector<double> g(input->data.size(), 0.0);
           for (std::size_t o = 0; o < self.grad.size(); ++o) {
             std::size_t plane = o / oplane_elems;
             g[plane * plane_elems + argmax[o]] += self.grad[o];
           }
           input->accum_grad(g.data(), g.size());
         });
  return r;
}

TensorPtr upsample(const TensorPtr& input) {
  const Shape& s = input->shape;
  if (s.size() != 3 && s.size() != 4)
    throw ShapeError("upsample: input must be [N,C,H,W] or [C,H,W], got " +
                     shape_str(s));
  const bool batched = s.size() == 4;
  const int n = batched ? s[0] : 1;
  const int c = batched ? s[1] : s[0];
  const int h = batched ? s[2] : s[1];
  const int w = batched ? s[3] : s[2];
  const int ho = 2 * h, wo = 2 * w;
  Shape oshape = batched ? Shape{n, c, ho, wo} : Shape{c, ho, wo};
  std::vector<double> out(static_cast<std::size_t>(numel(oshape)));
  const double* in = input->data.data();
  for (int p = 0; p < n * c; ++p) {
    const double* plane = in + static_cast<std::size_t>(p) * h * w;
    double* oplane = out.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double v = plane[y * w + x];
        double* row0 = oplane + (2 * y) * wo + 2 * x;
        row0[0] = v;
        row0[1] = v;
        row0[wo] = v;
        row0[wo + 1] = v;
      }
    }
  }
  auto r = Tensor::create(std::move(oshape), std::move(out));
  record(r, {input}, [input, n, c, h, w](Tensor& self) {
    if (self.grad.empty() || !input->requires_grad) return;
    const int ho = 2 * h, wo = 2 * w;
    std::vector<double> g(input->data.size(), 0.0);
    for (int p = 0; p < n * c; ++p) {
      const double* gplane =
          self.grad.data() + static_cast<std::size_t>(p) * ho * wo;
      double* grow = g.data() + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double* r0 = gplane + (2 * y) * wo + 2 * x;
          grow[y * w + x] = r0[0] + r0[1] + r0[wo] + r0[wo + 1];
        }
      }
    }
    input->accum_grad(g.data(), g.size());
  });
  return r;
}

TensorPtr concat_channels(const TensorPtr& a, const TensorPtr& b) {
  const Shape& sa = a->shape;
  const Shape& sb = b->shape;
  if (sa.size() != sb.size() || (sa.size() != 3 && sa.size() != 4))
    throw ShapeError("concat_channels: ranks differ or unsupported, " +
                     shape_str(sa) + " vs " + shape_str(sb));
  const bool batched = sa.size() == 4;
  const int n = batched ? sa[0] : 1;
  const int ca = batched ? sa[1] : sa[0];
  const int cb = batched ? sb[1] : sb[0];
  const int h = batched ? sa[2] : sa[1];
  const int w = batched ? sa[3] : sa[2];
  const int hb = batched ? sb[2] : sb[1];
  const int wb = batched ? sb[3] : sb[2];
  if ((batched && sb[0] != n) || hb != h || wb != w)
    throw ShapeError("concat_channels: spatial/batch mismatch " +
                     shape_str(sa) + " vs " + shape_str(sb));
  Shape oshape = batched ? Shape{n, ca + cb, h, w} : Shape{ca + cb, h, w};
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> out(static_cast<std::size_t>(numel(oshape)));
  for (int i = 0; i < n; ++i) {
    double* dst = out.data() + static_cast<std::size_t>(i) * (ca + cb) * plane;
    const double* pa = a->data.data() + static_cast<std::size_t>(i) * ca * plane;
    const double* pb = b->data.data() + static_cast<std::size_t>(i) * cb * plane;
    std::copy(pa, pa + ca * plane, dst);
    std::copy(pb, pb + cb * plane, dst + ca * plane);
  }
  auto r = Tensor::create(std::move(oshape), std::move(out));
  record(r, {a, b}, [a, b, n, ca, cb, plane](Tensor& self) {
    if (self.grad.empty()) return;
    if (a->requires_grad) {
      std::vector<double> g(a->data.size());
      for (int i = 0; i < n; ++i)
        std::copy(self.grad.data() + (static_cast<std::size_t>(i) * (ca + cb)) * plane,
                  self.grad.data() + (static_cast<std::size_t>(i) * (ca + cb) + ca) * plane,
                  g.data() + static_cast<std::size_t>(i) * ca * plane);
      a->accum_grad(g.data(), g.size());
    }
    if (b->requires_grad) {
      std::vector<double> g(b->data.size());
      for (int i = 0; i < n; ++i)
        std::copy(self.grad.data() + (static_cast<std::size_t>(i) * (ca + cb) + ca) * plane,
                  self.grad.data() + (static_cast<std::size_t>(i + 1) * (ca + cb)) * plane,
                  g.data() + static_cast<std::size_t>(i) * cb * plane);
      b->accum_grad(g.data(), g.size());
    }
  });
  return r;
}

TensorPtr bce_loss(const TensorPtr& pred, const TensorPtr& target) {
  if (!same_shape(*pred, *target)) shape_fail("bce_loss", *pred, *target);
  constexpr double kEps = 1e-7;
  const std::size_t n = pred->data.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p = std::clamp(pred->data[i], kEps, 1.0 - kEps);
    double t = target->data[i];
    acc += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  }
  auto r = Tensor::scalar(acc / static_cast<double>(n));
  record(r, {pred, target}, [pred, target, n](Tensor& self) {
    if (self.grad.empty() || !pred->requires_grad) return;
    const double g0 = self.grad[0] / static_cast<double>(n);
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) {
      double raw = pred->data[i];
      if (raw < kEps || raw > 1.0 - kEps) {
        g[i] = 0.0;  // clamped region, locally flat
        continue;
      }
      double t = target->data[i];
      g[i] = g0 * (-(t / raw) + (1.0 - t) / (1.0 - raw));
    }
    pred->accum_grad(g.data(), g.size());
  });
  return r;
}

void record_custom(const TensorPtr& out, std::vector<TensorPtr> parents,
                   std::function<void(Tensor&)> fn) {
  record(out, std::move(parents), std::move(fn));
}

void backward_seeded(const TensorPtr& out, const std::vector<double>& seed) {
  if (seed.size() != out->data.size())
    throw ShapeError("backward: seed gradient length mismatch");
  // Collect the reachable recorded subgraph; creation ids give topo order.
  std::vector<Tensor*> order;
  std::unordered_set<Tensor*> seen;
  std::vector<Tensor*> stack{out.get()};
  seen.insert(out.get());
  while (!stack.empty()) {
    Tensor* t = stack.back();
    stack.pop_back();
    order.push_back(t);
    for (const auto& p : t->parents)
      if (p->backward_fn && seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Tensor* a, const Tensor* b) { return a->node_id > b->node_id; });
  out->accum_grad(seed.data(), seed.size());
  for (Tensor* t : order)
    if (t->backward_fn) t->backward_fn(*t);
}

void backward(const TensorPtr& loss) {
  if (!loss->is_scalar())
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss->shape));
  backward_seeded(loss, {1.0});
}

void adam_step(const std::vector<TensorPtr>& params, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
  if (lr <= 0.0) throw std::invalid_argument("adam_step: lr must be positive");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->data.size(), 0.0);
      state.v[i].assign(params[i]->data.size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw ShapeError("adam_step: state does not match parameter list");
  state.step += 1;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (state.m[i].size() != p.data.size())
      throw ShapeError("adam_step: state shape mismatch at param " +
                       std::to_string(i));
    if (p.grad.empty()) continue;
    for (std::size_t j = 0; j < p.data.size(); ++j) {
      double g = p.grad[j];
      state.m[i][j] = beta1 * state.m[i][j] + (1.0 - beta1) * g;
      state.v[i][j] = beta2 * state.v[i][j] + (1.0 - beta2) * g * g;
      double mh = state.m[i][j] / c1;
      double vh = state.v[i][j] / c2;
      p.data[j] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
}

}  // namespace continuum
