#pragma once

#include <cassert>
#include <cmath>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "deepsteer/parallel.hpp"
#include "deepsteer/tensor.hpp"

namespace deepsteer {

/// Spatial stride of a spatio-temporal convolution. Temporal stride is always 1.
struct Stride2 {
  std::size_t w = 1, h = 1;
  bool operator==(const Stride2&) const = default;
};

/// Output extents of a valid (unpadded) convolution.
inline Dims4 stconv_output_dims(const Dims4& in, const Dims5& k, Stride2 s) {
  if (k.c_in != in.c) {
    throw DimensionError("stconv: kernel c_in " + std::to_string(k.c_in) +
                         " != input channels " + std::to_string(in.c));
  }
  if (k.kw > in.w || k.kh > in.h || k.kt > in.t) {
    throw DimensionError("stconv: kernel " + std::to_string(k.kw) + "x" + std::to_string(k.kh) +
                         "x" + std::to_string(k.kt) + " exceeds input " + in.str());
  }
  if (s.w == 0 || s.h == 0) throw DimensionError("stconv: stride must be >= 1");
  return Dims4{(in.w - k.kw) / s.w + 1, (in.h - k.kh) / s.h + 1, k.c_out, in.t - k.kt + 1};
}

template <typename Real>
Tensor4<Real> stconv_forward(const Tensor4<Real>& input, const Kernel5<Real>& kernel,
                             Stride2 stride) {
  const Dims4 od = stconv_output_dims(input.dims(), kernel.dims(), stride);
  const Dims5& kd = kernel.dims();
  Tensor4<Real> out(od);
  const std::size_t sw = stride.w, sh = stride.h;
  parallel_for(od.c, [&](std::size_t co) {
    for (std::size_t t = 0; t < od.t; ++t) {
      Real* out_plane = &out(0, 0, co, t);
      for (std::size_t dt = 0; dt < kd.kt; ++dt) {
        for (std::size_t ci = 0; ci < kd.c_in; ++ci) {
          for (std::size_t ky = 0; ky < kd.kh; ++ky) {
            for (std::size_t kx = 0; kx < kd.kw; ++kx) {
              const Real w = kernel(kx, ky, ci, co, dt);
              for (std::size_t oy = 0; oy < od.h; ++oy) {
                const Real* in_row = input.data() + input.index(kx, oy * sh + ky, ci, t + dt);
                Real* out_row = out_plane + oy * od.w;
                for (std::size_t ox = 0; ox < od.w; ++ox) out_row[ox] += w * in_row[ox * sw];
              }
            }
          }
        }
      }
    }
  });
  assert(out.all_finite() || !input.all_finite());
  return out;
}

template <typename Real>
struct StconvGrads {
  Tensor4<Real> input;
  Kernel5<Real> kernel;
};

/// Gradients of <grad_out, stconv_forward(input, kernel)> w.r.t. input and kernel.
template <typename Real>
StconvGrads<Real> stconv_backward(const Tensor4<Real>& input, const Kernel5<Real>& kernel,
                                  Stride2 stride, const Tensor4<Real>& grad_out,
                                  bool need_input_grad = true) {
  const Dims4 od = stconv_output_dims(input.dims(), kernel.dims(), stride);
  if (grad_out.dims() != od) {
    throw DimensionError("stconv_backward: grad_out " + grad_out.dims().str() + " != output " +
                         od.str());
  }
  const Dims5& kd = kernel.dims();
  StconvGrads<Real> g{Tensor4<Real>(input.dims()), Kernel5<Real>(kd)};
  const std::size_t sw = stride.w, sh = stride.h;

  parallel_for(kd.c_out, [&](std::size_t co) {
    for (std::size_t dt = 0; dt < kd.kt; ++dt) {
      for (std::size_t ci = 0; ci < kd.c_in; ++ci) {
        for (std::size_t ky = 0; ky < kd.kh; ++ky) {
          for (std::size_t kx = 0; kx < kd.kw; ++kx) {
            Real acc = 0;
            for (std::size_t t = 0; t < od.t; ++t) {
              for (std::size_t oy = 0; oy < od.h; ++oy) {
                const Real* in_row = input.data() + input.index(kx, oy * sh + ky, ci, t + dt);
                const Real* g_row = grad_out.data() + grad_out.index(0, oy, co, t);
                for (std::size_t ox = 0; ox < od.w; ++ox) acc += g_row[ox] * in_row[ox * sw];
              }
            }
            g.kernel(kx, ky, ci, co, dt) = acc;
          }
        }
      }
    }
  });

  if (!need_input_grad) return g;
  parallel_for(kd.c_in, [&](std::size_t ci) {
    for (std::size_t t = 0; t < od.t; ++t) {
      for (std::size_t co = 0; co < kd.c_out; ++co) {
        for (std::size_t dt = 0; dt < kd.kt; ++dt) {
          for (std::size_t ky = 0; ky < kd.kh; ++ky) {
            for (std::size_t kx = 0; kx < kd.kw; ++kx) {
              const Real w = kernel(kx, ky, ci, co, dt);
              for (std::size_t oy = 0; oy < od.h; ++oy) {
                Real* gi_row = &g.input(kx, oy * sh + ky, ci, t + dt);
                const Real* g_row = grad_out.data() + grad_out.index(0, oy, co, t);
                for (std::size_t ox = 0; ox < od.w; ++ox) gi_row[ox * sw] += w * g_row[ox];
              }
            }
          }
        }
      }
    }
  });
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities.

enum class Activation { sigmoid, tanh, relu };

template <typename Real>
inline Real activate(Activation kind, Real x) {
  switch (kind) {
    case Activation::sigmoid:
      return x >= 0 ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
    case Activation::tanh:
      return std::tanh(x);
    case Activation::relu:
      return x > 0 ? x : Real(0);
  }
  return x;
}

/// Derivative expressed through the input x and output y = activate(kind, x).
template <typename Real>
inline Real activate_derivative(Activation kind, Real x, Real y) {
  switch (kind) {
    case Activation::sigmoid:
      return y * (Real(1) - y);
    case Activation::tanh:
      return Real(1) - y * y;
    case Activation::relu:
      return x > 0 ? Real(1) : Real(0);
  }
  return Real(0);
}

template <typename Real>
void pointwise_inplace(Activation kind, std::span<Real> x) {
  for (Real& v : x) v = activate(kind, v);
}

template <typename Real>
Tensor4<Real> pointwise(Activation kind, const Tensor4<Real>& x) {
  Tensor4<Real> y = x;
  pointwise_inplace<Real>(kind, y.values());
  return y;
}

template <typename Real>
std::vector<Real> pointwise(Activation kind, std::span<const Real> x) {
  std::vector<Real> y(x.begin(), x.end());
  pointwise_inplace<Real>(kind, y);
  return y;
}

/// grad_in = grad_out * f'(x), where y = f(x) is the cached forward output.
template <typename Real>
Tensor4<Real> pointwise_backward(Activation kind, const Tensor4<Real>& x, const Tensor4<Real>& y,
                                 const Tensor4<Real>& grad_out) {
  if (x.dims() != grad_out.dims() || y.dims() != x.dims()) {
    throw DimensionError("pointwise_backward: shape mismatch");
  }
  Tensor4<Real> g(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) {
    g[i] = grad_out[i] * activate_derivative(kind, x[i], y[i]);
  }
  return g;
}

template <typename Real>
std::vector<Real> pointwise_backward(Activation kind, std::span<const Real> x,
                                     std::span<const Real> y, std::span<const Real> grad_out) {
  if (x.size() != grad_out.size() || y.size() != x.size()) {
    throw DimensionError("pointwise_backward: length mismatch");
  }
  std::vector<Real> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    g[i] = grad_out[i] * activate_derivative(kind, x[i], y[i]);
  }
  return g;
}

template <typename Real>
Tensor4<Real> hadamard(const Tensor4<Real>& a, const Tensor4<Real>& b) {
  if (a.dims() != b.dims()) {
    throw DimensionError("hadamard: " + a.dims().str() + " vs " + b.dims().str());
  }
  Tensor4<Real> out(a.dims());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename Real>
struct HadamardGrads {
  Tensor4<Real> a;
  Tensor4<Real> b;
};

template <typename Real>
HadamardGrads<Real> hadamard_backward(const Tensor4<Real>& a, const Tensor4<Real>& b,
                                      const Tensor4<Real>& grad_out) {
  if (a.dims() != b.dims() || a.dims() != grad_out.dims()) {
    throw DimensionError("hadamard_backward: shape mismatch");
  }
  return {hadamard(grad_out, b), hadamard(grad_out, a)};
}

// ---------------------------------------------------------------------------
// Fully-connected layer.

template <typename Real>
std::vector<Real> dense_forward(const DenseWeights<Real>& w, std::span<const Real> x) {
  if (x.size() != w.cols) {
    throw DimensionError("dense_forward: input length " + std::to_string(x.size()) +
                         " != cols " + std::to_string(w.cols));
  }
  std::vector<Real> y(w.bias.begin(), w.bias.end());
  for (std::size_t r = 0; r < w.rows; ++r) {
    const Real* row = &w.weights[r * w.cols];
    Real acc = 0;
    for (std::size_t c = 0; c < w.cols; ++c) acc += row[c] * x[c];
    y[r] += acc;
  }
  return y;
}

/// Accumulates weight/bias gradients into `grad_w` and returns the input gradient.
template <typename Real>
std::vector<Real> dense_backward(const DenseWeights<Real>& w, std::span<const Real> x,
                                 std::span<const Real> grad_out, DenseWeights<Real>& grad_w) {
  if (x.size() != w.cols || grad_out.size() != w.rows) {
    throw DimensionError("dense_backward: length mismatch");
  }
  if (grad_w.rows != w.rows || grad_w.cols != w.cols) {
    throw DimensionError("dense_backward: gradient accumulator shape mismatch");
  }
  std::vector<Real> gx(w.cols, Real(0));
  for (std::size_t r = 0; r < w.rows; ++r) {
    const Real g = grad_out[r];
    grad_w.bias[r] += g;
    if (g == Real(0)) continue;
    const Real* row = &w.weights[r * w.cols];
    Real* grow = &grad_w.weights[r * w.cols];
    for (std::size_t c = 0; c < w.cols; ++c) {
      grow[c] += g * x[c];
      gx[c] += g * row[c];
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Inverted dropout.

template <typename Real>
struct DropoutResult {
  std::vector<Real> y;
  std::vector<Real> mask;  // 0/1 entries
};

inline void check_keep_prob(double keep_prob) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw std::invalid_argument("dropout: keep_prob must lie in (0, 1], got " +
                                std::to_string(keep_prob));
  }
}

/// Training mode draws a Bernoulli(keep_prob) mask and scales survivors by
/// 1/keep_prob. With keep_prob == 1 or in inference mode no random numbers are drawn.
template <typename Real, typename Rng>
DropoutResult<Real> dropout_apply(std::span<const Real> x, double keep_prob, Rng& rng,
                                  bool training) {
  check_keep_prob(keep_prob);
  DropoutResult<Real> r{std::vector<Real>(x.begin(), x.end()), std::vector<Real>(x.size(), Real(1))};
  if (!training || keep_prob == 1.0) return r;
  std::bernoulli_distribution keep(keep_prob);
  const Real scale = Real(1) / static_cast<Real>(keep_prob);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (keep(rng)) {
      r.y[i] = x[i] * scale;
    } else {
      r.y[i] = Real(0);
      r.mask[i] = Real(0);
    }
  }
  return r;
}

template <typename Real>
std::vector<Real> dropout_backward(std::span<const Real> mask, double keep_prob,
                                   std::span<const Real> grad_out) {
  check_keep_prob(keep_prob);
  if (mask.size() != grad_out.size()) throw DimensionError("dropout_backward: length mismatch");
  const Real scale = Real(1) / static_cast<Real>(keep_prob);
  std::vector<Real> g(grad_out.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * mask[i] * scale;
  return g;
}

template <typename Real>
struct TensorDropoutResult {
  Tensor4<Real> y;
  Tensor4<Real> mask;
};

template <typename Real, typename Rng>
TensorDropoutResult<Real> dropout_apply(const Tensor4<Real>& x, double keep_prob, Rng& rng,
                                        bool training) {
  auto r = dropout_apply<Real>(x.values(), keep_prob, rng, training);
  TensorDropoutResult<Real> out{Tensor4<Real>(x.dims()), Tensor4<Real>(x.dims())};
  std::copy(r.y.begin(), r.y.end(), out.y.values().begin());
  std::copy(r.mask.begin(), r.mask.end(), out.mask.values().begin());
  return out;
}

}  // namespace deepsteer
