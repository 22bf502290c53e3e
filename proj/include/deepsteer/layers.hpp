#pragma once

#include <array>
#include <span>
#include <string_view>
#include <vector>

#include "deepsteer/ops.hpp"

namespace deepsteer {

// ---------------------------------------------------------------------------
// ST-Conv layer: dropout(relu(stconv(x))).

template <typename Real>
struct StconvLayerCache {
  Tensor4<Real> pre;   // convolution output before ReLU
  Tensor4<Real> post;  // ReLU output
  Tensor4<Real> mask;
  double keep_prob = 1.0;
};

template <typename Real, typename Rng>
Tensor4<Real> stconv_layer_forward(const Tensor4<Real>& x, const Kernel5<Real>& kernel,
                                   Stride2 stride, double keep_prob, bool training, Rng& rng,
                                   StconvLayerCache<Real>* cache = nullptr) {
  Tensor4<Real> pre = stconv_forward(x, kernel, stride);
  Tensor4<Real> post = pointwise(Activation::relu, pre);
  auto dropped = dropout_apply(post, keep_prob, rng, training);
  if (cache != nullptr) {
    cache->pre = std::move(pre);
    cache->post = std::move(post);
    cache->mask = std::move(dropped.mask);
    cache->keep_prob = keep_prob;
  }
  return std::move(dropped.y);
}

template <typename Real>
StconvGrads<Real> stconv_layer_backward(const Tensor4<Real>& x, const Kernel5<Real>& kernel,
                                        Stride2 stride, const StconvLayerCache<Real>& cache,
                                        const Tensor4<Real>& grad_out,
                                        bool need_input_grad = true) {
  Tensor4<Real> g_post(grad_out.dims());
  auto gd = dropout_backward<Real>(cache.mask.values(), cache.keep_prob, grad_out.values());
  std::copy(gd.begin(), gd.end(), g_post.values().begin());
  Tensor4<Real> g_pre = pointwise_backward(Activation::relu, cache.pre, cache.post, g_post);
  return stconv_backward(x, kernel, stride, g_pre, need_input_grad);
}

// ---------------------------------------------------------------------------
// Convolutional LSTM.

enum class HiddenUpdate {
  standard,    // H_t = o_t * tanh(C_t)
  as_printed,  // H_t = o_t * tanh(C_{t-1})
};

enum class PadMode {
  symmetric,  // (k-1)/2 zeros before, the remainder after
  trailing,   // all padding after (right/bottom)
};

enum Gate : std::size_t { gate_i = 0, gate_o = 1, gate_f = 2, gate_c = 3 };
inline constexpr std::array<std::string_view, 4> kGateNames{"i", "o", "f", "c"};

template <typename Real>
struct ConvLstmParams {
  std::array<Kernel5<Real>, 4> wx;  // input-to-state, indexed by Gate
  std::array<Kernel5<Real>, 4> wh;  // state-to-state
  std::array<std::vector<Real>, 4> b;

  ConvLstmParams() = default;
  ConvLstmParams(std::size_t in_channels, std::size_t hidden, std::size_t kw = 3,
                 std::size_t kh = 3) {
    for (std::size_t g = 0; g < 4; ++g) {
      wx[g] = Kernel5<Real>(Dims5{kw, kh, in_channels, hidden, 1});
      wh[g] = Kernel5<Real>(Dims5{kw, kh, hidden, hidden, 1});
      b[g].assign(hidden, Real(0));
    }
  }

  std::size_t hidden() const { return wx[0].dims().c_out; }
  std::size_t in_channels() const { return wx[0].dims().c_in; }

  bool operator==(const ConvLstmParams&) const = default;
};

template <typename Real>
struct ConvLstmState {
  Tensor4<Real> c;
  Tensor4<Real> h;

  static ConvLstmState zeros(Dims4 d) { return {Tensor4<Real>(d), Tensor4<Real>(d)}; }
};

struct ConvLstmOptions {
  HiddenUpdate rule = HiddenUpdate::standard;
  bool use_bias = true;
  PadMode pad = PadMode::symmetric;
};

template <typename Real>
struct ConvLstmStepCache {
  Tensor4<Real> x;
  Tensor4<Real> h_padded;
  Tensor4<Real> c_prev;
  std::array<Tensor4<Real>, 4> gate;  // i, o, f post-sigmoid; c candidate post-tanh
  Tensor4<Real> tanh_c;               // tanh of whichever cell state feeds H
};

namespace detail {

inline std::pair<std::size_t, std::size_t> pad_split(std::size_t total, PadMode mode) {
  if (mode == PadMode::trailing) return {0, total};
  return {total / 2, total - total / 2};
}

template <typename Real>
Tensor4<Real> zero_pad(const Tensor4<Real>& h, Dims4 target, PadMode mode) {
  const Dims4& d = h.dims();
  if (target.w < d.w || target.h < d.h || target.c != d.c || target.t != d.t) {
    throw DimensionError("zero_pad: cannot pad " + d.str() + " to " + target.str());
  }
  const std::size_t ox = pad_split(target.w - d.w, mode).first;
  const std::size_t oy = pad_split(target.h - d.h, mode).first;
  Tensor4<Real> out(target);
  for (std::size_t t = 0; t < d.t; ++t)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t x = 0; x < d.w; ++x) out(x + ox, y + oy, c, t) = h(x, y, c, t);
  return out;
}

template <typename Real>
Tensor4<Real> crop_padding(const Tensor4<Real>& padded, Dims4 inner, PadMode mode) {
  const Dims4& d = padded.dims();
  const std::size_t ox = pad_split(d.w - inner.w, mode).first;
  const std::size_t oy = pad_split(d.h - inner.h, mode).first;
  Tensor4<Real> out(inner);
  for (std::size_t t = 0; t < inner.t; ++t)
    for (std::size_t c = 0; c < inner.c; ++c)
      for (std::size_t y = 0; y < inner.h; ++y)
        for (std::size_t x = 0; x < inner.w; ++x) out(x, y, c, t) = padded(x + ox, y + oy, c, t);
  return out;
}

template <typename Real>
void add_inplace(Tensor4<Real>& a, const Tensor4<Real>& b) {
  if (a.dims() != b.dims()) throw DimensionError("add: " + a.dims().str() + " vs " + b.dims().str());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename Real>
void add_inplace(std::span<Real> a, std::span<const Real> b) {
  if (a.size() != b.size()) throw DimensionError("add: length mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

}  // namespace detail

/// Hidden/cell extents produced by a ConvLSTM over inputs of extents `x`.
template <typename Real>
Dims4 convlstm_state_dims(const Dims4& x, const ConvLstmParams<Real>& p) {
  const Dims5& k = p.wx[0].dims();
  if (k.kw > x.w || k.kh > x.h) throw DimensionError("convlstm: kernel larger than input");
  return Dims4{x.w - k.kw + 1, x.h - k.kh + 1, p.hidden(), 1};
}

/// One ConvLSTM time step. `x_t` must be a single time slice whose spatial
/// extents exceed the state's by the kernel size minus one.
template <typename Real>
ConvLstmState<Real> convlstm_step(const Tensor4<Real>& x_t, const ConvLstmState<Real>& state,
                                  const ConvLstmParams<Real>& params,
                                  const ConvLstmOptions& opts = {},
                                  ConvLstmStepCache<Real>* cache = nullptr) {
  if (x_t.dims().t != 1) throw DimensionError("convlstm_step: x_t must have T == 1");
  if (x_t.dims().c != params.in_channels()) {
    throw DimensionError("convlstm_step: input channels mismatch");
  }
  const Dims4 sd = convlstm_state_dims(x_t.dims(), params);
  if (state.c.dims() != sd || state.h.dims() != sd) {
    throw DimensionError("convlstm_step: state " + state.h.dims().str() + " incompatible with input " +
                         x_t.dims().str() + " (expected " + sd.str() + ")");
  }
  const Dims4 padded_dims{x_t.dims().w, x_t.dims().h, sd.c, 1};
  Tensor4<Real> h_pad = detail::zero_pad(state.h, padded_dims, opts.pad);

  std::array<Tensor4<Real>, 4> gate;
  const std::size_t plane = sd.w * sd.h;
  for (std::size_t g = 0; g < 4; ++g) {
    Tensor4<Real> a = stconv_forward(x_t, params.wx[g], Stride2{1, 1});
    detail::add_inplace(a, stconv_forward(h_pad, params.wh[g], Stride2{1, 1}));
    if (opts.use_bias) {
      for (std::size_t ch = 0; ch < sd.c; ++ch) {
        const Real bias = params.b[g][ch];
        Real* p = a.data() + a.index(0, 0, ch, 0);
        for (std::size_t k = 0; k < plane; ++k) p[k] += bias;
      }
    }
    gate[g] = pointwise(g == gate_c ? Activation::tanh : Activation::sigmoid, a);
  }

  ConvLstmState<Real> next{Tensor4<Real>(sd), Tensor4<Real>(sd)};
  for (std::size_t k = 0; k < sd.size(); ++k) {
    next.c[k] = gate[gate_f][k] * state.c[k] + gate[gate_i][k] * gate[gate_c][k];
  }
  const Tensor4<Real>& feeds_h = opts.rule == HiddenUpdate::standard ? next.c : state.c;
  Tensor4<Real> tanh_c = pointwise(Activation::tanh, feeds_h);
  for (std::size_t k = 0; k < sd.size(); ++k) next.h[k] = gate[gate_o][k] * tanh_c[k];

  if (cache != nullptr) {
    cache->x = x_t;
    cache->h_padded = std::move(h_pad);
    cache->c_prev = state.c;
    cache->gate = std::move(gate);
    cache->tanh_c = std::move(tanh_c);
  }
  return next;
}

template <typename Real>
struct ConvLstmStepGrads {
  Tensor4<Real> x;
  Tensor4<Real> h_prev;
  Tensor4<Real> c_prev;
};

/// Backward through one step given dL/dH_t and dL/dC_t (the latter from the
/// next step). Parameter gradients are accumulated into `grads`.
template <typename Real>
ConvLstmStepGrads<Real> convlstm_step_backward(const ConvLstmParams<Real>& params,
                                               const ConvLstmOptions& opts,
                                               const ConvLstmStepCache<Real>& cache,
                                               const Tensor4<Real>& grad_h,
                                               const Tensor4<Real>& grad_c,
                                               ConvLstmParams<Real>& grads) {
  const Dims4 sd = cache.c_prev.dims();
  const auto& gi = cache.gate[gate_i];
  const auto& go = cache.gate[gate_o];
  const auto& gf = cache.gate[gate_f];
  const auto& gc = cache.gate[gate_c];

  Tensor4<Real> dc = grad_c;
  Tensor4<Real> dc_prev(sd);
  std::array<Tensor4<Real>, 4> da{Tensor4<Real>(sd), Tensor4<Real>(sd), Tensor4<Real>(sd),
                                  Tensor4<Real>(sd)};
  for (std::size_t k = 0; k < sd.size(); ++k) {
    const Real th = cache.tanh_c[k];
    da[gate_o][k] = grad_h[k] * th;
    const Real through_tanh = grad_h[k] * go[k] * (Real(1) - th * th);
    if (opts.rule == HiddenUpdate::standard) {
      dc[k] += through_tanh;
    } else {
      dc_prev[k] += through_tanh;
    }
  }
  for (std::size_t k = 0; k < sd.size(); ++k) {
    const Real d = dc[k];
    da[gate_i][k] = d * gc[k];
    da[gate_c][k] = d * gi[k];
    da[gate_f][k] = d * cache.c_prev[k];
    dc_prev[k] += d * gf[k];
  }
  for (std::size_t k = 0; k < sd.size(); ++k) {
    da[gate_i][k] *= gi[k] * (Real(1) - gi[k]);
    da[gate_o][k] *= go[k] * (Real(1) - go[k]);
    da[gate_f][k] *= gf[k] * (Real(1) - gf[k]);
    da[gate_c][k] *= Real(1) - gc[k] * gc[k];
  }

  ConvLstmStepGrads<Real> out{Tensor4<Real>(cache.x.dims()), Tensor4<Real>(sd), std::move(dc_prev)};
  Tensor4<Real> dh_pad(cache.h_padded.dims());
  const std::size_t plane = sd.w * sd.h;
  for (std::size_t g = 0; g < 4; ++g) {
    auto gx = stconv_backward(cache.x, params.wx[g], Stride2{1, 1}, da[g]);
    auto gh = stconv_backward(cache.h_padded, params.wh[g], Stride2{1, 1}, da[g]);
    detail::add_inplace(out.x, gx.input);
    detail::add_inplace(dh_pad, gh.input);
    detail::add_inplace<Real>(grads.wx[g].values(), gx.kernel.values());
    detail::add_inplace<Real>(grads.wh[g].values(), gh.kernel.values());
    if (opts.use_bias) {
      for (std::size_t ch = 0; ch < sd.c; ++ch) {
        Real acc = 0;
        const Real* p = da[g].data() + da[g].index(0, 0, ch, 0);
        for (std::size_t k = 0; k < plane; ++k) acc += p[k];
        grads.b[g][ch] += acc;
      }
    }
  }
  out.h_prev = detail::crop_padding(dh_pad, sd, opts.pad);
  return out;
}

// ---------------------------------------------------------------------------
// Vector LSTM (standard, no peepholes). Gate rows are stacked [i; f; o; g].

template <typename Real>
struct VectorLstmParams {
  DenseWeights<Real> input;     // (4*hidden) x in, with bias
  std::vector<Real> recurrent;  // (4*hidden) x hidden, row-major
  std::size_t hidden = 0;

  VectorLstmParams() = default;
  VectorLstmParams(std::size_t in, std::size_t hid)
      : input(4 * hid, in), recurrent(4 * hid * hid, Real(0)), hidden(hid) {}

  std::size_t input_dim() const { return input.cols; }

  bool operator==(const VectorLstmParams&) const = default;
};

template <typename Real>
struct VectorLstmState {
  std::vector<Real> c;
  std::vector<Real> h;

  static VectorLstmState zeros(std::size_t n) {
    return {std::vector<Real>(n, Real(0)), std::vector<Real>(n, Real(0))};
  }
};

template <typename Real>
struct VectorLstmCache {
  std::vector<Real> x, h_prev, c_prev;
  std::vector<Real> i, f, o, g;
  std::vector<Real> c, tanh_c;
};

template <typename Real>
std::vector<Real> vector_lstm_step(std::span<const Real> x, VectorLstmState<Real>& state,
                                   const VectorLstmParams<Real>& p,
                                   VectorLstmCache<Real>* cache = nullptr) {
  const std::size_t n = p.hidden;
  if (x.size() != p.input_dim()) {
    throw DimensionError("vector_lstm_step: input length " + std::to_string(x.size()) +
                         " != " + std::to_string(p.input_dim()));
  }
  if (state.h.size() != n || state.c.size() != n) {
    throw DimensionError("vector_lstm_step: state length mismatch");
  }
  std::vector<Real> a = dense_forward(p.input, x);
  for (std::size_t r = 0; r < 4 * n; ++r) {
    const Real* row = &p.recurrent[r * n];
    Real acc = 0;
    for (std::size_t k = 0; k < n; ++k) acc += row[k] * state.h[k];
    a[r] += acc;
  }
  VectorLstmCache<Real> local;
  VectorLstmCache<Real>& cc = cache != nullptr ? *cache : local;
  cc.x.assign(x.begin(), x.end());
  cc.h_prev = state.h;
  cc.c_prev = state.c;
  cc.i.resize(n);
  cc.f.resize(n);
  cc.o.resize(n);
  cc.g.resize(n);
  cc.c.resize(n);
  cc.tanh_c.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    cc.i[k] = activate(Activation::sigmoid, a[k]);
    cc.f[k] = activate(Activation::sigmoid, a[n + k]);
    cc.o[k] = activate(Activation::sigmoid, a[2 * n + k]);
    cc.g[k] = std::tanh(a[3 * n + k]);
    cc.c[k] = cc.f[k] * state.c[k] + cc.i[k] * cc.g[k];
    cc.tanh_c[k] = std::tanh(cc.c[k]);
  }
  state.c = cc.c;
  state.h.resize(n);
  for (std::size_t k = 0; k < n; ++k) state.h[k] = cc.o[k] * cc.tanh_c[k];
  return state.h;
}

template <typename Real>
struct VectorLstmStepGrads {
  std::vector<Real> x, h_prev, c_prev;
};

template <typename Real>
VectorLstmStepGrads<Real> vector_lstm_step_backward(const VectorLstmParams<Real>& p,
                                                    const VectorLstmCache<Real>& cc,
                                                    std::span<const Real> grad_h,
                                                    std::span<const Real> grad_c,
                                                    VectorLstmParams<Real>& grads) {
  const std::size_t n = p.hidden;
  std::vector<Real> da(4 * n);
  VectorLstmStepGrads<Real> out;
  out.c_prev.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const Real th = cc.tanh_c[k];
    const Real dc = grad_c[k] + grad_h[k] * cc.o[k] * (Real(1) - th * th);
    const Real dout = grad_h[k] * th;
    da[k] = dc * cc.g[k] * cc.i[k] * (Real(1) - cc.i[k]);
    da[n + k] = dc * cc.c_prev[k] * cc.f[k] * (Real(1) - cc.f[k]);
    da[2 * n + k] = dout * cc.o[k] * (Real(1) - cc.o[k]);
    da[3 * n + k] = dc * cc.i[k] * (Real(1) - cc.g[k] * cc.g[k]);
    out.c_prev[k] = dc * cc.f[k];
  }
  out.x = dense_backward<Real>(p.input, cc.x, da, grads.input);
  out.h_prev.assign(n, Real(0));
  for (std::size_t r = 0; r < 4 * n; ++r) {
    const Real g = da[r];
    if (g == Real(0)) continue;
    const Real* row = &p.recurrent[r * n];
    Real* grow = &grads.recurrent[r * n];
    for (std::size_t k = 0; k < n; ++k) {
      grow[k] += g * cc.h_prev[k];
      out.h_prev[k] += g * row[k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-scale residual aggregation: sum_k P_k * flatten(last time slice of layer k).

template <typename Real>
std::span<const Real> final_slice(const Tensor4<Real>& t) {
  const Dims4& d = t.dims();
  const std::size_t n = d.w * d.h * d.c;
  return t.values().subspan((d.t - 1) * n, n);
}

template <typename Real>
std::vector<Real> residual_aggregate(std::span<const Tensor4<Real>* const> layer_outputs,
                                     std::span<const DenseWeights<Real>* const> projections) {
  if (layer_outputs.size() != projections.size() || layer_outputs.empty()) {
    throw DimensionError("residual_aggregate: need one projection per layer output");
  }
  const std::size_t out_dim = projections[0]->rows;
  std::vector<Real> sum(out_dim, Real(0));
  for (std::size_t k = 0; k < layer_outputs.size(); ++k) {
    auto slice = final_slice(*layer_outputs[k]);
    if (projections[k]->cols != slice.size() || projections[k]->rows != out_dim) {
      throw DimensionError("residual_aggregate: projection " + std::to_string(k) + " expects " +
                           std::to_string(projections[k]->cols) + " inputs, slice has " +
                           std::to_string(slice.size()));
    }
    auto term = dense_forward(*projections[k], slice);
    for (std::size_t r = 0; r < out_dim; ++r) sum[r] += term[r];
  }
  return sum;
}

/// Returns dL/d(layer_k) for each layer (nonzero only in the final slice) and
/// accumulates projection gradients.
template <typename Real>
std::vector<Tensor4<Real>> residual_aggregate_backward(
    std::span<const Tensor4<Real>* const> layer_outputs,
    std::span<const DenseWeights<Real>* const> projections, std::span<const Real> grad_out,
    std::span<DenseWeights<Real>* const> projection_grads) {
  std::vector<Tensor4<Real>> grads;
  grads.reserve(layer_outputs.size());
  for (std::size_t k = 0; k < layer_outputs.size(); ++k) {
    const Tensor4<Real>& layer = *layer_outputs[k];
    auto gx = dense_backward<Real>(*projections[k], final_slice(layer), grad_out,
                                   *projection_grads[k]);
    Tensor4<Real> g(layer.dims());
    const std::size_t off = (layer.dims().t - 1) * gx.size();
    std::copy(gx.begin(), gx.end(), g.values().begin() + static_cast<std::ptrdiff_t>(off));
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace deepsteer
