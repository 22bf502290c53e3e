#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deepsteer/layers.hpp"
#include "deepsteer/loss.hpp"

namespace deepsteer {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// One ST-Conv layer: spatial kernel, spatial stride, output channels, temporal width.
struct StconvSpec {
  std::size_t kw = 1, kh = 1;
  std::size_t stride_w = 1, stride_h = 1;
  std::size_t c_out = 1;
  std::size_t kt = 1;

  bool operator==(const StconvSpec&) const = default;
};

inline constexpr std::size_t kConvLstmKernel = 3;
inline constexpr std::size_t kVehicleDim = 3;

struct ModelConfig {
  std::size_t clip_length = 15;
  std::size_t input_width = 640;
  std::size_t input_height = 480;
  std::vector<StconvSpec> stconv_specs = {
      {16, 16, 6, 6, 24, 3},
      {5, 5, 3, 3, 36, 3},
      {3, 3, 2, 2, 48, 2},
      {1, 3, 1, 1, 64, 1},
  };
  std::size_t convlstm_hidden = 64;
  std::size_t feature_dim = 128;
  std::size_t lstm_hidden = 64;
  double keep_prob = 0.25;
  HiddenUpdate hidden_update_rule = HiddenUpdate::standard;
  std::size_t head_hidden = 64;
  bool convlstm_bias = true;

  // Ablation switches.
  bool use_convlstm = true;
  bool aggregate_conv1 = true;  // skip connection from the first ST-Conv layer
  bool use_prev_output = true;  // feed the previous prediction into both concat layers
  bool teacher_forcing = false;

  static ModelConfig paper_default() { return {}; }

  /// 64x48 configuration sized for CPU training.
  static ModelConfig desk() {
    ModelConfig c;
    c.input_width = 64;
    c.input_height = 48;
    c.stconv_specs = {
        {6, 6, 3, 3, 8, 3},
        {3, 3, 2, 2, 12, 2},
        {3, 3, 1, 1, 16, 3},
    };
    c.convlstm_hidden = 16;
    c.keep_prob = 1.0;
    return c;
  }

  std::size_t concat1_dim() const { return feature_dim + kVehicleDim; }
  std::size_t concat2_dim() const { return feature_dim + lstm_hidden + kVehicleDim; }

  bool operator==(const ModelConfig&) const = default;
};

struct ShapeTrace {
  Dims4 input;
  std::vector<Dims4> stconv;  // output of each ST-Conv layer
  Dims4 convlstm_input;
  Dims4 convlstm_hidden;      // T == 1
};

inline ShapeTrace shape_trace(const ModelConfig& cfg) {
  if (cfg.clip_length == 0 || cfg.input_width == 0 || cfg.input_height == 0) {
    throw ConfigError("shape_trace: input dims must be >= 1");
  }
  if (cfg.stconv_specs.empty()) throw ConfigError("shape_trace: need at least one ST-Conv layer");
  ShapeTrace tr;
  tr.input = Dims4{cfg.input_width, cfg.input_height, 3, cfg.clip_length};
  Dims4 cur = tr.input;
  for (std::size_t k = 0; k < cfg.stconv_specs.size(); ++k) {
    const StconvSpec& s = cfg.stconv_specs[k];
    if (s.kw == 0 || s.kh == 0 || s.kt == 0 || s.c_out == 0 || s.stride_w == 0 || s.stride_h == 0) {
      throw ConfigError("shape_trace: layer " + std::to_string(k + 1) + " has a zero parameter");
    }
    if (s.kw > cur.w || s.kh > cur.h || s.kt > cur.t) {
      throw ConfigError("shape_trace: layer " + std::to_string(k + 1) + " kernel " +
                        std::to_string(s.kw) + "x" + std::to_string(s.kh) + "x" +
                        std::to_string(s.kt) + " does not fit input " + cur.str());
    }
    cur = Dims4{(cur.w - s.kw) / s.stride_w + 1, (cur.h - s.kh) / s.stride_h + 1, s.c_out,
                cur.t - s.kt + 1};
    tr.stconv.push_back(cur);
  }
  tr.convlstm_input = cur;
  if (cur.w < kConvLstmKernel || cur.h < kConvLstmKernel) {
    throw ConfigError("shape_trace: ConvLSTM input " + cur.str() + " smaller than its 3x3 kernel");
  }
  if (cfg.convlstm_hidden == 0) throw ConfigError("shape_trace: convlstm_hidden must be >= 1");
  tr.convlstm_hidden = Dims4{cur.w - kConvLstmKernel + 1, cur.h - kConvLstmKernel + 1,
                             cfg.convlstm_hidden, 1};
  return tr;
}

inline void validate_config(const ModelConfig& cfg) {
  shape_trace(cfg);
  if (cfg.feature_dim == 0 || cfg.lstm_hidden == 0 || cfg.head_hidden == 0) {
    throw ConfigError("config: feature_dim, lstm_hidden and head_hidden must be >= 1");
  }
  if (!(cfg.keep_prob > 0.0 && cfg.keep_prob <= 1.0)) {
    throw ConfigError("config: keep_prob must lie in (0, 1]");
  }
}

// ---------------------------------------------------------------------------
// Parameters.

template <typename Real>
struct ModelParams {
  std::vector<Kernel5<Real>> conv;
  ConvLstmParams<Real> convlstm;
  std::vector<DenseWeights<Real>> projections;  // one per ST-Conv layer, then the ConvLSTM
  VectorLstmParams<Real> lstm;
  DenseWeights<Real> head_hidden;
  DenseWeights<Real> head_out;

  ModelParams() = default;

  /// Zero-valued parameters shaped for `cfg`.
  explicit ModelParams(const ModelConfig& cfg) {
    const ShapeTrace tr = shape_trace(cfg);
    Dims4 in = tr.input;
    for (std::size_t k = 0; k < cfg.stconv_specs.size(); ++k) {
      const StconvSpec& s = cfg.stconv_specs[k];
      conv.emplace_back(Dims5{s.kw, s.kh, in.c, s.c_out, s.kt});
      const Dims4& out = tr.stconv[k];
      projections.emplace_back(cfg.feature_dim, out.w * out.h * out.c);
      in = out;
    }
    convlstm = ConvLstmParams<Real>(tr.convlstm_input.c, cfg.convlstm_hidden, kConvLstmKernel,
                                    kConvLstmKernel);
    const Dims4& hd = tr.convlstm_hidden;
    projections.emplace_back(cfg.feature_dim, hd.w * hd.h * hd.c);
    lstm = VectorLstmParams<Real>(cfg.concat1_dim(), cfg.lstm_hidden);
    head_hidden = DenseWeights<Real>(cfg.head_hidden, cfg.concat2_dim());
    head_out = DenseWeights<Real>(kVehicleDim, cfg.head_hidden);
  }

  /// Calls f(name, values, shape) for every parameter block in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, auto values, const std::vector<std::size_t>&) { n += values.size(); });
    return n;
  }

  bool operator==(const ModelParams&) const = default;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    for (std::size_t k = 0; k < self.conv.size(); ++k) {
      const Dims5& d = self.conv[k].dims();
      f("conv" + std::to_string(k + 1) + ".kernel", self.conv[k].values(),
        std::vector<std::size_t>{d.kw, d.kh, d.c_in, d.c_out, d.kt});
    }
    for (std::size_t g = 0; g < 4; ++g) {
      const std::string gate(kGateNames[g]);
      const Dims5& dx = self.convlstm.wx[g].dims();
      f("convlstm.W_x" + gate, self.convlstm.wx[g].values(),
        std::vector<std::size_t>{dx.kw, dx.kh, dx.c_in, dx.c_out, dx.kt});
      const Dims5& dh = self.convlstm.wh[g].dims();
      f("convlstm.W_h" + gate, self.convlstm.wh[g].values(),
        std::vector<std::size_t>{dh.kw, dh.kh, dh.c_in, dh.c_out, dh.kt});
      f("convlstm.b_" + gate, std::span(self.convlstm.b[g]),
        std::vector<std::size_t>{self.convlstm.b[g].size()});
    }
    auto dense = [&](const std::string& name, auto& d) {
      f(name + ".weight", std::span(d.weights), std::vector<std::size_t>{d.rows, d.cols});
      f(name + ".bias", std::span(d.bias), std::vector<std::size_t>{d.rows});
    };
    for (std::size_t k = 0; k < self.projections.size(); ++k) {
      dense("proj" + std::to_string(k + 1), self.projections[k]);
    }
    dense("lstm.input", self.lstm.input);
    f("lstm.recurrent", std::span(self.lstm.recurrent),
      std::vector<std::size_t>{4 * self.lstm.hidden, self.lstm.hidden});
    dense("head.hidden", self.head_hidden);
    dense("head.out", self.head_out);
  }
};

/// Zero-mean uniform weights with scale sqrt(6 / (fan_in + fan_out)); biases zero
/// except forget gates, which start at 1.
template <typename Real>
ModelParams<Real> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<Real> p(cfg);
  std::mt19937_64 rng(seed);
  auto fill = [&](std::span<Real> v, double fan_in, double fan_out) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-a, a);
    for (Real& x : v) x = static_cast<Real>(u(rng));
  };
  auto fill_kernel = [&](Kernel5<Real>& k) {
    const Dims5& d = k.dims();
    const double area = static_cast<double>(d.kw * d.kh * d.kt);
    fill(k.values(), area * static_cast<double>(d.c_in), area * static_cast<double>(d.c_out));
  };
  auto fill_dense = [&](DenseWeights<Real>& d) {
    fill(d.weights, static_cast<double>(d.cols), static_cast<double>(d.rows));
  };
  for (auto& k : p.conv) fill_kernel(k);
  for (std::size_t g = 0; g < 4; ++g) {
    fill_kernel(p.convlstm.wx[g]);
    fill_kernel(p.convlstm.wh[g]);
  }
  if (cfg.convlstm_bias) std::fill(p.convlstm.b[gate_f].begin(), p.convlstm.b[gate_f].end(), Real(1));
  for (auto& d : p.projections) fill_dense(d);
  fill_dense(p.lstm.input);
  const std::size_t n = p.lstm.hidden;
  fill(p.lstm.recurrent, static_cast<double>(n), static_cast<double>(4 * n));
  for (std::size_t k = 0; k < n; ++k) p.lstm.input.bias[n + k] = Real(1);
  fill_dense(p.head_hidden);
  fill_dense(p.head_out);
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass.

template <typename Real>
struct ClipInput {
  Tensor4<Real> frames;  // W x H x 3 x clip_length, values in [0, 1]
  VehicleTriple target;
};

template <typename Real>
struct ModelCarry {
  VehicleTriple prev_output;
  VectorLstmState<Real> lstm;
  ConvLstmState<Real> convlstm;

  static ModelCarry zeros(const ModelConfig& cfg) {
    const ShapeTrace tr = shape_trace(cfg);
    return {VehicleTriple{}, VectorLstmState<Real>::zeros(cfg.lstm_hidden),
            ConvLstmState<Real>::zeros(tr.convlstm_hidden)};
  }
};

inline ConvLstmOptions convlstm_options(const ModelConfig& cfg) {
  return ConvLstmOptions{cfg.hidden_update_rule, cfg.convlstm_bias, PadMode::symmetric};
}

template <typename Real>
struct FeatureCache {
  std::vector<StconvLayerCache<Real>> conv;
  std::vector<Tensor4<Real>> outputs;
  std::vector<ConvLstmStepCache<Real>> steps;
  Tensor4<Real> h_final;
};

template <typename Real>
struct FeatureResult {
  std::vector<Real> feature;
  ConvLstmState<Real> convlstm_state;
};

namespace detail {

/// Layer outputs feeding residual aggregation and the projection used for each.
template <typename Real>
void aggregation_terms(const ModelConfig& cfg, const ModelParams<Real>& params,
                       const std::vector<Tensor4<Real>>& outputs, const Tensor4<Real>& h_final,
                       std::vector<const Tensor4<Real>*>& layers,
                       std::vector<std::size_t>& proj_index) {
  layers.clear();
  proj_index.clear();
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    if (k == 0 && !cfg.aggregate_conv1) continue;
    layers.push_back(&outputs[k]);
    proj_index.push_back(k);
  }
  if (cfg.use_convlstm) {
    layers.push_back(&h_final);
    proj_index.push_back(params.conv.size());
  }
}

}  // namespace detail

/// ST-Conv stack, ConvLSTM unrolled over the surviving time steps, and
/// multi-scale residual aggregation into a feature_dim vector.
template <typename Real, typename Rng>
FeatureResult<Real> extract_features(const Tensor4<Real>& frames,
                                     const ConvLstmState<Real>& convlstm_state,
                                     const ModelParams<Real>& params, const ModelConfig& cfg,
                                     bool training, Rng& rng,
                                     FeatureCache<Real>* cache = nullptr) {
  const ShapeTrace tr = shape_trace(cfg);
  if (frames.dims() != tr.input) {
    throw DimensionError("extract_features: clip " + frames.dims().str() + " != configured " +
                         tr.input.str());
  }
  FeatureCache<Real> local;
  FeatureCache<Real>& fc = cache != nullptr ? *cache : local;
  const std::size_t n_layers = cfg.stconv_specs.size();
  fc.conv.assign(n_layers, {});
  fc.outputs.clear();
  fc.steps.clear();
  const Tensor4<Real>* x = &frames;
  for (std::size_t k = 0; k < n_layers; ++k) {
    const StconvSpec& s = cfg.stconv_specs[k];
    fc.outputs.push_back(stconv_layer_forward(*x, params.conv[k], Stride2{s.stride_w, s.stride_h},
                                              cfg.keep_prob, training, rng, &fc.conv[k]));
    x = &fc.outputs.back();
  }

  FeatureResult<Real> result;
  if (cfg.use_convlstm) {
    const ConvLstmOptions opts = convlstm_options(cfg);
    ConvLstmState<Real> state = convlstm_state;
    if (state.h.dims() != tr.convlstm_hidden) state = ConvLstmState<Real>::zeros(tr.convlstm_hidden);
    const Tensor4<Real>& xin = fc.outputs.back();
    fc.steps.resize(xin.dims().t);
    for (std::size_t t = 0; t < xin.dims().t; ++t) {
      state = convlstm_step(xin.time_slice(t), state, params.convlstm, opts, &fc.steps[t]);
    }
    fc.h_final = state.h;
    result.convlstm_state = std::move(state);
  } else {
    fc.h_final = Tensor4<Real>(tr.convlstm_hidden);
    result.convlstm_state = convlstm_state;
  }

  std::vector<const Tensor4<Real>*> layers;
  std::vector<std::size_t> proj_index;
  detail::aggregation_terms(cfg, params, fc.outputs, fc.h_final, layers, proj_index);
  if (layers.empty()) {
    result.feature.assign(cfg.feature_dim, Real(0));
  } else {
    std::vector<const DenseWeights<Real>*> projs;
    for (std::size_t i : proj_index) projs.push_back(&params.projections[i]);
    result.feature = residual_aggregate<Real>(layers, projs);
  }
  return result;
}

template <typename Real>
struct PredictCache {
  std::vector<Real> concat1;
  std::vector<Real> concat2;
  VectorLstmCache<Real> lstm;
  std::vector<Real> z, r, mask, d;
};

template <typename Real>
struct PredictResult {
  VehicleTriple prediction;
  ModelCarry<Real> carry;
};

/// concat1 = [feature | prev] -> LSTM -> concat2 = [feature | lstm | prev] ->
/// FC+ReLU+dropout -> FC -> (speed, torque, angle).
template <typename Real, typename Rng>
PredictResult<Real> predict_step(std::span<const Real> feature, const ModelCarry<Real>& carry,
                                 const ModelParams<Real>& params, const ModelConfig& cfg,
                                 bool training, Rng& rng, PredictCache<Real>* cache = nullptr) {
  if (feature.size() != cfg.feature_dim) {
    throw DimensionError("predict_step: feature length " + std::to_string(feature.size()) +
                         " != " + std::to_string(cfg.feature_dim));
  }
  PredictCache<Real> local;
  PredictCache<Real>& pc = cache != nullptr ? *cache : local;
  std::array<Real, kVehicleDim> prev{};
  if (cfg.use_prev_output) {
    prev = {static_cast<Real>(carry.prev_output.speed), static_cast<Real>(carry.prev_output.torque),
            static_cast<Real>(carry.prev_output.angle)};
  }
  pc.concat1.assign(feature.begin(), feature.end());
  pc.concat1.insert(pc.concat1.end(), prev.begin(), prev.end());

  PredictResult<Real> out;
  out.carry.lstm = carry.lstm;
  out.carry.convlstm = carry.convlstm;
  const std::vector<Real> h = vector_lstm_step<Real>(pc.concat1, out.carry.lstm, params.lstm, &pc.lstm);

  pc.concat2.assign(feature.begin(), feature.end());
  pc.concat2.insert(pc.concat2.end(), h.begin(), h.end());
  pc.concat2.insert(pc.concat2.end(), prev.begin(), prev.end());

  pc.z = dense_forward<Real>(params.head_hidden, pc.concat2);
  pc.r = pointwise<Real>(Activation::relu, pc.z);
  auto dropped = dropout_apply<Real>(pc.r, cfg.keep_prob, rng, training);
  pc.d = std::move(dropped.y);
  pc.mask = std::move(dropped.mask);
  const std::vector<Real> y = dense_forward<Real>(params.head_out, pc.d);
  out.prediction = VehicleTriple{static_cast<double>(y[0]), static_cast<double>(y[1]),
                                 static_cast<double>(y[2])};
  out.carry.prev_output = out.prediction;
  return out;
}

enum class Feedback {
  model,    // previous prediction
  teacher,  // previous clip's ground truth
};

struct ForwardOptions {
  bool training = false;
  Feedback feedback = Feedback::model;
  /// If nonempty, clip k > 0 receives feedback_override[k-1] as its previous
  /// output regardless of `feedback`.
  std::span<const VehicleTriple> feedback_override = {};
};

template <typename Real>
struct ClipCache {
  FeatureCache<Real> feature;
  PredictCache<Real> predict;
};

namespace detail {

template <typename Real, typename Rng>
std::vector<VehicleTriple> rollout(std::span<const ClipInput<Real>> clips,
                                   const ModelParams<Real>& params, const ModelConfig& cfg,
                                   Rng& rng, const ForwardOptions& opts,
                                   std::vector<ClipCache<Real>>* caches) {
  if (!opts.feedback_override.empty() && opts.feedback_override.size() + 1 < clips.size()) {
    throw std::invalid_argument("model_forward: feedback_override too short");
  }
  std::vector<VehicleTriple> preds;
  preds.reserve(clips.size());
  if (caches != nullptr) caches->assign(clips.size(), {});
  ModelCarry<Real> carry = ModelCarry<Real>::zeros(cfg);
  for (std::size_t k = 0; k < clips.size(); ++k) {
    if (k > 0) {
      if (!opts.feedback_override.empty()) {
        carry.prev_output = opts.feedback_override[k - 1];
      } else if (opts.feedback == Feedback::teacher) {
        carry.prev_output = clips[k - 1].target;
      }
    }
    ClipCache<Real>* cc = caches != nullptr ? &(*caches)[k] : nullptr;
    auto feat = extract_features(clips[k].frames, carry.convlstm, params, cfg, opts.training, rng,
                                 cc != nullptr ? &cc->feature : nullptr);
    carry.convlstm = std::move(feat.convlstm_state);
    auto step = predict_step<Real>(feat.feature, carry, params, cfg, opts.training, rng,
                                   cc != nullptr ? &cc->predict : nullptr);
    carry = std::move(step.carry);
    preds.push_back(step.prediction);
  }
  return preds;
}

}  // namespace detail

/// Hash of every ReLU sign in a cached rollout; changes iff some unit crossed zero.
template <typename Real>
std::uint64_t relu_pattern(const std::vector<ClipCache<Real>>& caches) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](bool bit) { h = (h ^ static_cast<std::uint64_t>(bit ? 0x9e : 0x3c)) * 1099511628211ull; };
  for (const auto& cc : caches) {
    for (const auto& conv : cc.feature.conv) {
      for (Real v : conv.pre.values()) mix(v > Real(0));
    }
    for (Real v : cc.predict.z) mix(v > Real(0));
  }
  return h;
}

/// Threads a fresh (zero) carry through `clips`, which must be contiguous clips
/// of one sequence.
template <typename Real, typename Rng>
std::vector<VehicleTriple> model_forward(std::span<const ClipInput<Real>> clips,
                                         const ModelParams<Real>& params, const ModelConfig& cfg,
                                         Rng& rng, const ForwardOptions& opts = {}) {
  return detail::rollout<Real>(clips, params, cfg, rng, opts, nullptr);
}

template <typename Real>
std::vector<VehicleTriple> model_forward(std::span<const ClipInput<Real>> clips,
                                         const ModelParams<Real>& params, const ModelConfig& cfg) {
  std::mt19937_64 rng(0);
  return model_forward<Real>(clips, params, cfg, rng, ForwardOptions{});
}

template <typename Real>
struct BackwardResult {
  LossBundle loss;
  ModelParams<Real> grads;
  std::vector<VehicleTriple> predictions;
};

/// Loss J over the clips' final-frame targets and its exact gradient by BPTT
/// through every clip's internal steps and through both recurrent states across
/// clips. The previous-output feedback edge is treated as a constant.
template <typename Real, typename Rng>
BackwardResult<Real> model_backward(std::span<const ClipInput<Real>> clips,
                                    const ModelParams<Real>& params, const ModelConfig& cfg,
                                    double gamma, Rng& rng, ForwardOptions opts = {true}) {
  if (clips.empty()) throw std::invalid_argument("model_backward: no clips");
  if (cfg.teacher_forcing && opts.feedback_override.empty()) opts.feedback = Feedback::teacher;
  std::vector<ClipCache<Real>> caches;
  BackwardResult<Real> res;
  res.predictions = detail::rollout<Real>(clips, params, cfg, rng, opts, &caches);
  std::vector<VehicleTriple> targets;
  targets.reserve(clips.size());
  for (const auto& c : clips) targets.push_back(c.target);
  res.loss = compute_loss(res.predictions, targets, gamma);
  const std::vector<VehicleTriple> dpred = loss_gradient(res.predictions, targets, gamma);

  res.grads = ModelParams<Real>(cfg);
  ModelParams<Real>& G = res.grads;
  const ShapeTrace tr = shape_trace(cfg);
  const ConvLstmOptions lstm_opts = convlstm_options(cfg);
  const std::size_t F = cfg.feature_dim;
  const std::size_t n_layers = cfg.stconv_specs.size();

  std::vector<Real> d_lstm_h(cfg.lstm_hidden, Real(0)), d_lstm_c(cfg.lstm_hidden, Real(0));
  Tensor4<Real> d_conv_h(tr.convlstm_hidden), d_conv_c(tr.convlstm_hidden);

  for (std::size_t kk = clips.size(); kk-- > 0;) {
    const ClipCache<Real>& cc = caches[kk];
    const PredictCache<Real>& pc = cc.predict;

    // Prediction head.
    const std::array<Real, kVehicleDim> dy{static_cast<Real>(dpred[kk].speed),
                                           static_cast<Real>(dpred[kk].torque),
                                           static_cast<Real>(dpred[kk].angle)};
    auto dd = dense_backward<Real>(params.head_out, pc.d, dy, G.head_out);
    auto dr = dropout_backward<Real>(pc.mask, cfg.keep_prob, dd);
    auto dz = pointwise_backward<Real>(Activation::relu, pc.z, pc.r, dr);
    auto dconcat2 = dense_backward<Real>(params.head_hidden, pc.concat2, dz, G.head_hidden);

    std::vector<Real> dfeature(dconcat2.begin(), dconcat2.begin() + static_cast<std::ptrdiff_t>(F));
    for (std::size_t k = 0; k < cfg.lstm_hidden; ++k) d_lstm_h[k] += dconcat2[F + k];
    auto lg = vector_lstm_step_backward<Real>(params.lstm, pc.lstm, d_lstm_h, d_lstm_c, G.lstm);
    for (std::size_t k = 0; k < F; ++k) dfeature[k] += lg.x[k];
    d_lstm_h = std::move(lg.h_prev);
    d_lstm_c = std::move(lg.c_prev);

    // Residual aggregation.
    const FeatureCache<Real>& fc = cc.feature;
    std::vector<Tensor4<Real>> d_out;
    d_out.reserve(n_layers);
    for (const auto& o : fc.outputs) d_out.emplace_back(o.dims());
    Tensor4<Real> d_hfinal(tr.convlstm_hidden);
    std::vector<const Tensor4<Real>*> layers;
    std::vector<std::size_t> proj_index;
    detail::aggregation_terms(cfg, params, fc.outputs, fc.h_final, layers, proj_index);
    if (!layers.empty()) {
      std::vector<const DenseWeights<Real>*> projs;
      std::vector<DenseWeights<Real>*> pgrads;
      for (std::size_t i : proj_index) {
        projs.push_back(&params.projections[i]);
        pgrads.push_back(&G.projections[i]);
      }
      auto lgrads = residual_aggregate_backward<Real>(layers, projs, dfeature, pgrads);
      for (std::size_t j = 0; j < proj_index.size(); ++j) {
        if (proj_index[j] < n_layers) {
          detail::add_inplace(d_out[proj_index[j]], lgrads[j]);
        } else {
          detail::add_inplace(d_hfinal, lgrads[j]);
        }
      }
    }

    // ConvLSTM, unrolled backwards over this clip's steps.
    if (cfg.use_convlstm) {
      Tensor4<Real> dh = d_hfinal;
      detail::add_inplace(dh, d_conv_h);
      Tensor4<Real> dc = d_conv_c;
      Tensor4<Real>& dx_all = d_out.back();
      for (std::size_t t = fc.steps.size(); t-- > 0;) {
        auto sg = convlstm_step_backward(params.convlstm, lstm_opts, fc.steps[t], dh, dc, G.convlstm);
        Tensor4<Real> slice = dx_all.time_slice(t);
        detail::add_inplace(slice, sg.x);
        dx_all.set_time_slice(t, slice);
        dh = std::move(sg.h_prev);
        dc = std::move(sg.c_prev);
      }
      d_conv_h = std::move(dh);
      d_conv_c = std::move(dc);
    }

    // ST-Conv stack.
    for (std::size_t k = n_layers; k-- > 0;) {
      const StconvSpec& s = cfg.stconv_specs[k];
      const Tensor4<Real>& input = k == 0 ? clips[kk].frames : fc.outputs[k - 1];
      auto g = stconv_layer_backward(input, params.conv[k], Stride2{s.stride_w, s.stride_h},
                                     fc.conv[k], d_out[k], k > 0);
      detail::add_inplace<Real>(G.conv[k].values(), g.kernel.values());
      if (k > 0) detail::add_inplace(d_out[k - 1], g.input);
    }
  }
  return res;
}

}  // namespace deepsteer
