#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "deepsteer/image_io.hpp"
#include "deepsteer/model.hpp"

namespace deepsteer {

/// Rank-2 map, x fastest.
struct Map2 {
  std::size_t width = 0, height = 0;
  std::vector<double> v;

  Map2() = default;
  Map2(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), v(w * h, fill) {}
  double& at(std::size_t x, std::size_t y) { return v[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return v[y * width + x]; }
  bool operator==(const Map2&) const = default;
};

/// Channel mean of time slice `t`.
template <typename Real>
Map2 mean_map(const Tensor4<Real>& layer, std::size_t t) {
  const Dims4& d = layer.dims();
  if (t >= d.t) throw DimensionError("mean_map: time index " + std::to_string(t) + " out of range for " + d.str());
  Map2 m(d.w, d.h);
  for (std::size_t y = 0; y < d.h; ++y)
    for (std::size_t x = 0; x < d.w; ++x) {
      double s = 0;
      for (std::size_t c = 0; c < d.c; ++c) s += static_cast<double>(layer(x, y, c, t));
      m.at(x, y) = s / static_cast<double>(d.c);
    }
  return m;
}

/// Spatial footprint of the forward convolution that produced a layer from the one below.
struct UpsampleSpec {
  std::size_t kw = 1, kh = 1, sw = 1, sh = 1;
};

/// Transposed convolution with a uniform kernel 1/(kw*kh). Each target pixel
/// averages the source cells whose footprint covers it, so uniform maps stay
/// uniform where footprints overlap; target pixels no footprint reaches (the
/// remainder a valid convolution drops) take the nearest source cell.
inline Map2 upsample_to(const Map2& src, std::size_t tw, std::size_t th, const UpsampleSpec& s) {
  if (s.kw == 0 || s.kh == 0 || s.sw == 0 || s.sh == 0) throw DimensionError("upsample_to: zero spec entry");
  if (tw < src.width || th < src.height || src.width == 0 || src.height == 0) {
    throw DimensionError("upsample_to: target dims must be >= source dims");
  }
  auto range = [](std::size_t p, std::size_t k, std::size_t stride, std::size_t n) {
    // sources i with i*stride <= p < i*stride + k
    const std::size_t hi = std::min(n - 1, p / stride);
    const std::size_t lo = p + 1 > k ? (p + 1 - k + stride - 1) / stride : 0;
    if (lo > hi || hi * stride + k <= p) return std::pair<std::size_t, std::size_t>{hi, hi};
    return std::pair<std::size_t, std::size_t>{lo, hi};
  };
  Map2 out(tw, th);
  const double scale = 1.0 / static_cast<double>(s.kw * s.kh);
  for (std::size_t y = 0; y < th; ++y) {
    const auto [j0, j1] = range(y, s.kh, s.sh, src.height);
    for (std::size_t x = 0; x < tw; ++x) {
      const auto [i0, i1] = range(x, s.kw, s.sw, src.width);
      double sum = 0;
      for (std::size_t j = j0; j <= j1; ++j)
        for (std::size_t i = i0; i <= i1; ++i) sum += src.at(i, j);
      out.at(x, y) = scale * sum / static_cast<double>((i1 - i0 + 1) * (j1 - j0 + 1));
    }
  }
  return out;
}

struct ActivationLayer {
  Tensor4<double> response;
  UpsampleSpec from_below;  // unused for the input layer
};

/// Input layer first, deepest last.
using ActivationStack = std::vector<ActivationLayer>;

struct SaliencyMap {
  Map2 map;              // normalized to [0, 1]
  double lo = 0, hi = 0;  // pre-normalization range
};

/// Mean map of the deepest layer, then repeatedly: upsample to the next
/// shallower layer, multiply by its mean map, add its mean map. The final map
/// is min-max normalized; a flat map normalizes to zeros.
inline SaliencyMap vbp(const ActivationStack& stack) {
  if (stack.empty()) throw std::invalid_argument("vbp: empty activation stack");
  auto final_mean = [](const Tensor4<double>& r) { return mean_map(r, r.dims().t - 1); };
  Map2 cur = final_mean(stack.back().response);
  for (std::size_t k = stack.size() - 1; k-- > 0;) {
    const Map2 below = final_mean(stack[k].response);
    const Map2 up = upsample_to(cur, below.width, below.height, stack[k + 1].from_below);
    cur = Map2(below.width, below.height);
    for (std::size_t i = 0; i < cur.v.size(); ++i) cur.v[i] = up.v[i] * below.v[i] + below.v[i];
  }
  SaliencyMap out;
  out.lo = *std::min_element(cur.v.begin(), cur.v.end());
  out.hi = *std::max_element(cur.v.begin(), cur.v.end());
  out.map = Map2(cur.width, cur.height);
  if (out.hi > out.lo) {
    for (std::size_t i = 0; i < cur.v.size(); ++i) out.map.v[i] = (cur.v[i] - out.lo) / (out.hi - out.lo);
  }
  return out;
}

/// Input frames, each ST-Conv response, and the final ConvLSTM hidden state
/// zero-padded to its input's spatial size, from one inference pass.
template <typename Real>
ActivationStack capture_activations(const Tensor4<Real>& frames, const ModelParams<Real>& params,
                                    const ModelConfig& cfg) {
  std::mt19937_64 rng(0);
  FeatureCache<Real> fc;
  const ShapeTrace tr = shape_trace(cfg);
  extract_features(frames, ConvLstmState<Real>::zeros(tr.convlstm_hidden), params, cfg, false, rng, &fc);
  ActivationStack stack;
  stack.push_back({frames.template cast<double>(), {}});
  for (std::size_t k = 0; k < fc.outputs.size(); ++k) {
    const StconvSpec& s = cfg.stconv_specs[k];
    stack.push_back({fc.outputs[k].template cast<double>(), {s.kw, s.kh, s.stride_w, s.stride_h}});
  }
  if (cfg.use_convlstm) {
    const Dims4 in = tr.convlstm_input;
    const Dims4 hd = fc.h_final.dims();
    Tensor4<double> padded(Dims4{in.w, in.h, hd.c, 1});
    const std::size_t ox = (in.w - hd.w) / 2, oy = (in.h - hd.h) / 2;
    for (std::size_t c = 0; c < hd.c; ++c)
      for (std::size_t y = 0; y < hd.h; ++y)
        for (std::size_t x = 0; x < hd.w; ++x) padded(x + ox, y + oy, c, 0) = static_cast<double>(fc.h_final(x, y, c, 0));
    stack.push_back({std::move(padded), {1, 1, 1, 1}});
  }
  return stack;
}

/// 8-bit quantization used by the heatmap files.
inline std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline Image heatmap_image(const Map2& m) {
  Image img(m.width, m.height, 1);
  for (std::size_t i = 0; i < m.v.size(); ++i) img.pixels[i] = quantize_unit(m.v[i]);
  return img;
}

/// Red heat composited over the frame at alpha 0.5.
inline Image overlay_image(const Map2& m, const Image& frame) {
  if (frame.width != m.width || frame.height != m.height) throw DimensionError("overlay: frame and map dims differ");
  const Image rgb = to_rgb(frame);
  Image out(m.width, m.height, 3);
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      const double heat[3] = {quantize_unit(m.at(x, y)) * 1.0, 0.0, 0.0};
      for (std::size_t c = 0; c < 3; ++c) {
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround(0.5 * rgb.at(x, y, c) + 0.5 * heat[c]));
      }
    }
  return out;
}

inline void emit_heatmap(const Map2& m, const std::filesystem::path& pgm_path, const Image* frame = nullptr,
                         const std::filesystem::path& overlay_path = {}) {
  write_pnm(pgm_path, heatmap_image(m));
  if (frame != nullptr && !overlay_path.empty()) write_pnm(overlay_path, overlay_image(m, *frame));
}

}  // namespace deepsteer
