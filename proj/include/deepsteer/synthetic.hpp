#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "deepsteer/data.hpp"

namespace deepsteer {

/// Angle (radians) per unit of rendered curvature.
inline constexpr double kSyntheticKappa = 0.5;

struct SyntheticSpec {
  std::size_t sequences = 10;
  std::size_t frames_per_sequence = 300;
  std::size_t width = 64, height = 48;
  double curvature_bound = 1.0;
  double walk_sigma = 0.015;   // curvature-velocity innovation per frame
  double walk_damping = 0.9;   // velocity persistence
  double noise = 0.02;         // pixel noise amplitude, fraction of full scale
  double speed_mean = 10.0, speed_noise = 0.2;
  std::uint64_t seed = 1;
  bool negate_curvature = false;  // render and label -c with the same random draws

  bool operator==(const SyntheticSpec&) const = default;
};

struct SyntheticCorpus {
  std::vector<DrivingSequence> sequences;
  std::vector<std::vector<double>> curvature;                 // per sequence, per frame
  std::vector<std::vector<std::vector<std::uint8_t>>> lane;   // per frame, W*H mask (1 on the lane band)
};

inline std::size_t horizon_row(std::size_t height) {
  return static_cast<std::size_t>(std::lround(static_cast<double>(height) * 200.0 / 480.0));
}

/// Dark road under a sky band, with a bright lane band whose centre bends by
/// `curvature` with distance. All geometry is measured from the image centre
/// line, so rendering -c reproduces the left-right flip of +c exactly.
/// `noise_field` (W*H, values in [-1, 1], mirror-symmetric) and `gain` perturb
/// intensities; `lane_mask`, if given, receives the band's pixels.
inline Image render_road(std::size_t w, std::size_t h, double curvature,
                         std::span<const double> noise_field, double noise, double gain,
                         std::vector<std::uint8_t>* lane_mask = nullptr) {
  static constexpr double sky[3] = {70, 90, 130};
  static constexpr double road[3] = {45, 45, 50};
  static constexpr double lane[3] = {235, 225, 170};
  Image img(w, h, 3);
  if (lane_mask != nullptr) lane_mask->assign(w * h, 0);
  const std::size_t hz = horizon_row(h);
  const double half = static_cast<double>(w) / 2.0;
  const double reach = 0.45 * static_cast<double>(w);
  for (std::size_t y = 0; y < h; ++y) {
    double d = 0, hw = -1;
    if (y >= hz) {
      const double z = (static_cast<double>(y - hz) + 0.5) / static_cast<double>(h - hz);
      d = reach * curvature * (1.0 - z) * (1.0 - z);
      hw = static_cast<double>(w) * (0.02 + 0.10 * z);
    }
    for (std::size_t x = 0; x < w; ++x) {
      double cover = 0;
      if (y >= hz) {
        const double u = static_cast<double>(x) - half;  // pixel spans [u, u + 1]
        cover = std::max(0.0, std::min(u + 1.0, d + hw) - std::max(u, d - hw));
      }
      const double n = noise * 255.0 * noise_field[y * w + x];
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = y < hz ? sky[c] : road[c] + cover * (lane[c] - road[c]);
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(base * gain + n), 0L, 255L));
      }
      if (lane_mask != nullptr && cover >= 0.5) (*lane_mask)[y * w + x] = 1;
    }
  }
  return img;
}

/// Seeded corpus with analytic labels: angle = kappa * curvature, torque = d(angle)/dt,
/// speed = constant + noise. Curvature follows a damped, reflected random walk.
inline SyntheticCorpus gen_synthetic(const SyntheticSpec& spec) {
  if (spec.width < 2 || spec.height < 2 || spec.frames_per_sequence == 0) {
    throw DataError("gen_synthetic: invalid spec dims");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double b = spec.curvature_bound;
  const double sign = spec.negate_curvature ? -1.0 : 1.0;
  const double fps = 1000.0 / static_cast<double>(kFramePeriodMs);
  const std::size_t W = spec.width, H = spec.height;

  SyntheticCorpus out;
  for (std::size_t s = 0; s < spec.sequences; ++s) {
    DrivingSequence seq;
    std::vector<double> curv;
    std::vector<std::vector<std::uint8_t>> masks;
    double c = b > 0 ? 0.5 * b * unit(rng) : 0.0;
    double v = 0.0;
    double prev_angle = 0.0;
    std::vector<double> field(W * H);
    for (std::size_t k = 0; k < spec.frames_per_sequence; ++k) {
      if (k > 0 && b > 0) {
        v = spec.walk_damping * v + spec.walk_sigma * gauss(rng);
        c += v;
        while (c > b || c < -b) {
          c = c > b ? 2 * b - c : -2 * b - c;
          v = -v;
        }
      }
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < (W + 1) / 2; ++x) {
          const double r = unit(rng);
          field[y * W + x] = r;
          field[y * W + (W - 1 - x)] = r;
        }
      const double gain = 1.0 + spec.noise * unit(rng);
      const double cs = sign * c;
      std::vector<std::uint8_t> mask;
      seq.frames.push_back(render_road(W, H, cs, field, spec.noise, gain, &mask));
      masks.push_back(std::move(mask));
      DrivingRecord r;
      r.timestamp_ms = static_cast<std::int64_t>(s) * 1000000 + static_cast<std::int64_t>(k) * kFramePeriodMs;
      r.angle = kSyntheticKappa * cs;
      r.torque = k == 0 ? 0.0 : (r.angle - prev_angle) * fps;
      r.speed = spec.speed_mean + spec.speed_noise * gauss(rng);
      prev_angle = r.angle;
      seq.records.push_back(r);
      curv.push_back(cs);
    }
    out.sequences.push_back(std::move(seq));
    out.curvature.push_back(std::move(curv));
    out.lane.push_back(std::move(masks));
  }
  return out;
}

}  // namespace deepsteer
