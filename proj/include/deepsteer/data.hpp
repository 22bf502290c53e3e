#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "deepsteer/image_io.hpp"
#include "deepsteer/loss.hpp"
#include "deepsteer/model.hpp"

namespace deepsteer {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::int64_t kFramePeriodMs = 50;  // 20 FPS
inline constexpr const char* kLogHeader = "timestamp_ms,lat,lon,speed,torque,angle,frame";

struct DrivingRecord {
  std::int64_t timestamp_ms = 0;
  std::optional<double> lat, lon;
  double speed = 0, torque = 0, angle = 0;  // raw units
  std::string frame;                        // path relative to the frames directory

  VehicleTriple triple() const { return {speed, torque, angle}; }
  bool operator==(const DrivingRecord&) const = default;
};

struct DrivingSequence {
  std::vector<DrivingRecord> records;
  std::vector<Image> frames;  // decoded RGB, one per record

  std::size_t size() const { return records.size(); }
  bool operator==(const DrivingSequence&) const = default;
};

enum class AngleUnits { radians, degrees };

// ---------------------------------------------------------------------------
// Log I/O.

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

template <typename T>
T parse_number(const std::string& s, const std::string& what, std::size_t line) {
  T v{};
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) {
    throw DataError("log line " + std::to_string(line) + ": bad " + what + " '" + s + "'");
  }
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace detail

/// Records of `log_csv` grouped into sequences, split wherever consecutive
/// timestamps differ by more than twice the frame period.
inline std::vector<DrivingSequence> load_log(const std::filesystem::path& log_csv,
                                             const std::filesystem::path& frames_dir,
                                             std::int64_t frame_period_ms = kFramePeriodMs) {
  std::ifstream in(log_csv);
  if (!in) throw IoError("cannot open " + log_csv.string());
  std::vector<DrivingSequence> seqs;
  std::string line;
  if (!std::getline(in, line)) return seqs;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kLogHeader) throw DataError("log header must be '" + std::string(kLogHeader) + "'");
  std::size_t lineno = 1;
  std::optional<std::int64_t> prev_ts;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 7) throw DataError("log line " + std::to_string(lineno) + ": expected 7 fields");
    DrivingRecord r;
    r.timestamp_ms = detail::parse_number<std::int64_t>(f[0], "timestamp_ms", lineno);
    if (!f[1].empty()) r.lat = detail::parse_number<double>(f[1], "lat", lineno);
    if (!f[2].empty()) r.lon = detail::parse_number<double>(f[2], "lon", lineno);
    r.speed = detail::parse_number<double>(f[3], "speed", lineno);
    r.torque = detail::parse_number<double>(f[4], "torque", lineno);
    r.angle = detail::parse_number<double>(f[5], "angle", lineno);
    r.frame = f[6];
    if (r.frame.empty()) throw DataError("log line " + std::to_string(lineno) + ": empty frame");
    if (prev_ts && r.timestamp_ms <= *prev_ts) {
      throw DataError("log line " + std::to_string(lineno) + ": timestamps not increasing");
    }
    const std::filesystem::path fp = frames_dir / r.frame;
    if (!std::filesystem::exists(fp)) throw DataError("missing frame " + fp.string());
    Image img = to_rgb(read_image(fp));
    if (seqs.empty() || (prev_ts && r.timestamp_ms - *prev_ts > 2 * frame_period_ms)) seqs.emplace_back();
    if (!seqs.back().frames.empty()) {
      const Image& first = seqs.back().frames.front();
      if (img.width != first.width || img.height != first.height) {
        throw DataError("frame " + fp.string() + " size differs within a sequence");
      }
    }
    seqs.back().records.push_back(std::move(r));
    seqs.back().frames.push_back(std::move(img));
    prev_ts = seqs.back().records.back().timestamp_ms;
  }
  return seqs;
}

/// Writes `dir/log.csv` and `dir/frames/*.ppm`. Record frame names are rewritten.
inline void save_log(std::vector<DrivingSequence>& seqs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "frames");
  std::ofstream out(dir / "log.csv");
  if (!out) throw IoError("cannot write " + (dir / "log.csv").string());
  out << kLogHeader << '\n';
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    for (std::size_t k = 0; k < seqs[s].size(); ++k) {
      DrivingRecord& r = seqs[s].records[k];
      std::ostringstream name;
      name << "s" << std::setw(3) << std::setfill('0') << s << "_" << std::setw(5) << k << ".ppm";
      r.frame = name.str();
      write_pnm(dir / "frames" / r.frame, seqs[s].frames[k]);
      out << r.timestamp_ms << ',' << (r.lat ? detail::format_double(*r.lat) : "") << ','
          << (r.lon ? detail::format_double(*r.lon) : "") << ',' << detail::format_double(r.speed) << ','
          << detail::format_double(r.torque) << ',' << detail::format_double(r.angle) << ',' << r.frame
          << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + (dir / "log.csv").string());
}

// ---------------------------------------------------------------------------
// Standardization.

struct Standardizer {
  std::array<double, 3> mean{};  // speed, torque, angle
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  static Standardizer fit(std::span<const VehicleTriple> xs) {
    if (xs.empty()) throw DataError("fit_standardizer: no training frames");
    Standardizer s;
    const double n = static_cast<double>(xs.size());
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0;
      for (const auto& x : xs) m += component(x, c);
      m /= n;
      double v = 0;
      for (const auto& x : xs) v += (component(x, c) - m) * (component(x, c) - m);
      v /= n;
      if (!(v > 0.0)) {
        static constexpr const char* names[] = {"speed", "torque", "angle"};
        throw DataError(std::string("fit_standardizer: zero variance in ") + names[c]);
      }
      s.mean[c] = m;
      s.stddev[c] = std::sqrt(v);
    }
    return s;
  }

  VehicleTriple apply(const VehicleTriple& x) const {
    return {(x.speed - mean[0]) / stddev[0], (x.torque - mean[1]) / stddev[1],
            (x.angle - mean[2]) / stddev[2]};
  }
  VehicleTriple invert(const VehicleTriple& z) const {
    return {z.speed * stddev[0] + mean[0], z.torque * stddev[1] + mean[1],
            z.angle * stddev[2] + mean[2]};
  }

  static double component(const VehicleTriple& x, std::size_t c) {
    return c == 0 ? x.speed : (c == 1 ? x.torque : x.angle);
  }

  nlohmann::json to_json() const { return {{"mean", mean}, {"std", stddev}}; }
  static Standardizer from_json(const nlohmann::json& j) {
    Standardizer s;
    s.mean = j.at("mean").get<std::array<double, 3>>();
    s.stddev = j.at("std").get<std::array<double, 3>>();
    for (double v : s.stddev) {
      if (!(v > 0.0)) throw DataError("standardizer: std must be positive");
    }
    return s;
  }

  bool operator==(const Standardizer&) const = default;
};

// ---------------------------------------------------------------------------
// Augmentation and reduction.

/// Frames flipped left-right; angle and torque negated; speed and timing kept.
inline DrivingSequence mirror_augment(const DrivingSequence& seq) {
  DrivingSequence out = seq;
  for (std::size_t k = 0; k < seq.size(); ++k) {
    out.frames[k] = mirror_image(seq.frames[k]);
    out.records[k].angle = -seq.records[k].angle;
    out.records[k].torque = -seq.records[k].torque;
  }
  return out;
}

enum class Reduction { none, top_crop, spatial_subsample, temporal_subsample, salient_keyframes };

struct ReductionOptions {
  double crop_fraction = 200.0 / 480.0;  // top rows removed
  std::size_t target_width = 0;          // 0: half the input width
  std::size_t target_height = 0;         // 0: half the input height
  std::size_t temporal_factor = 4;
  double salient_threshold_deg = 12.0;
  std::size_t neighbors = 15;
  AngleUnits units = AngleUnits::radians;
};

/// Bilinear resize with half-pixel centres and edge clamping.
inline Image resize_bilinear(const Image& img, std::size_t w, std::size_t h) {
  if (w == 0 || h == 0) throw DataError("resize: target dims must be >= 1");
  Image out(w, h, img.channels);
  const double sx = static_cast<double>(img.width) / static_cast<double>(w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(h);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(img.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(img.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = img.at(x0, y0, c) * (1 - tx) + img.at(x1, y0, c) * tx;
        const double bot = img.at(x0, y1, c) * (1 - tx) + img.at(x1, y1, c) * tx;
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround(top * (1 - ty) + bot * ty));
      }
    }
  }
  return out;
}

inline Image crop_top(const Image& img, std::size_t rows) {
  if (rows >= img.height) throw DataError("top_crop: would remove every row");
  Image out(img.width, img.height - rows, img.channels);
  std::copy(img.pixels.begin() + static_cast<std::ptrdiff_t>(rows * img.width * img.channels),
            img.pixels.end(), out.pixels.begin());
  return out;
}

inline std::size_t top_crop_rows(std::size_t height, double fraction) {
  return static_cast<std::size_t>(std::lround(static_cast<double>(height) * fraction));
}

/// Indices kept by the salient rule: |angle| >= threshold, plus `neighbors` on each side.
inline std::vector<std::size_t> salient_indices(std::span<const DrivingRecord> recs,
                                                const ReductionOptions& o) {
  const double thr = o.units == AngleUnits::degrees ? o.salient_threshold_deg
                                                    : o.salient_threshold_deg * std::numbers::pi / 180.0;
  std::vector<char> keep(recs.size(), 0);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (std::abs(recs[i].angle) >= thr) {
      const std::size_t lo = i >= o.neighbors ? i - o.neighbors : 0;
      const std::size_t hi = std::min(recs.size() - 1, i + o.neighbors);
      for (std::size_t j = lo; j <= hi; ++j) keep[j] = 1;
    }
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (keep[i]) idx.push_back(i);
  }
  return idx;
}

/// Applies a keyframe-reduction scheme. Salient filtering may split a sequence
/// into several contiguous runs; the other schemes return one sequence.
inline std::vector<DrivingSequence> reduce(const DrivingSequence& seq, Reduction scheme,
                                           const ReductionOptions& o = {}) {
  switch (scheme) {
    case Reduction::none:
      return {seq};
    case Reduction::top_crop: {
      DrivingSequence out = seq;
      for (auto& f : out.frames) f = crop_top(f, top_crop_rows(f.height, o.crop_fraction));
      return {out};
    }
    case Reduction::spatial_subsample: {
      DrivingSequence out = seq;
      for (auto& f : out.frames) {
        const std::size_t w = o.target_width != 0 ? o.target_width : f.width / 2;
        const std::size_t h = o.target_height != 0 ? o.target_height : f.height / 2;
        if (w > f.width || h > f.height) throw DataError("spatial_subsample: target exceeds input");
        f = resize_bilinear(f, w, h);
      }
      return {out};
    }
    case Reduction::temporal_subsample: {
      if (o.temporal_factor == 0) throw DataError("temporal_subsample: factor must be >= 1");
      DrivingSequence out;
      for (std::size_t i = 0; i < seq.size(); i += o.temporal_factor) {
        out.records.push_back(seq.records[i]);
        out.frames.push_back(seq.frames[i]);
      }
      return {out};
    }
    case Reduction::salient_keyframes: {
      std::vector<DrivingSequence> runs;
      std::size_t prev = 0;
      for (std::size_t i : salient_indices(seq.records, o)) {
        if (runs.empty() || i != prev + 1) runs.emplace_back();
        runs.back().records.push_back(seq.records[i]);
        runs.back().frames.push_back(seq.frames[i]);
        prev = i;
      }
      return runs;
    }
  }
  return {seq};
}

// ---------------------------------------------------------------------------
// Clips.

/// Start indices of sliding windows of `clip_length` frames.
inline std::vector<std::size_t> clip_starts(std::size_t n_frames, std::size_t clip_length,
                                            std::size_t stride) {
  if (clip_length == 0 || stride == 0) throw DataError("clips: clip_length and stride must be >= 1");
  std::vector<std::size_t> s;
  if (n_frames < clip_length) return s;
  for (std::size_t i = 0; i + clip_length <= n_frames; i += stride) s.push_back(i);
  return s;
}

/// Frames [start, start + len) as W x H x 3 x len, scaled to [0, 1].
template <typename Real>
Tensor4<Real> clip_tensor(const DrivingSequence& seq, std::size_t start, std::size_t len) {
  const Image& f0 = seq.frames.at(start);
  Tensor4<Real> t(f0.width, f0.height, 3, len);
  for (std::size_t k = 0; k < len; ++k) {
    const Image& f = seq.frames.at(start + k);
    if (f.width != f0.width || f.height != f0.height || f.channels != 3) {
      throw DimensionError("clip_tensor: inconsistent frame dims");
    }
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < f.height; ++y)
        for (std::size_t x = 0; x < f.width; ++x) t(x, y, c, k) = static_cast<Real>(f.at(x, y, c) / 255.0);
  }
  return t;
}

/// Sliding-window clips whose target is the standardized triple at the last frame.
/// A sequence shorter than `clip_length` yields no clips.
template <typename Real>
std::vector<ClipInput<Real>> make_clips(const DrivingSequence& seq, std::size_t clip_length,
                                        std::size_t stride, const Standardizer& st) {
  std::vector<ClipInput<Real>> clips;
  for (std::size_t s : clip_starts(seq.size(), clip_length, stride)) {
    clips.push_back({clip_tensor<Real>(seq, s, clip_length),
                     st.apply(seq.records[s + clip_length - 1].triple())});
  }
  return clips;
}

}  // namespace deepsteer
