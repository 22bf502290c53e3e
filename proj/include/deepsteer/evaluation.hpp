#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "deepsteer/data.hpp"
#include "deepsteer/model.hpp"

namespace deepsteer {

/// sqrt(mean((p - g)^2)).
inline double rmse(std::span<const double> pred, std::span<const double> gt) {
  if (pred.empty() || pred.size() != gt.size()) {
    throw std::invalid_argument("rmse: need equal, nonempty lists");
  }
  long double ss = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const long double d = static_cast<long double>(pred[i]) - static_cast<long double>(gt[i]);
    ss += d * d;
  }
  return static_cast<double>(std::sqrt(ss / static_cast<long double>(pred.size())));
}

/// RMSE of a constant predictor.
inline double constant_rmse(double c, std::span<const double> gt) {
  if (gt.empty()) throw std::invalid_argument("baseline: empty ground truth");
  const std::vector<double> pred(gt.size(), c);
  return rmse(pred, gt);
}

inline double baseline_zero(std::span<const double> gt) { return constant_rmse(0.0, gt); }

inline double baseline_mean(std::span<const double> train_gt, std::span<const double> test_gt) {
  if (train_gt.empty()) throw std::invalid_argument("baseline_mean: empty training set");
  long double s = 0;
  for (double v : train_gt) s += v;
  return constant_rmse(static_cast<double>(s / static_cast<long double>(train_gt.size())), test_gt);
}

struct ModelRow {
  std::string name;
  std::vector<double> pred;  // aligned with EvalReport::gt
};

struct EvalReport {
  std::vector<std::size_t> frame_index;
  std::vector<double> gt;  // standardized angles
  std::vector<ModelRow> models;
};

/// trajectory.csv (frame_index, gt_angle, one column per model) and summary.csv (model, rmse).
inline void emit_report(const EvalReport& r, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  auto num = [](double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
  };
  std::ofstream traj(out_dir / "trajectory.csv");
  std::ofstream sum(out_dir / "summary.csv");
  if (!traj || !sum) throw IoError("cannot write reports under " + out_dir.string());
  traj << "frame_index,gt_angle";
  for (const auto& m : r.models) traj << ',' << m.name;
  traj << '\n';
  for (std::size_t i = 0; i < r.gt.size(); ++i) {
    traj << r.frame_index.at(i) << ',' << num(r.gt[i]);
    for (const auto& m : r.models) traj << ',' << num(m.pred.at(i));
    traj << '\n';
  }
  sum << "model,rmse\n";
  for (const auto& m : r.models) sum << m.name << ',' << num(rmse(m.pred, r.gt)) << '\n';
  if (!traj || !sum) throw IoError("report write failed under " + out_dir.string());
}

struct SequencePrediction {
  std::vector<std::size_t> frame_index;  // last frame of each clip
  std::vector<VehicleTriple> pred, gt;   // standardized
};

/// Per-frame predictions over one sequence: sliding clips with the given stride,
/// carry threaded from clip to clip and reset at the sequence start.
template <typename Real>
SequencePrediction predict_sequence(const DrivingSequence& seq, const ModelParams<Real>& params,
                                    const ModelConfig& cfg, const Standardizer& st, std::size_t stride = 1) {
  SequencePrediction out;
  std::mt19937_64 rng(0);
  ModelCarry<Real> carry = ModelCarry<Real>::zeros(cfg);
  for (std::size_t s : clip_starts(seq.size(), cfg.clip_length, stride)) {
    const Tensor4<Real> frames = clip_tensor<Real>(seq, s, cfg.clip_length);
    auto feat = extract_features(frames, carry.convlstm, params, cfg, false, rng);
    carry.convlstm = std::move(feat.convlstm_state);
    auto step = predict_step<Real>(feat.feature, carry, params, cfg, false, rng);
    carry = std::move(step.carry);
    const std::size_t last = s + cfg.clip_length - 1;
    out.frame_index.push_back(last);
    out.pred.push_back(step.prediction);
    out.gt.push_back(st.apply(seq.records[last].triple()));
  }
  return out;
}

}  // namespace deepsteer
