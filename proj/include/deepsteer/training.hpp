#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deepsteer/data.hpp"
#include "deepsteer/model.hpp"

namespace deepsteer {

// ---------------------------------------------------------------------------
// Gradient clipping.

/// (1/m) * sqrt(sum of squares) over every entry of the blocks, m = entry count.
template <typename Real>
double global_norm(std::span<const std::span<Real>> blocks) {
  long double ss = 0;
  std::size_t m = 0;
  for (auto b : blocks) {
    for (Real g : b) ss += static_cast<long double>(g) * static_cast<long double>(g);
    m += b.size();
  }
  if (m == 0) return 0.0;
  return static_cast<double>(std::sqrt(ss)) / static_cast<double>(m);
}

/// Rescales every entry by clip_norm / max(clip_norm, global_norm). Below the
/// threshold nothing is touched. Returns the factor applied.
template <typename Real>
double clip_gradients(std::span<const std::span<Real>> blocks, double clip_norm) {
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_gradients: clip_norm must be > 0");
  const double gn = global_norm<Real>(blocks);
  if (!(gn > clip_norm)) return 1.0;
  const double scale = clip_norm / gn;
  for (auto b : blocks) {
    for (Real& g : b) g = static_cast<Real>(static_cast<double>(g) * scale);
  }
  return scale;
}

template <typename Real>
std::vector<std::span<Real>> param_blocks(ModelParams<Real>& p) {
  std::vector<std::span<Real>> out;
  p.visit([&](const std::string&, std::span<Real> v, const std::vector<std::size_t>&) { out.push_back(v); });
  return out;
}

template <typename Real>
double clip_gradients(ModelParams<Real>& grads, double clip_norm) {
  auto blocks = param_blocks(grads);
  return clip_gradients<Real>(std::span<const std::span<Real>>(blocks), clip_norm);
}

// ---------------------------------------------------------------------------
// ADAM.

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 5e-5;  // lambda * w added to the gradient
};

/// One ADAM update of a flat block at step `t` (1-based).
template <typename Real>
void adam_update(std::span<Real> w, std::span<const Real> g, std::span<Real> m, std::span<Real> v,
                 std::uint64_t t, const AdamHyper& h) {
  if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size()) {
    throw DimensionError("adam_step: gradient/moment shape differs from parameters");
  }
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = static_cast<double>(g[i]) + h.weight_decay * static_cast<double>(w[i]);
    const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * gi;
    const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * gi * gi;
    m[i] = static_cast<Real>(mi);
    v[i] = static_cast<Real>(vi);
    w[i] = static_cast<Real>(static_cast<double>(w[i]) - h.lr * (mi / c1) / (std::sqrt(vi / c2) + h.eps));
  }
}

template <typename Real>
struct AdamState {
  ModelParams<Real> m, v;
  std::uint64_t step = 0;

  static AdamState zeros(const ModelConfig& cfg) { return {ModelParams<Real>(cfg), ModelParams<Real>(cfg), 0}; }
};

template <typename Real>
void adam_step(ModelParams<Real>& params, const ModelParams<Real>& grads, AdamState<Real>& st,
               const AdamHyper& h) {
  auto w = param_blocks(params);
  auto m = param_blocks(st.m);
  auto v = param_blocks(st.v);
  std::vector<std::span<const Real>> g;
  grads.visit([&](const std::string&, std::span<const Real> b, const std::vector<std::size_t>&) { g.push_back(b); });
  if (w.size() != g.size() || w.size() != m.size() || w.size() != v.size()) {
    throw DimensionError("adam_step: parameter structure mismatch");
  }
  ++st.step;
  for (std::size_t k = 0; k < w.size(); ++k) adam_update<Real>(w[k], g[k], m[k], v[k], st.step, h);
}

// ---------------------------------------------------------------------------
// Plateau schedule.

struct PlateauState {
  double lr = 1e-4;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::size_t patience = 3;
  double threshold = 1e-4;
};

struct PlateauOutcome {
  bool new_best = false;  // strictly below every earlier value: snapshot now
  bool halved = false;
};

/// Halves the learning rate once `patience` consecutive evaluations fail to
/// improve on the best value by at least `threshold`.
inline PlateauOutcome lr_plateau(PlateauState& s, double rmse) {
  PlateauOutcome out;
  if (rmse <= s.best - s.threshold) {
    s.stale = 0;
  } else if (++s.stale >= s.patience) {
    s.lr *= 0.5;
    s.stale = 0;
    out.halved = true;
  }
  if (rmse < s.best) {
    s.best = rmse;
    out.new_best = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data split.

/// Consecutive clips of one sequence forming a mini-sequence (one mini-batch).
struct ClipBlock {
  std::size_t sequence = 0;
  std::vector<std::size_t> starts;
  bool operator==(const ClipBlock&) const = default;
};

struct DataSplit {
  std::vector<ClipBlock> train, val;
  std::size_t clip_count(bool validation) const {
    std::size_t n = 0;
    for (const auto& b : validation ? val : train) n += b.starts.size();
    return n;
  }
};

/// Cuts each sequence's clips into blocks of `batch_clips` and draws whole
/// blocks (seeded) into validation until they hold ceil(fraction * total) clips.
/// A zero fraction validates on the training blocks.
inline DataSplit split_blocks(const std::vector<DrivingSequence>& seqs, std::size_t clip_length,
                              std::size_t stride, std::size_t batch_clips, double val_fraction,
                              std::uint64_t seed) {
  if (batch_clips == 0) throw DataError("split: batch_clips must be >= 1");
  std::vector<ClipBlock> blocks;
  std::size_t total = 0;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto starts = clip_starts(seqs[s].size(), clip_length, stride);
    for (std::size_t i = 0; i < starts.size(); i += batch_clips) {
      ClipBlock b{s, {}};
      for (std::size_t j = i; j < std::min(starts.size(), i + batch_clips); ++j) b.starts.push_back(starts[j]);
      total += b.starts.size();
      blocks.push_back(std::move(b));
    }
  }
  if (blocks.empty()) throw DataError("train: no sequence is long enough for one clip");
  DataSplit split;
  if (val_fraction <= 0.0) {
    split.train = blocks;
    split.val = blocks;
    return split;
  }
  const auto want = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(total)));
  std::vector<std::size_t> order(blocks.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<char> is_val(blocks.size(), 0);
  std::size_t got = 0;
  for (std::size_t i : order) {
    if (got >= want) break;
    is_val[i] = 1;
    got += blocks[i].starts.size();
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) (is_val[i] ? split.val : split.train).push_back(blocks[i]);
  if (split.train.empty()) throw DataError("train: validation split leaves no training data");
  return split;
}

/// Raw triples of every frame covered by the training blocks.
inline std::vector<VehicleTriple> training_frames(const std::vector<DrivingSequence>& seqs,
                                                  const std::vector<ClipBlock>& blocks,
                                                  std::size_t clip_length) {
  std::vector<VehicleTriple> out;
  for (const auto& b : blocks) {
    const auto& recs = seqs.at(b.sequence).records;
    for (std::size_t i = b.starts.front(); i < b.starts.back() + clip_length; ++i) out.push_back(recs[i].triple());
  }
  return out;
}

template <typename Real>
std::vector<ClipInput<Real>> block_clips(const std::vector<DrivingSequence>& seqs, const ClipBlock& b,
                                         std::size_t clip_length, const Standardizer& st) {
  std::vector<ClipInput<Real>> clips;
  const DrivingSequence& seq = seqs.at(b.sequence);
  for (std::size_t s : b.starts) {
    clips.push_back({clip_tensor<Real>(seq, s, clip_length), st.apply(seq.records[s + clip_length - 1].triple())});
  }
  return clips;
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_clips = 4;
  std::size_t stride = 0;  // 0: clip_length
  double lr = 1e-4;
  double weight_decay = 5e-5;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double clip_norm = 1.0;
  double val_fraction = 0.05;
  std::size_t patience = 3;
  double plateau_threshold = 1e-4;
  double gamma = kDefaultGamma;

  bool operator==(const TrainConfig&) const = default;
};

struct TrainLogRow {
  std::size_t epoch = 0;
  int phase = 1;
  double train_j = 0, val_rmse = 0, lr = 0;
};

inline constexpr const char* kTrainLogHeader = "epoch,phase,train_J,val_rmse,lr";

inline void write_log_row(std::ostream& os, const TrainLogRow& r) {
  auto num = [](double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
  };
  os << r.epoch << ',' << r.phase << ',' << num(r.train_j) << ',' << num(r.val_rmse) << ',' << num(r.lr) << '\n';
}

template <typename Real>
struct TrainResult {
  ModelParams<Real> params;  // best validation snapshot
  Standardizer standardizer;
  DataSplit split;
  std::vector<TrainLogRow> log;
  double best_val_rmse = std::numeric_limits<double>::infinity();
};

template <typename Real>
struct TrainOptions {
  const ModelParams<Real>* init = nullptr;        // warm start; else init_params(seed)
  const Standardizer* standardizer = nullptr;     // else fitted on the training blocks
  const DataSplit* split = nullptr;               // else split_blocks(seed)
  const std::vector<DrivingSequence>* val_sequences = nullptr;  // else the training sequences
  int phase = 1;
  std::function<void(const TrainLogRow&)> on_epoch;
};

/// Standardized-angle RMSE over the validation blocks, carry reset per block.
template <typename Real>
double validation_rmse(const std::vector<DrivingSequence>& seqs, const std::vector<ClipBlock>& blocks,
                       const ModelParams<Real>& params, const ModelConfig& cfg, const Standardizer& st) {
  double ss = 0;
  std::size_t n = 0;
  for (const auto& b : blocks) {
    const auto clips = block_clips<Real>(seqs, b, cfg.clip_length, st);
    const auto preds = model_forward<Real>(clips, params, cfg);
    for (std::size_t k = 0; k < clips.size(); ++k) {
      const double d = preds[k].angle - clips[k].target.angle;
      ss += d * d;
      ++n;
    }
  }
  return n == 0 ? 0.0 : std::sqrt(ss / static_cast<double>(n));
}

template <typename Real>
TrainResult<Real> train(const std::vector<DrivingSequence>& seqs, const ModelConfig& cfg,
                        const TrainConfig& tc, std::uint64_t seed, const TrainOptions<Real>& opts = {}) {
  validate_config(cfg);
  if (seqs.empty()) throw DataError("train: empty dataset");
  for (const auto& s : seqs) {
    if (!s.frames.empty() && (s.frames[0].width != cfg.input_width || s.frames[0].height != cfg.input_height)) {
      throw ConfigError("train: frames are " + std::to_string(s.frames[0].width) + "x" +
                        std::to_string(s.frames[0].height) + " but the config expects " +
                        std::to_string(cfg.input_width) + "x" + std::to_string(cfg.input_height));
    }
  }
  const std::size_t stride = tc.stride == 0 ? cfg.clip_length : tc.stride;
  TrainResult<Real> res;
  res.split = opts.split != nullptr
                  ? *opts.split
                  : split_blocks(seqs, cfg.clip_length, stride, tc.batch_clips, tc.val_fraction, seed);
  res.standardizer = opts.standardizer != nullptr
                         ? *opts.standardizer
                         : Standardizer::fit(training_frames(seqs, res.split.train, cfg.clip_length));
  const std::vector<DrivingSequence>& val_seqs = opts.val_sequences != nullptr ? *opts.val_sequences : seqs;

  ModelParams<Real> params = opts.init != nullptr ? *opts.init : init_params<Real>(cfg, seed);
  res.params = params;
  AdamState<Real> adam = AdamState<Real>::zeros(cfg);
  AdamHyper hyper{tc.lr, tc.beta1, tc.beta2, tc.eps, tc.weight_decay};
  PlateauState plateau{tc.lr, std::numeric_limits<double>::infinity(), 0, tc.patience, tc.plateau_threshold};
  std::mt19937_64 shuffle_rng(seed + 1000003ull * static_cast<std::uint64_t>(opts.phase));
  std::mt19937_64 dropout_rng(seed + 7919ull * static_cast<std::uint64_t>(opts.phase) + 1);

  std::vector<std::size_t> order(res.split.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    hyper.lr = plateau.lr;
    double sum_j = 0;
    for (std::size_t bi : order) {
      const auto clips = block_clips<Real>(seqs, res.split.train[bi], cfg.clip_length, res.standardizer);
      auto br = model_backward<Real>(clips, params, cfg, tc.gamma, dropout_rng, ForwardOptions{true});
      if (!std::isfinite(br.loss.j)) {
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch));
      }
      clip_gradients(br.grads, tc.clip_norm);
      adam_step(params, br.grads, adam, hyper);
      sum_j += br.loss.j;
    }
    const double val = validation_rmse<Real>(val_seqs, res.split.val, params, cfg, res.standardizer);
    if (!std::isfinite(val)) throw NumericalError("train: non-finite validation RMSE");
    TrainLogRow row{epoch, opts.phase, sum_j / static_cast<double>(order.size()), val, hyper.lr};
    res.log.push_back(row);
    if (opts.on_epoch) opts.on_epoch(row);
    if (lr_plateau(plateau, val).new_best) {
      res.params = params;
      res.best_val_rmse = val;
    }
  }
  return res;
}

template <typename Real>
struct ThreePhaseResult {
  std::array<ModelParams<Real>, 3> phase_params;
  std::array<double, 3> phase_rmse{};  // on the original validation blocks
  Standardizer standardizer;
  DataSplit split;
  std::vector<TrainLogRow> log;
};

/// Original, mirrored-only, original again; each phase warm-starts from the
/// previous best snapshot with fresh ADAM moments and the initial learning rate.
/// One split and one standardizer (from the original training blocks) serve all phases.
template <typename Real>
ThreePhaseResult<Real> three_phase_train(const std::vector<DrivingSequence>& original,
                                         const std::vector<DrivingSequence>& mirrored,
                                         const ModelConfig& cfg, const TrainConfig& tc, std::uint64_t seed,
                                         std::function<void(const TrainLogRow&)> on_epoch = {}) {
  if (original.size() != mirrored.size()) throw DataError("three_phase_train: mirrored set differs in size");
  ThreePhaseResult<Real> out;
  const ModelParams<Real>* init = nullptr;
  for (int phase = 1; phase <= 3; ++phase) {
    TrainOptions<Real> o;
    o.init = init;
    o.phase = phase;
    o.on_epoch = on_epoch;
    if (phase > 1) {
      o.split = &out.split;
      o.standardizer = &out.standardizer;
      o.val_sequences = &original;
    }
    auto r = train<Real>(phase == 2 ? mirrored : original, cfg, tc, seed, o);
    if (phase == 1) {
      out.split = r.split;
      out.standardizer = r.standardizer;
    }
    out.phase_params[static_cast<std::size_t>(phase - 1)] = std::move(r.params);
    out.phase_rmse[static_cast<std::size_t>(phase - 1)] = r.best_val_rmse;
    out.log.insert(out.log.end(), r.log.begin(), r.log.end());
    init = &out.phase_params[static_cast<std::size_t>(phase - 1)];
  }
  return out;
}

}  // namespace deepsteer
