#pragma once

#include <charconv>
#include <cmath>
#include <cstring>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "deepsteer/checkpoint.hpp"
#include "deepsteer/config_io.hpp"
#include "deepsteer/data.hpp"
#include "deepsteer/evaluation.hpp"
#include "deepsteer/parallel.hpp"
#include "deepsteer/saliency.hpp"
#include "deepsteer/synthetic.hpp"
#include "deepsteer/training.hpp"

namespace deepsteer::cli {

/// Seed used when neither --seed nor DEEPSTEER_SEED is given.
inline constexpr std::uint64_t kDefaultSeed = 20170521;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumerical = 2;

namespace fs = std::filesystem;

inline std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("DEEPSTEER_SEED"); env != nullptr && *env != '\0') {
    std::uint64_t v = 0;
    const char* end = env + std::strlen(env);
    auto [p, ec] = std::from_chars(env, end, v);
    if (ec != std::errc() || p != end) throw ConfigError(std::string("DEEPSTEER_SEED is not an integer: ") + env);
    return v;
  }
  return kDefaultSeed;
}

inline std::string frame_stem(std::size_t seq, std::size_t frame) {
  std::ostringstream s;
  s << 's' << std::setw(3) << std::setfill('0') << seq << '_' << std::setw(5) << frame;
  return s.str();
}

/// Lane masks written by gen-synthetic, as 0/255 PGMs under `dir/lanes`.
inline std::vector<std::vector<Image>> load_lane_masks(const fs::path& dir,
                                                       const std::vector<DrivingSequence>& seqs) {
  std::vector<std::vector<Image>> out(seqs.size());
  for (std::size_t s = 0; s < seqs.size(); ++s)
    for (std::size_t k = 0; k < seqs[s].size(); ++k) out[s].push_back(read_pnm(dir / "lanes" / (frame_stem(s, k) + ".pgm")));
  return out;
}

inline std::vector<DrivingSequence> load_corpus(const fs::path& data_dir, const RunConfig& rc) {
  auto seqs = load_log(data_dir / "log.csv", data_dir / "frames");
  if (rc.reduction == Reduction::none) return seqs;
  ReductionOptions o;
  o.units = rc.angle_units;
  std::vector<DrivingSequence> out;
  for (const auto& s : seqs) {
    auto r = reduce(s, rc.reduction, o);
    for (auto& x : r) out.push_back(std::move(x));
  }
  return out;
}

struct GenSyntheticArgs {
  fs::path spec_file, out_dir;
};

inline void cmd_gen_synthetic(const GenSyntheticArgs& a, std::uint64_t seed, std::ostream& log) {
  SyntheticSpec spec;
  if (!a.spec_file.empty()) spec = synthetic_spec_from_json(parse_json_file(a.spec_file));
  spec.seed = seed;
  SyntheticCorpus corpus = gen_synthetic(spec);
  fs::create_directories(a.out_dir / "lanes");
  save_log(corpus.sequences, a.out_dir);
  for (std::size_t s = 0; s < corpus.lane.size(); ++s) {
    for (std::size_t k = 0; k < corpus.lane[s].size(); ++k) {
      Image m(spec.width, spec.height, 1);
      for (std::size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] = corpus.lane[s][k][i] ? 255 : 0;
      write_pnm(a.out_dir / "lanes" / (frame_stem(s, k) + ".pgm"), m);
    }
  }
  nlohmann::json j = to_json(spec);
  j["seed"] = seed;
  save_json(a.out_dir / "spec.json", j);
  log << "gen-synthetic: " << corpus.sequences.size() << " sequences x " << spec.frames_per_sequence
      << " frames -> " << a.out_dir.string() << '\n';
}

struct TrainArgs {
  fs::path config_file, data_dir, out_dir;
  int phases = 1;
  std::optional<std::size_t> epochs, batch_clips;
  std::optional<double> lr, val_fraction;
};

inline RunConfig resolve_run_config(const fs::path& config_file) {
  return config_file.empty() ? RunConfig{} : load_run_config(config_file);
}

inline void cmd_train(const TrainArgs& a, std::uint64_t seed, std::ostream& log) {
  if (a.phases != 1 && a.phases != 3) throw ConfigError("--phases must be 1 or 3");
  RunConfig rc = resolve_run_config(a.config_file);
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.batch_clips) rc.train.batch_clips = *a.batch_clips;
  if (a.lr) rc.train.lr = *a.lr;
  if (a.val_fraction) rc.train.val_fraction = *a.val_fraction;
  rc = run_config_from_json(to_json(rc));  // re-validate after overrides
  const auto seqs = load_corpus(a.data_dir, rc);
  fs::create_directories(a.out_dir);
  std::ofstream csv(a.out_dir / "train_log.csv");
  if (!csv) throw IoError("cannot write " + (a.out_dir / "train_log.csv").string());
  csv << kTrainLogHeader << '\n';
  auto on_epoch = [&](const TrainLogRow& r) {
    write_log_row(csv, r);
    csv.flush();
    log << "phase " << r.phase << " epoch " << r.epoch << " train_J " << r.train_j << " val_rmse " << r.val_rmse
        << " lr " << r.lr << '\n';
  };
  Standardizer st;
  ModelParams<float> best;
  if (a.phases == 1) {
    TrainOptions<float> o;
    o.on_epoch = on_epoch;
    auto r = train<float>(seqs, rc.model, rc.train, seed, o);
    st = r.standardizer;
    best = std::move(r.params);
  } else {
    std::vector<DrivingSequence> mirrored;
    for (const auto& s : seqs) mirrored.push_back(mirror_augment(s));
    auto r = three_phase_train<float>(seqs, mirrored, rc.model, rc.train, seed, on_epoch);
    std::size_t arg = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      save_checkpoint(a.out_dir / ("phase" + std::to_string(k + 1) + ".ckpt"), r.phase_params[k]);
      if (r.phase_rmse[k] < r.phase_rmse[arg]) arg = k;
    }
    st = r.standardizer;
    best = r.phase_params[arg];
  }
  save_checkpoint(a.out_dir / "best.ckpt", best);
  save_json(a.out_dir / "standardizer.json", st.to_json());
  save_json(a.out_dir / "config.json", to_json(rc));
}

struct EvalArgs {
  fs::path checkpoint, config_file, data_dir, out_dir, standardizer_file;
  bool baselines = false;
  bool raw_units = false;
  std::size_t stride = 1;
  std::string name = "deepsteer";
};

inline Standardizer load_standardizer(const fs::path& explicit_path, const fs::path& checkpoint) {
  const fs::path p = explicit_path.empty() ? checkpoint.parent_path() / "standardizer.json" : explicit_path;
  return Standardizer::from_json(parse_json_file(p));
}

/// Predictions for every sequence, concatenated; frame indices are global over the corpus.
inline EvalReport build_report(const std::vector<DrivingSequence>& seqs, const ModelParams<float>& params,
                               const ModelConfig& cfg, const Standardizer& st, const EvalArgs& a) {
  EvalReport rep;
  ModelRow model{a.name, {}};
  std::size_t offset = 0;
  for (const auto& s : seqs) {
    const auto sp = predict_sequence<float>(s, params, cfg, st, a.stride);
    for (std::size_t i = 0; i < sp.pred.size(); ++i) {
      rep.frame_index.push_back(offset + sp.frame_index[i]);
      rep.gt.push_back(sp.gt[i].angle);
      model.pred.push_back(sp.pred[i].angle);
    }
    offset += s.size();
  }
  for (double v : model.pred) {
    if (!std::isfinite(v)) throw NumericalError("eval: non-finite prediction");
  }
  rep.models.push_back(std::move(model));
  if (a.baselines) {
    // Zero predicts a raw angle of 0; Mean predicts the training mean, which the standardizer carries.
    const double zero = st.apply({0.0, 0.0, 0.0}).angle;
    rep.models.push_back({"zero", std::vector<double>(rep.gt.size(), zero)});
    rep.models.push_back({"mean", std::vector<double>(rep.gt.size(), 0.0)});
  }
  if (a.raw_units) {
    auto raw = [&](double z) { return z * st.stddev[2] + st.mean[2]; };
    for (double& v : rep.gt) v = raw(v);
    for (auto& m : rep.models)
      for (double& v : m.pred) v = raw(v);
  }
  return rep;
}

inline void cmd_eval(const EvalArgs& a, std::ostream& log) {
  const RunConfig rc = resolve_run_config(a.config_file);
  if (a.stride == 0) throw ConfigError("--stride must be >= 1");
  const auto params = load_checkpoint<float>(a.checkpoint, rc.model);
  const Standardizer st = load_standardizer(a.standardizer_file, a.checkpoint);
  const auto seqs = load_corpus(a.data_dir, rc);
  const EvalReport rep = build_report(seqs, params, rc.model, st, a);
  emit_report(rep, a.out_dir);
  for (const auto& m : rep.models) log << m.name << " rmse " << rmse(m.pred, rep.gt) << '\n';
}

struct SaliencyArgs {
  fs::path checkpoint, config_file, data_dir, out_dir;
  std::size_t sequence = 0;
  std::vector<std::size_t> frames;  // last frame of each clip; default: first full clip
  bool overlay = false;
};

inline void cmd_saliency(const SaliencyArgs& a, std::ostream& log) {
  const RunConfig rc = resolve_run_config(a.config_file);
  const ModelConfig& cfg = rc.model;
  const auto params = load_checkpoint<float>(a.checkpoint, cfg);
  const auto seqs = load_corpus(a.data_dir, rc);
  if (a.sequence >= seqs.size()) throw DataError("saliency: sequence index out of range");
  const DrivingSequence& seq = seqs[a.sequence];
  std::vector<std::size_t> frames = a.frames;
  if (frames.empty()) frames.push_back(cfg.clip_length - 1);
  fs::create_directories(a.out_dir);
  for (std::size_t f : frames) {
    if (f + 1 < cfg.clip_length || f >= seq.size()) {
      throw DataError("saliency: frame " + std::to_string(f) + " does not end a full clip");
    }
    const auto stack = capture_activations(clip_tensor<float>(seq, f + 1 - cfg.clip_length, cfg.clip_length),
                                           params, cfg);
    const SaliencyMap m = vbp(stack);
    const std::string stem = "saliency_" + frame_stem(a.sequence, f);
    if (a.overlay) {
      emit_heatmap(m.map, a.out_dir / (stem + ".pgm"), &seq.frames[f], a.out_dir / (stem + "_overlay.ppm"));
    } else {
      emit_heatmap(m.map, a.out_dir / (stem + ".pgm"));
    }
    log << "saliency " << stem << " range [" << m.lo << ", " << m.hi << "]\n";
  }
}

/// Parses argv and dispatches. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Deep steering: spatio-temporal steering-angle regression"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  app.add_option("--seed", seed, "RNG seed (fallback: DEEPSTEER_SEED, then 20170521)");
  app.add_option("--threads", threads, "Worker thread cap; results do not depend on it");

  GenSyntheticArgs gen;
  auto* g = app.add_subcommand("gen-synthetic", "Render a synthetic road corpus");
  g->add_option("--spec", gen.spec_file, "Synthetic spec JSON")->check(CLI::ExistingFile);
  g->add_option("--out", gen.out_dir, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", tr.config_file, "Run config JSON")->check(CLI::ExistingFile);
  t->add_option("--data", tr.data_dir, "Corpus directory (log.csv + frames/)")->required();
  t->add_option("--out", tr.out_dir, "Output directory")->required();
  t->add_option("--phases", tr.phases, "1, or 3 for original/mirrored/original");
  t->add_option("--epochs", tr.epochs, "Override epochs");
  t->add_option("--batch-clips", tr.batch_clips, "Override clips per mini-sequence");
  t->add_option("--lr", tr.lr, "Override initial learning rate");
  t->add_option("--val-fraction", tr.val_fraction, "Override validation fraction");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--config", ev.config_file, "Run config JSON")->check(CLI::ExistingFile);
  e->add_option("--data", ev.data_dir, "Corpus directory")->required();
  e->add_option("--out", ev.out_dir, "Output directory")->required();
  e->add_option("--standardizer", ev.standardizer_file, "Standardizer JSON (default: next to the checkpoint)");
  e->add_option("--stride", ev.stride, "Clip stride in frames");
  e->add_option("--name", ev.name, "Model column name");
  e->add_flag("--baselines", ev.baselines, "Add Zero and Mean rows");
  e->add_flag("--raw-units", ev.raw_units, "Report angles in raw units instead of standardized");

  SaliencyArgs sa;
  auto* s = app.add_subcommand("saliency", "Visual back-propagation heatmaps");
  s->add_option("--checkpoint", sa.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  s->add_option("--config", sa.config_file, "Run config JSON")->check(CLI::ExistingFile);
  s->add_option("--data", sa.data_dir, "Corpus directory")->required();
  s->add_option("--out", sa.out_dir, "Output directory")->required();
  s->add_option("--sequence", sa.sequence, "Sequence index");
  s->add_option("--frame", sa.frames, "Last frame index of each clip to explain");
  s->add_flag("--overlay", sa.overlay, "Also write a red overlay PPM");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << ex.what() << '\n';
    return kExitUsage;
  }
  try {
    set_max_threads(threads);
    if (g->parsed()) {
      cmd_gen_synthetic(gen, resolve_seed(seed), out);
    } else if (t->parsed()) {
      cmd_train(tr, resolve_seed(seed), out);
    } else if (e->parsed()) {
      cmd_eval(ev, out);
    } else if (s->parsed()) {
      cmd_saliency(sa, out);
    }
  } catch (const NumericalError& ex) {
    err << "numerical failure: " << ex.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  }
  return kExitOk;
}

}  // namespace deepsteer::cli
