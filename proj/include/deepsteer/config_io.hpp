#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "deepsteer/data.hpp"
#include "deepsteer/model.hpp"
#include "deepsteer/synthetic.hpp"
#include "deepsteer/training.hpp"

namespace deepsteer {

inline constexpr const char* kConfigSchema = "deepsteer-config/1";
inline constexpr const char* kSyntheticSchema = "deepsteer-synthetic/1";

/// Everything a run needs besides paths and the seed.
struct RunConfig {
  std::string preset = "paper";  // base values for absent keys: "paper" or "desk"
  ModelConfig model;
  TrainConfig train;
  AngleUnits angle_units = AngleUnits::radians;
  Reduction reduction = Reduction::none;

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline const char* reduction_name(Reduction r) {
  switch (r) {
    case Reduction::none: return "none";
    case Reduction::top_crop: return "top_crop";
    case Reduction::spatial_subsample: return "spatial_subsample";
    case Reduction::temporal_subsample: return "temporal_subsample";
    case Reduction::salient_keyframes: return "salient_keyframes";
  }
  return "none";
}

inline Reduction parse_reduction(const std::string& s) {
  for (Reduction r : {Reduction::none, Reduction::top_crop, Reduction::spatial_subsample,
                      Reduction::temporal_subsample, Reduction::salient_keyframes}) {
    if (s == reduction_name(r)) return r;
  }
  throw ConfigError("config: unknown reduction '" + s + "'");
}

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const char* schema) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  if (!j.contains("schema_version") || j.at("schema_version") != schema) {
    throw ConfigError(std::string("config: schema_version must be \"") + schema + "\"");
  }
  for (const auto& [k, v] : j.items()) {
    if (k != "schema_version" && !allowed.count(k)) throw ConfigError("config: unknown key '" + k + "'");
  }
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& rc) {
  const ModelConfig& m = rc.model;
  const TrainConfig& t = rc.train;
  nlohmann::json specs = nlohmann::json::array();
  for (const auto& s : m.stconv_specs) specs.push_back({s.kw, s.kh, s.stride_w, s.stride_h, s.c_out, s.kt});
  return {
      {"schema_version", kConfigSchema},
      {"preset", rc.preset},
      {"clip_length", m.clip_length},
      {"input_width", m.input_width},
      {"input_height", m.input_height},
      {"stconv_specs", specs},
      {"convlstm_hidden", m.convlstm_hidden},
      {"feature_dim", m.feature_dim},
      {"lstm_hidden", m.lstm_hidden},
      {"keep_prob", m.keep_prob},
      {"hidden_update_rule", m.hidden_update_rule == HiddenUpdate::standard ? "standard" : "as_printed"},
      {"head_hidden", m.head_hidden},
      {"convlstm_bias", m.convlstm_bias},
      {"use_convlstm", m.use_convlstm},
      {"aggregate_conv1", m.aggregate_conv1},
      {"use_prev_output", m.use_prev_output},
      {"teacher_forcing", m.teacher_forcing},
      {"epochs", t.epochs},
      {"batch_clips", t.batch_clips},
      {"stride", t.stride},
      {"lr", t.lr},
      {"weight_decay", t.weight_decay},
      {"beta1", t.beta1},
      {"beta2", t.beta2},
      {"eps", t.eps},
      {"clip_norm", t.clip_norm},
      {"val_fraction", t.val_fraction},
      {"patience", t.patience},
      {"plateau_threshold", t.plateau_threshold},
      {"gamma", t.gamma},
      {"angle_units", rc.angle_units == AngleUnits::radians ? "radians" : "degrees"},
      {"reduction", detail::reduction_name(rc.reduction)},
  };
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> keys = {
      "preset", "clip_length", "input_width", "input_height", "stconv_specs", "convlstm_hidden",
      "feature_dim", "lstm_hidden", "keep_prob", "hidden_update_rule", "head_hidden", "convlstm_bias",
      "use_convlstm", "aggregate_conv1", "use_prev_output", "teacher_forcing", "epochs", "batch_clips",
      "stride", "lr", "weight_decay", "beta1", "beta2", "eps", "clip_norm", "val_fraction", "patience",
      "plateau_threshold", "gamma", "angle_units", "reduction"};
  detail::check_keys(j, keys, kConfigSchema);
  RunConfig rc;
  detail::take(j, "preset", rc.preset);
  if (rc.preset == "desk") {
    rc.model = ModelConfig::desk();
  } else if (rc.preset != "paper") {
    throw ConfigError("config: preset must be \"paper\" or \"desk\"");
  }
  ModelConfig& m = rc.model;
  detail::take(j, "clip_length", m.clip_length);
  detail::take(j, "input_width", m.input_width);
  detail::take(j, "input_height", m.input_height);
  if (j.contains("stconv_specs")) {
    m.stconv_specs.clear();
    for (const auto& s : j.at("stconv_specs")) {
      if (!s.is_array() || s.size() != 6) throw ConfigError("config: each stconv spec is [kw,kh,sw,sh,c_out,kt]");
      try {
        m.stconv_specs.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::size_t>(),
                                  s[3].get<std::size_t>(), s[4].get<std::size_t>(), s[5].get<std::size_t>()});
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: bad stconv spec: ") + e.what());
      }
    }
  }
  detail::take(j, "convlstm_hidden", m.convlstm_hidden);
  detail::take(j, "feature_dim", m.feature_dim);
  detail::take(j, "lstm_hidden", m.lstm_hidden);
  detail::take(j, "keep_prob", m.keep_prob);
  std::string rule = m.hidden_update_rule == HiddenUpdate::standard ? "standard" : "as_printed";
  detail::take(j, "hidden_update_rule", rule);
  if (rule == "standard") {
    m.hidden_update_rule = HiddenUpdate::standard;
  } else if (rule == "as_printed") {
    m.hidden_update_rule = HiddenUpdate::as_printed;
  } else {
    throw ConfigError("config: hidden_update_rule must be \"standard\" or \"as_printed\"");
  }
  detail::take(j, "head_hidden", m.head_hidden);
  detail::take(j, "convlstm_bias", m.convlstm_bias);
  detail::take(j, "use_convlstm", m.use_convlstm);
  detail::take(j, "aggregate_conv1", m.aggregate_conv1);
  detail::take(j, "use_prev_output", m.use_prev_output);
  detail::take(j, "teacher_forcing", m.teacher_forcing);
  TrainConfig& t = rc.train;
  detail::take(j, "epochs", t.epochs);
  detail::take(j, "batch_clips", t.batch_clips);
  detail::take(j, "stride", t.stride);
  detail::take(j, "lr", t.lr);
  detail::take(j, "weight_decay", t.weight_decay);
  detail::take(j, "beta1", t.beta1);
  detail::take(j, "beta2", t.beta2);
  detail::take(j, "eps", t.eps);
  detail::take(j, "clip_norm", t.clip_norm);
  detail::take(j, "val_fraction", t.val_fraction);
  detail::take(j, "patience", t.patience);
  detail::take(j, "plateau_threshold", t.plateau_threshold);
  detail::take(j, "gamma", t.gamma);
  std::string units = "radians";
  detail::take(j, "angle_units", units);
  if (units == "radians") {
    rc.angle_units = AngleUnits::radians;
  } else if (units == "degrees") {
    rc.angle_units = AngleUnits::degrees;
  } else {
    throw ConfigError("config: angle_units must be \"radians\" or \"degrees\"");
  }
  std::string red = "none";
  detail::take(j, "reduction", red);
  rc.reduction = detail::parse_reduction(red);
  validate_config(rc.model);
  if (!(t.lr > 0) || !(t.clip_norm > 0) || t.batch_clips == 0 || !(t.val_fraction >= 0 && t.val_fraction < 1)) {
    throw ConfigError("config: lr and clip_norm must be > 0, batch_clips >= 1, val_fraction in [0, 1)");
  }
  return rc;
}

inline nlohmann::json parse_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(parse_json_file(path));
}

inline void save_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"schema_version", kSyntheticSchema},
          {"sequences", s.sequences},
          {"frames_per_sequence", s.frames_per_sequence},
          {"width", s.width},
          {"height", s.height},
          {"curvature_bound", s.curvature_bound},
          {"walk_sigma", s.walk_sigma},
          {"walk_damping", s.walk_damping},
          {"noise", s.noise},
          {"speed_mean", s.speed_mean},
          {"speed_noise", s.speed_noise},
          {"negate_curvature", s.negate_curvature}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  static const std::set<std::string> keys = {"sequences", "frames_per_sequence", "width", "height",
                                             "curvature_bound", "walk_sigma", "walk_damping", "noise",
                                             "speed_mean", "speed_noise", "negate_curvature"};
  detail::check_keys(j, keys, kSyntheticSchema);
  SyntheticSpec s;
  detail::take(j, "sequences", s.sequences);
  detail::take(j, "frames_per_sequence", s.frames_per_sequence);
  detail::take(j, "width", s.width);
  detail::take(j, "height", s.height);
  detail::take(j, "curvature_bound", s.curvature_bound);
  detail::take(j, "walk_sigma", s.walk_sigma);
  detail::take(j, "walk_damping", s.walk_damping);
  detail::take(j, "noise", s.noise);
  detail::take(j, "speed_mean", s.speed_mean);
  detail::take(j, "speed_noise", s.speed_noise);
  detail::take(j, "negate_curvature", s.negate_curvature);
  return s;
}

}  // namespace deepsteer
