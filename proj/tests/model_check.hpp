#pragma once

#include <random>
#include <vector>

#include "deepsteer/grad_check.hpp"
#include "deepsteer/model.hpp"

namespace deepsteer::testing {

/// Every parameter block of `p` paired with the matching block of `g`.
inline std::vector<GradCheckParam<double>> pair_params(ModelParams<double>& p,
                                                       const ModelParams<double>& g) {
  std::vector<GradCheckParam<double>> out;
  p.visit([&](const std::string& name, std::span<double> v, const std::vector<std::size_t>&) {
    out.push_back({v, {}, name});
  });
  std::size_t i = 0;
  g.visit([&](const std::string&, std::span<const double> v, const std::vector<std::size_t>&) {
    out[i++].analytic = v;
  });
  return out;
}

/// Moves every target to within `scale` of the current prediction. Round-off in
/// J grows with |J|, so small residuals keep the finite-difference noise well
/// below the gradients being checked.
inline void targets_near_predictions(std::vector<ClipInput<double>>& clips, const ModelParams<double>& p,
                                     const ModelConfig& cfg, const ForwardOptions& fopts,
                                     std::uint64_t seed, std::mt19937_64& rng, double scale = 0.05) {
  std::mt19937_64 r(seed);
  const auto preds = model_forward<double>(clips, p, cfg, r, fopts);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (std::size_t k = 0; k < clips.size(); ++k) {
    clips[k].target = preds[k];
    clips[k].target.speed += u(rng);
    clips[k].target.torque += u(rng);
    clips[k].target.angle += u(rng);
  }
}

/// Full-model finite-difference check of J. The dropout stream is replayed
/// from `seed` on every evaluation; the ReLU sign pattern marks kinks.
inline GradCheckReport model_grad_check(std::span<const ClipInput<double>> clips,
                                        ModelParams<double>& p, const ModelConfig& cfg,
                                        const ForwardOptions& fopts, std::uint64_t seed,
                                        GradCheckOptions gopts = {}, double gamma = kDefaultGamma) {
  std::mt19937_64 r0(seed);
  auto res = model_backward<double>(clips, p, cfg, gamma, r0, fopts);
  ForwardOptions eval = fopts;
  if (cfg.teacher_forcing && eval.feedback_override.empty()) eval.feedback = Feedback::teacher;
  std::vector<VehicleTriple> targets;
  for (const auto& c : clips) targets.push_back(c.target);
  std::vector<ClipCache<double>> caches;
  auto loss = [&] {
    std::mt19937_64 r(seed);
    auto preds = detail::rollout<double>(clips, p, cfg, r, eval, &caches);
    return compute_loss(preds, targets, gamma).j;
  };
  gopts.region = [&] { return relu_pattern(caches); };
  auto params = pair_params(p, res.grads);
  return grad_check<double>(loss, params, gopts);
}

}  // namespace deepsteer::testing
