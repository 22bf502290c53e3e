#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace deepsteer {

/// (speed, torque, wheel angle), in standardized units unless stated otherwise.
struct VehicleTriple {
  double speed = 0.0;
  double torque = 0.0;
  double angle = 0.0;

  bool operator==(const VehicleTriple&) const = default;
  bool finite() const { return std::isfinite(speed) && std::isfinite(torque) && std::isfinite(angle); }
};

inline constexpr double kDefaultGamma = 10.0;

struct LossBundle {
  double l_steer = 0.0;
  double l_speed = 0.0;
  double l_torque = 0.0;
  double j = 0.0;
  double gamma = kDefaultGamma;
};

/// Per-component mean squared errors and J = gamma*L_steer + L_speed + L_torque.
inline LossBundle compute_loss(std::span<const VehicleTriple> predictions,
                               std::span<const VehicleTriple> targets,
                               double gamma = kDefaultGamma) {
  if (predictions.empty() || predictions.size() != targets.size()) {
    throw std::invalid_argument("compute_loss: need equal-length nonempty lists");
  }
  LossBundle b;
  b.gamma = gamma;
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    const double da = predictions[k].angle - targets[k].angle;
    const double ds = predictions[k].speed - targets[k].speed;
    const double dt = predictions[k].torque - targets[k].torque;
    b.l_steer += da * da;
    b.l_speed += ds * ds;
    b.l_torque += dt * dt;
  }
  const double n = static_cast<double>(predictions.size());
  b.l_steer /= n;
  b.l_speed /= n;
  b.l_torque /= n;
  b.j = gamma * b.l_steer + b.l_speed + b.l_torque;
  return b;
}

/// dJ/d(prediction_k) for each frame.
inline std::vector<VehicleTriple> loss_gradient(std::span<const VehicleTriple> predictions,
                                                std::span<const VehicleTriple> targets,
                                                double gamma = kDefaultGamma) {
  if (predictions.empty() || predictions.size() != targets.size()) {
    throw std::invalid_argument("loss_gradient: need equal-length nonempty lists");
  }
  const double scale = 2.0 / static_cast<double>(predictions.size());
  std::vector<VehicleTriple> g(predictions.size());
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    g[k].angle = scale * gamma * (predictions[k].angle - targets[k].angle);
    g[k].speed = scale * (predictions[k].speed - targets[k].speed);
    g[k].torque = scale * (predictions[k].torque - targets[k].torque);
  }
  return g;
}

}  // namespace deepsteer
