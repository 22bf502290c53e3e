#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace deepsteer {

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor for the relative error, so that coordinates whose true
  /// gradient is (numerically) zero are judged on absolute error.
  double abs_floor = 1e-6;
  /// 0 checks every coordinate; otherwise a seeded random subset per parameter.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 7;
  /// Optional id of the smooth piece the last loss() call landed in (e.g. a hash
  /// of ReLU signs). Coordinates whose +/- evaluations leave the piece of the
  /// unperturbed point straddle a kink; they are counted and skipped.
  std::function<std::uint64_t()> region;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_skipped = 0;  // straddled a kink
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// One parameter block: live values (perturbed in place and restored) and the
/// analytic gradient computed at the unperturbed point.
template <typename Real>
struct GradCheckParam {
  std::span<Real> values;
  std::span<const Real> analytic;
  std::string name;
};

/// Central finite differences of `loss()` against the supplied analytic
/// gradients. `loss` must be pure and read the parameters through the spans.
template <typename Real, typename LossFn>
GradCheckReport grad_check(LossFn&& loss, std::span<const GradCheckParam<Real>> params,
                           const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  std::mt19937_64 rng(opts.seed);
  std::uint64_t base_region = 0;
  if (opts.region) {
    static_cast<void>(loss());
    base_region = opts.region();
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& block = params[p];
    if (block.values.size() != block.analytic.size()) {
      throw std::invalid_argument("grad_check: gradient length mismatch for " + block.name);
    }
    std::vector<std::size_t> coords(block.values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_param != 0 && coords.size() > opts.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const Real saved = block.values[i];
      block.values[i] = saved + static_cast<Real>(opts.step);
      const double plus = static_cast<double>(loss());
      const bool plus_off = opts.region && opts.region() != base_region;
      block.values[i] = saved - static_cast<Real>(opts.step);
      const double minus = static_cast<double>(loss());
      const bool minus_off = opts.region && opts.region() != base_region;
      block.values[i] = saved;
      if (plus_off || minus_off) {
        ++report.coords_skipped;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * opts.step);
      const double analytic = static_cast<double>(block.analytic[i]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic), opts.abs_floor});
      const double rel = std::abs(numeric - analytic) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_error || !std::isfinite(rel)) {
        report.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
        report.worst_param = p;
        report.worst_index = i;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

template <typename Real, typename LossFn>
GradCheckReport grad_check(LossFn&& loss, const std::vector<GradCheckParam<Real>>& params,
                           const GradCheckOptions& opts = {}) {
  return grad_check<Real>(std::forward<LossFn>(loss),
                          std::span<const GradCheckParam<Real>>(params), opts);
}

}  // namespace deepsteer
