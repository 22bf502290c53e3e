#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <span>
#include <vector>

#include <unistd.h>

#include "deepsteer/tensor.hpp"

namespace deepsteer::testing {

inline std::mt19937_64& shared_rng() {
  static std::mt19937_64 rng(12345);
  return rng;
}

template <typename Real = double>
Tensor4<Real> random_tensor(Dims4 d, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor4<Real> t(d);
  for (auto& v : t.values()) v = static_cast<Real>(u(rng));
  return t;
}

template <typename Real = double>
Kernel5<Real> random_kernel(Dims5 d, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Kernel5<Real> k(d);
  for (auto& v : k.values()) v = static_cast<Real>(u(rng));
  return k;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                                         double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline std::size_t uniform_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Probe loss <a, b>, accumulated in extended precision so that finite
/// differences see only the round-off of the perturbed terms.
template <typename A, typename B>
double dot(const A& a, const B& b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += static_cast<long double>(a[i]) * static_cast<long double>(b[i]);
  }
  return static_cast<double>(s);
}

/// Straight five-loop valid convolution, written independently of the library kernel.
inline Tensor4<double> conv_oracle(const Tensor4<double>& in, const Kernel5<double>& k,
                                   std::size_t sw, std::size_t sh) {
  const auto& d = in.dims();
  const auto& kd = k.dims();
  const std::size_t ow = (d.w - kd.kw) / sw + 1, oh = (d.h - kd.kh) / sh + 1, ot = d.t - kd.kt + 1;
  Tensor4<double> out(ow, oh, kd.c_out, ot);
  for (std::size_t t = 0; t < ot; ++t)
    for (std::size_t co = 0; co < kd.c_out; ++co)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double s = 0;
          for (std::size_t dt = 0; dt < kd.kt; ++dt)
            for (std::size_t ci = 0; ci < kd.c_in; ++ci)
              for (std::size_t ky = 0; ky < kd.kh; ++ky)
                for (std::size_t kx = 0; kx < kd.kw; ++kx)
                  s += in(x * sw + kx, y * sh + ky, ci, t + dt) * k(kx, ky, ci, co, dt);
          out(x, y, co, t) = s;
        }
  return out;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<unsigned> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("deepsteer_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace deepsteer::testing
