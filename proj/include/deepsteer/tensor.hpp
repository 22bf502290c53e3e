#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepsteer {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Extents of a rank-4 activation: width, height, channels, time.
struct Dims4 {
  std::size_t w = 1, h = 1, c = 1, t = 1;

  std::size_t size() const { return w * h * c * t; }
  bool operator==(const Dims4&) const = default;

  std::string str() const {
    return std::to_string(w) + "x" + std::to_string(h) + "x" + std::to_string(c) + "x" +
           std::to_string(t);
  }
};

/// Dense rank-4 array, W fastest-varying and T slowest.
template <typename Real>
class Tensor4 {
 public:
  using value_type = Real;

  Tensor4() : dims_{1, 1, 1, 1}, data_(1, Real(0)) {}

  explicit Tensor4(Dims4 dims, Real fill = Real(0)) : dims_(dims) {
    if (dims.w == 0 || dims.h == 0 || dims.c == 0 || dims.t == 0) {
      throw DimensionError("Tensor4: all dims must be >= 1, got " + dims.str());
    }
    data_.assign(dims.size(), fill);
  }

  Tensor4(std::size_t w, std::size_t h, std::size_t c, std::size_t t, Real fill = Real(0))
      : Tensor4(Dims4{w, h, c, t}, fill) {}

  const Dims4& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(std::size_t x, std::size_t y, std::size_t ch, std::size_t tt) const {
    return ((tt * dims_.c + ch) * dims_.h + y) * dims_.w + x;
  }

  Real& operator()(std::size_t x, std::size_t y, std::size_t ch, std::size_t tt) {
    return data_[index(x, y, ch, tt)];
  }
  Real operator()(std::size_t x, std::size_t y, std::size_t ch, std::size_t tt) const {
    return data_[index(x, y, ch, tt)];
  }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }

  /// Copy of time step `tt` as a T=1 tensor.
  Tensor4 time_slice(std::size_t tt) const {
    if (tt >= dims_.t) throw DimensionError("time_slice: index out of range");
    Tensor4 out(Dims4{dims_.w, dims_.h, dims_.c, 1});
    const std::size_t n = dims_.w * dims_.h * dims_.c;
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(tt * n), n, out.data_.begin());
    return out;
  }

  void set_time_slice(std::size_t tt, const Tensor4& slice) {
    const std::size_t n = dims_.w * dims_.h * dims_.c;
    if (tt >= dims_.t || slice.size() != n) throw DimensionError("set_time_slice: shape mismatch");
    std::copy(slice.data_.begin(), slice.data_.end(),
              data_.begin() + static_cast<std::ptrdiff_t>(tt * n));
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (Real v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename Other>
  Tensor4<Other> cast() const {
    Tensor4<Other> out(dims_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<Other>(data_[i]);
    return out;
  }

  bool operator==(const Tensor4&) const = default;

 private:
  Dims4 dims_;
  std::vector<Real> data_;
};

/// Spatio-temporal kernel extents (kw, kh, c_in, c_out, kt).
struct Dims5 {
  std::size_t kw = 1, kh = 1, c_in = 1, c_out = 1, kt = 1;

  std::size_t size() const { return kw * kh * c_in * c_out * kt; }
  bool operator==(const Dims5&) const = default;
};

/// Convolution kernel; kw fastest-varying, kt slowest.
template <typename Real>
class Kernel5 {
 public:
  Kernel5() : Kernel5(Dims5{}) {}

  explicit Kernel5(Dims5 dims, Real fill = Real(0)) : dims_(dims) {
    if (dims.kw == 0 || dims.kh == 0 || dims.c_in == 0 || dims.c_out == 0 || dims.kt == 0) {
      throw DimensionError("Kernel5: all dims must be >= 1");
    }
    data_.assign(dims.size(), fill);
  }

  const Dims5& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(std::size_t x, std::size_t y, std::size_t ci, std::size_t co,
                    std::size_t dt) const {
    return (((dt * dims_.c_out + co) * dims_.c_in + ci) * dims_.kh + y) * dims_.kw + x;
  }

  Real& operator()(std::size_t x, std::size_t y, std::size_t ci, std::size_t co, std::size_t dt) {
    return data_[index(x, y, ci, co, dt)];
  }
  Real operator()(std::size_t x, std::size_t y, std::size_t ci, std::size_t co,
                  std::size_t dt) const {
    return data_[index(x, y, ci, co, dt)];
  }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }

  bool operator==(const Kernel5&) const = default;

 private:
  Dims5 dims_;
  std::vector<Real> data_;
};

/// Fully-connected layer: y = W x + b, W row-major (rows x cols).
template <typename Real>
struct DenseWeights {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> weights;
  std::vector<Real> bias;

  DenseWeights() = default;
  DenseWeights(std::size_t r, std::size_t c) : rows(r), cols(c), weights(r * c, Real(0)), bias(r, Real(0)) {}

  Real& at(std::size_t r, std::size_t c) { return weights[r * cols + c]; }
  Real at(std::size_t r, std::size_t c) const { return weights[r * cols + c]; }

  bool operator==(const DenseWeights&) const = default;
};

// ---------------------------------------------------------------------------
// DST4 container: "DST4", u32 W,H,C,T (LE), then float32 LE payload.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("unexpected end of stream");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) throw IoError("unexpected end of stream");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline float get_f32(std::istream& is) {
  std::uint32_t bits = get_u32(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

template <typename Real>
void write_tensor(std::ostream& os, const Tensor4<Real>& t) {
  os.write("DST4", 4);
  const Dims4& d = t.dims();
  for (std::size_t v : {d.w, d.h, d.c, d.t}) detail::put_u32(os, static_cast<std::uint32_t>(v));
  for (Real v : t.values()) detail::put_f32(os, static_cast<float>(v));
  if (!os) throw IoError("write_tensor: stream failure");
}

template <typename Real>
Tensor4<Real> read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DST4", 4) != 0) {
    throw IoError("read_tensor: bad magic");
  }
  Dims4 d;
  d.w = detail::get_u32(is);
  d.h = detail::get_u32(is);
  d.c = detail::get_u32(is);
  d.t = detail::get_u32(is);
  Tensor4<Real> t(d);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(detail::get_f32(is));
  return t;
}

template <typename Real>
void save_tensor(const std::string& path, const Tensor4<Real>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path);
  write_tensor(os, t);
}

template <typename Real>
Tensor4<Real> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_tensor<Real>(is);
}

}  // namespace deepsteer
