#pragma once

// Shared primitives: error types, dense 2-D grids, and a deterministic RNG.
// Everything downstream is seeded explicitly; no global random state.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cogmap {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input dimensions disagree (depth vs intrinsics, flow vs mask, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Input is structurally valid but carries no usable signal
// (too few samples, all values identical, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

// Caller violated an operation's stated precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// File/serialization failure; message names the offending file.
class IoError : public Error {
 public:
  using Error::Error;
};

// Row-major W x H grid. operator()(x, y) addresses column x, row y.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int width, int height, T fill = T{})
      : w_(width), h_(height), data_(static_cast<size_t>(width) * height, fill) {
    if (width < 0 || height < 0) throw ShapeError("Grid: negative dimensions");
  }

  int width() const { return w_; }
  int height() const { return h_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int x, int y) { return data_[static_cast<size_t>(y) * w_ + x]; }
  const T& operator()(int x, int y) const { return data_[static_cast<size_t>(y) * w_ + x]; }

  bool in_bounds(int x, int y) const { return x >= 0 && x < w_ && y >= 0 && y < h_; }

  template <typename U>
  bool same_size(const Grid<U>& o) const {
    return w_ == o.width() && h_ == o.height();
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Grid& o) const {
    return w_ == o.w_ && h_ == o.h_ && data_ == o.data_;
  }

 private:
  int w_ = 0;
  int h_ = 0;
  std::vector<T> data_;
};

using MaskGrid = Grid<std::uint8_t>;

inline size_t count_true(const MaskGrid& m) {
  size_t n = 0;
  for (auto v : m.data()) n += (v != 0);
  return n;
}

// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// std:: distributions are not, so the transforms live here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t index(std::uint64_t n) { return eng_() % n; }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(index(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  // Standard normal via Box-Muller, one spare cached.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double gaussian(double mean, double sigma) { return mean + sigma * gaussian(); }

  // Derive an independent stream (for per-frame / per-scene sub-generators).
  Rng fork(std::uint64_t salt) {
    std::uint64_t s = eng_() ^ (salt * 0x9e3779b97f4a7c15ULL + 0xd1b54a32d192ed03ULL);
    return Rng(s);
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cogmap
