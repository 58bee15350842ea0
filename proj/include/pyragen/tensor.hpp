#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <new>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace pyragen {

// Error taxonomy. The CLI maps ConfigError/ArgumentError/ShapeError to exit
// code 2 and NumericalError to exit code 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ArgumentError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct DegenerateInputError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};

// NCHW extent. Scalars are {1,1,1,1}.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const { return std::size_t(n) * c * h * w; }
  std::size_t plane() const { return std::size_t(h) * w; }
  std::size_t sample() const { return std::size_t(c) * h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '[' << n << ',' << c << ',' << h << ',' << w << ']';
    return os.str();
  }
};

// 64-byte aligned storage. Vectorized reductions peel by address alignment,
// so a fixed base alignment keeps their summation order, and results, stable.
inline constexpr std::size_t kTensorAlignment = 64;

template <class T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kTensorAlignment)));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(kTensorAlignment)); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, const std::vector<T>& data) : shape_(shape), data_(data.begin(), data.end()) {
    if (data_.size() != shape_.numel())
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
  }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int n, int c, int y, int x) {
    return data_[((std::size_t(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  const T& at(int n, int c, int y, int x) const {
    return data_[((std::size_t(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }

  T* sample(int n) { return data_.data() + std::size_t(n) * shape_.sample(); }
  const T* sample(int n) const { return data_.data() + std::size_t(n) * shape_.sample(); }
  T* plane(int n, int c) { return sample(n) + std::size_t(c) * shape_.plane(); }
  const T* plane(int n, int c) const { return sample(n) + std::size_t(c) * shape_.plane(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_.str());
    return data_[0];
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_{0, 0, 0, 0};
  AlignedVector<T> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
  if (!(a == b)) throw ShapeError(what + ": shape mismatch " + a.str() + " vs " + b.str());
}

inline bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

// Seeded engine plus portable draws. std distributions are implementation
// defined, so every draw that feeds a persisted artifact goes through these.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) { return double(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline int uniform_int(Rng& rng, int lo, int hi) {
  // inclusive range
  const auto span = std::uint64_t(hi - lo + 1);
  return lo + int(rng() % span);
}

inline double normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

// 64-bit FNV-1a; used for config hashes and digests.
inline std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
  return fnv1a(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[std::size_t(i)] = digits[v & 0xf];
  return out;
}

// Denormal floats stall the float kernels; set flush-to-zero and
// denormals-are-zero for the calling thread.
inline void flush_denormals() {
#if defined(__SSE__)
  _mm_setcsr(_mm_getcsr() | 0x8040);
#endif
}

}  // namespace pyragen
