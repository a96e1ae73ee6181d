#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

namespace unbias {

template <typename Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using DenseVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Real = double;
using Matrix = DenseMatrix<Real>;
using Vector = DenseVector<Real>;
using IntVector = Eigen::VectorXi;
using Index = Eigen::Index;

// Error taxonomy; the CLI maps these onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
// Checkpoint / CSV decoding failures.
struct FormatError : Error {
  using Error::Error;
};

inline std::string shape_str(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}
template <typename Derived>
std::string shape_str(const Eigen::MatrixBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

inline std::string format_real(Real v, int sig_digits = 17) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", sig_digits, v);
  return buf;
}

// Deterministic RNG. The uniform/normal transforms are done by hand from the
// raw 64-bit stream so a seed pins the exact sample sequence independent of
// the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix(seed)) {}

  uint64_t next_u64() {
    // xorshift* over splitmix-initialized state
    uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545F4914F6CDD1DULL;
  }

  // Uniform in [0, 1), 53-bit resolution.
  Real uniform() { return static_cast<Real>(next_u64() >> 11) * 0x1.0p-53; }

  Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; caches the spare draw.
  Real normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    Real u1 = uniform();
    Real u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const Real r = std::sqrt(-2.0 * std::log(u1));
    const Real theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Uniform integer in [0, n) by rejection.
  uint64_t bounded(uint64_t n) {
    if (n == 0) throw Error("Rng::bounded: n must be positive");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  // Index into a probability vector by CDF inversion.
  Index categorical(const Vector& probs) {
    const Real u = uniform();
    Real acc = 0.0;
    for (Index i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return i;
    }
    return probs.size() - 1;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[bounded(i)]);
    }
  }

 private:
  static uint64_t splitmix(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return (x ^ (x >> 31)) | 1ULL;  // nonzero state for xorshift
  }

  uint64_t state_;
  bool has_spare_ = false;
  Real spare_ = 0.0;
};

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xCBF29CE484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xCBF29CE484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

// Independent named sub-streams from one base seed.
inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t index = 0) {
  uint64_t h = fnv1a64(tag);
  h = fnv1a64(&base, sizeof(base), h);
  h = fnv1a64(&index, sizeof(index), h);
  return h;
}

// Bit-exact fingerprint of matrix contents, used by the gating tests.
inline uint64_t byte_checksum(const Matrix& m, uint64_t h = 0xCBF29CE484222325ULL) {
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i) h = fnv1a64(&m(i, j), sizeof(Real), h);
  return h;
}

}  // namespace unbias
