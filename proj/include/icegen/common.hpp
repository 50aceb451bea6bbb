#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace icegen {

// Dense types used throughout. All computation runs in double precision;
// on-disk arrays are float32 (see gridpack.hpp).
using Scalar = double;
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using Array2D = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Land cells carry a quiet sentinel; statistics consult the mask, never this value.
inline constexpr Scalar kLandValue = std::numeric_limits<Scalar>::quiet_NaN();

enum class ErrorCode {
  config = 2,
  missing_input = 3,
  grid_mismatch = 4,
  corrupt_data = 5,
  divergence = 6,
  invalid_argument = 7,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) throw Error(code, msg);
}

// FNV-1a, used for file checksums and config hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Counter-based stream derived from a root seed and a tag path, so that every
// (stage, sample, member, ...) owns an independent reproducible sequence
// regardless of worker scheduling.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ull) {}

  static RandomStream from(std::uint64_t root, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = fnv1a64(&root, sizeof(root));
    for (std::uint64_t t : tags) h = fnv1a64(&t, sizeof(t), h);
    return RandomStream(h);
  }

  std::uint64_t next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  Scalar uniform() { return static_cast<Scalar>(next_u64() >> 11) * 0x1.0p-53; }

  Scalar uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller with a cached spare.
  Scalar normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    Scalar u1 = 1.0 - uniform();
    Scalar u2 = uniform();
    Scalar r = std::sqrt(-2.0 * std::log(u1));
    Scalar a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Normal truncated to +-2 sigma, used for weight initialization.
  Scalar truncated_normal() {
    for (;;) {
      Scalar x = normal();
      if (std::abs(x) <= 2.0) return x;
    }
  }

  ArrayX normal_array(Eigen::Index n) {
    ArrayX out(n);
    for (Eigen::Index i = 0; i < n; ++i) out[i] = normal();
    return out;
  }

  // Fisher-Yates over [0, n).
  std::vector<int> permutation(int n) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = n - 1; i > 0; --i) {
      int j = static_cast<int>(next_u64() % static_cast<std::uint64_t>(i + 1));
      std::swap(idx[i], idx[j]);
    }
    return idx;
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  Scalar spare_ = 0.0;
};

std::string format_sig9(Scalar v);  // 9 significant digits, for metric export

}  // namespace icegen
