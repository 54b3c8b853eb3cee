// Common vector aliases, error types and the deterministic RNG used across the
// library.
#ifndef METAGRAD_CORE_HPP
#define METAGRAD_CORE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace metagrad {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using VectorXd = Vector<double>;
using MatrixXd = Matrix<double>;
using Index = Eigen::Index;

enum class ErrorKind {
  InvalidArgument,
  Config,
  Divergence,
  Budget,
  UndefinedMetric,
  Io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Raised when a training or replay step produces a non-finite value.
/// `step` is the offending step index, or -1 when not tied to a step.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step = -1)
      : Error(ErrorKind::Divergence, what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::InvalidArgument, what);
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& x) {
  return x.allFinite();
}

template <typename Scalar>
void check_finite(Scalar value, const char* what) {
  using std::isfinite;
  if (!isfinite(value))
    throw DivergenceError(std::string("non-finite ") + what);
}

/// Seeded random stream with a portable output sequence. std::mt19937_64 is
/// fully specified by the standard, but the std distributions are not, so
/// uniform, normal and bounded-integer draws are implemented here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, bound), rejection sampled (no modulo bias).
  std::uint64_t below(std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % bound;
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// splitmix64 finalizer; derives independent child seeds from (seed, stream).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Elementwise relative error |a-b| / max(|a|, |b|, floor), maximized over
/// coordinates. `floor` keeps coordinates that are zero in both vectors from
/// dividing by zero.
inline double max_relative_error(const VectorXd& a, const VectorXd& b,
                                 double floor = 1e-300) {
  require(a.size() == b.size(), "max_relative_error: size mismatch");
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double denom =
        std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

/// 64-bit FNV-1a, incrementally updatable.
class Fnv1a {
 public:
  Fnv1a& update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      hash_ ^= bytes[i];
      hash_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(const std::string& text) {
    return update(text.data(), text.size());
  }
  std::uint64_t value() const { return hash_; }
  std::string hex() const {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 0; i < 16; ++i)
      out[15 - i] = kDigits[(hash_ >> (4 * i)) & 0xf];
    return out;
  }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline double cosine_similarity(const VectorXd& a, const VectorXd& b) {
  require(a.size() == b.size(), "cosine_similarity: size mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace metagrad

#endif  // METAGRAD_CORE_HPP
