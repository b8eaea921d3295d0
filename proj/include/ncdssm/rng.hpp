#pragma once

#include "ncdssm/common.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace ncdssm {

/// Deterministic random source. Wraps mt19937_64 but derives uniforms and
/// normals from raw bits directly, so streams do not depend on the standard
/// library's distribution implementations.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Box-Muller; draws two uniforms per normal pair.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  Vec normal_vec(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  Mat normal_mat(int rows, int cols) {
    Mat m(rows, cols);
    for (int c = 0; c < cols; ++c)
      for (int r = 0; r < rows; ++r) m(r, c) = normal();
    return m;
  }

  /// Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection-free modulo is fine here; bias is negligible for n << 2^64.
    return engine_() % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Child generator with a stream id; used to hand out independent,
  /// reproducible streams to batch workers.
  Rng spawn(std::uint64_t stream) {
    const std::uint64_t s = engine_() ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    return Rng(s);
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_ << " " << (have_spare_ ? 1 : 0) << " " << spare_;
    return os.str();
  }

  void restore(const std::string& s) {
    std::istringstream is(s);
    int flag = 0;
    is >> engine_ >> flag >> spare_;
    have_spare_ = flag != 0;
    if (is.fail()) throw ConfigError("invalid RNG state string");
  }

private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ncdssm
