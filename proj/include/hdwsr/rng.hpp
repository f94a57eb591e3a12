#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "hdwsr/errors.hpp"

namespace hdwsr {

// Deterministic random source. Gaussian draws use an explicit Box-Muller
// transform instead of std::normal_distribution so that streams are
// identical across standard library implementations and can be serialized
// (the cached spare value is part of the state).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // Uniform in [0, 1).
  double uniform() {
    // 53 random bits scaled to [0,1).
    return (gen_() >> 11) * 0x1.0p-53;
  }

  // Standard normal.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Guard against log(0).
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [lo, hi] inclusive, rejection-free via 64-bit modulo
  // avoidance is unnecessary here: ranges are tiny compared to 2^64.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw ContractError("uniform_int: hi < lo");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(gen_() % span);
  }

  std::uint64_t raw() { return gen_(); }

  // State round-trips through text so checkpoints can resume the exact stream.
  std::string save_state() const {
    std::ostringstream os;
    os << gen_ << " " << (has_spare_ ? 1 : 0) << " ";
    os.precision(17);
    os << spare_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    int flag = 0;
    is >> gen_ >> flag >> spare_;
    if (!is) throw IoError("Rng::load_state: malformed state string");
    has_spare_ = (flag != 0);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace hdwsr
