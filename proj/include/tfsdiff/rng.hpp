#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace tfsdiff {

/// Seeded generator with a fully serializable state. Normal draws use the
/// Box-Muller transform without caching the second variate, so the engine
/// state alone determines every future draw.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Uniform in the open interval (0, 1).
  double uniform();
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::string state() const;
  void set_state(const std::string& state);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tfsdiff
