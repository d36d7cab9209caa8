#include "tfsdiff/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "tfsdiff/error.hpp"

namespace tfsdiff {

double Rng::uniform() {
  // 53 random mantissa bits, shifted half a step off zero.
  constexpr double kStep = 1.0 / 9007199254740992.0;
  return (static_cast<double>(engine_() >> 11) + 0.5) * kStep;
}

double Rng::normal() {
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  require(n > 0, ErrorCode::kInvalidArgument, "Rng::below: n must be positive");
  const std::uint64_t max = std::mt19937_64::max();
  const std::uint64_t limit = max - (max % n + 1) % n;
  std::uint64_t v;
  do {
    v = engine_();
  } while (v > limit);
  return v % n;
}

std::string Rng::state() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

void Rng::set_state(const std::string& state) {
  std::istringstream in(state);
  in >> engine_;
  require(!in.fail(), ErrorCode::kFormat, "Rng: malformed generator state");
}

}  // namespace tfsdiff
