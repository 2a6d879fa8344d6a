#include "widenet/rng.hpp"

#include <cmath>

#include "widenet/error.hpp"

namespace widenet {

namespace {

// SplitMix64 output function over a Weyl sequence seeded at `seed`.
std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kWeylIncrement = 0x9E3779B97F4A7C15ull;

}  // namespace

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return mix64(seed_ + kWeylIncrement * counter_);
}

double RngStream::uniform() {
  // 53 high bits, shifted into (0, 1] so log() below is safe.
  return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
}

double RngStream::gaussian(double mean, double stddev) {
  if (stddev < 0.0) {
    throw NumericError("gaussian: negative standard deviation " +
                       std::to_string(stddev));
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double z = std::sqrt(-2.0 * std::log(u1)) *
                   std::cos(2.0 * 3.14159265358979323846 * u2);
  return mean + stddev * z;
}

double RngStream::truncated_gaussian(double mean, double stddev) {
  if (stddev < 0.0) {
    throw NumericError("truncated_gaussian: negative standard deviation " +
                       std::to_string(stddev));
  }
  for (;;) {
    const double u1 = uniform();
    const double u2 = uniform();
    const double z = std::sqrt(-2.0 * std::log(u1)) *
                     std::cos(2.0 * 3.14159265358979323846 * u2);
    if (z >= -2.0 && z <= 2.0) return mean + stddev * z;
  }
}

}  // namespace widenet
