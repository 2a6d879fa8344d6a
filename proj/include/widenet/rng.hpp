#pragma once

#include <cstdint>

namespace widenet {

// Counter-based random stream: the value of draw n is a pure function of
// (seed, n), so any position in the stream can be reproduced by setting the
// counter. Gaussian variates use Box-Muller on two uniform draws and
// therefore consume exactly two counter ticks each; this mapping is fixed so
// that stored (seed, counter) pairs stay valid across versions.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

  // One counter tick.
  std::uint64_t next_u64();

  // Uniform on (0, 1]; one tick.
  double uniform();

  // mean + std * z with z standard normal; two ticks. std must be >= 0.
  double gaussian(double mean, double stddev);

  // Gaussian conditioned on |z| <= 2; consumes a variable number of ticks.
  double truncated_gaussian(double mean, double stddev);

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace widenet
