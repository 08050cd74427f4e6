#pragma once

#include <cstdint>
#include <random>

namespace pacbus {

/// Addressable source of reproducible randomness.
///
/// A stream is identified by (seed, stream, substream). Identical identifiers
/// always reproduce identical draws, independent of platform and of any other
/// stream, which is what lets task generation, posterior sampling and SGD
/// sample orders run in parallel without losing bit-exact replay.
struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    std::uint64_t substream = 0;

    RngStream child(std::uint64_t a, std::uint64_t b = 0) const;
};

/// Concrete generator for one stream. Normal draws use Box-Muller on top of
/// mt19937_64 rather than std::normal_distribution, whose output sequence is
/// not pinned down by the standard; certificates must replay bit-exactly.
class Rng {
  public:
    explicit Rng(const RngStream& s);

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform01();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);
    /// Standard normal draw.
    double normal();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

  private:
    std::mt19937_64 engine_;
    double cached_normal_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace pacbus
