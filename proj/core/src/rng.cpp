#include "pacbus/rng.hpp"

#include <cmath>

namespace pacbus {

namespace {

// splitmix64; used only to mix stream identifiers into a seed.
std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t mix_key(std::uint64_t seed, std::uint64_t stream, std::uint64_t sub) {
    std::uint64_t k = mix64(seed);
    k = mix64(k ^ mix64(stream + 0x2545f4914f6cdd1dULL));
    k = mix64(k ^ mix64(sub + 0x632be59bd9b4e019ULL));
    return k;
}

}  // namespace

RngStream RngStream::child(std::uint64_t a, std::uint64_t b) const {
    RngStream s;
    s.seed = seed;
    s.stream = mix64(stream ^ mix64(a + 0x9e3779b97f4a7c15ULL));
    s.substream = mix64(substream ^ mix64(b + 0x7f4a7c159e3779b9ULL));
    return s;
}

Rng::Rng(const RngStream& s) : engine_(mix_key(s.seed, s.stream, s.substream)) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

double Rng::normal() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_normal_;
    }
    // Box-Muller; u1 is kept away from 0 so the log is finite.
    double u1 = 0.0;
    do {
        u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_normal_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
}

std::uint64_t Rng::below(std::uint64_t n) {
    // Rejection sampling to stay unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = 0;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

}  // namespace pacbus
