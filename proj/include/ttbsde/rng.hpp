#pragma once

#include <cstdint>

namespace ttbsde {

// Counter-based random numbers: every variate is a pure function of
// (seed, stream, k, n, j), so path k is reproducible no matter how the
// work is scheduled across threads.

namespace detail {

inline constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Independent substreams of one seeded generator.
enum class RngStream : std::uint64_t {
    PathIncrements = 1,
    TensorInit = 2,
    ReferenceMc = 3,
    TestData = 4,
    ProblemParams = 5,
};

inline std::uint64_t counter_bits(std::uint64_t seed, RngStream stream, std::uint64_t k,
                                  std::uint64_t n, std::uint64_t j) {
    std::uint64_t h = detail::mix64(seed ^ 0x243f6a8885a308d3ULL);
    h = detail::mix64(h ^ (static_cast<std::uint64_t>(stream) * 0x9e3779b97f4a7c15ULL));
    h = detail::mix64(h ^ (k * 0xd1b54a32d192ed03ULL));
    h = detail::mix64(h ^ (n * 0x8cb92ba72f3d8dd7ULL));
    return detail::mix64(h ^ (j * 0xaef17502108ef2d9ULL));
}

/// Uniform variate in the open interval (0, 1).
inline double counter_uniform(std::uint64_t seed, RngStream stream, std::uint64_t k,
                              std::uint64_t n, std::uint64_t j) {
    const std::uint64_t bits = counter_bits(seed, stream, k, n, j);
    return static_cast<double>(bits >> 11) * 0x1.0p-53 + 0x1.0p-54;
}

/// Inverse standard-normal CDF (Wichura's PPND16 rational approximations;
/// relative error around 1e-15 over (0,1), no transcendental calls on the
/// central branch).
double inverse_normal_cdf(double p);

/// Standard normal variate, deterministic in the counter key.
inline double counter_normal(std::uint64_t seed, RngStream stream, std::uint64_t k,
                             std::uint64_t n, std::uint64_t j) {
    return inverse_normal_cdf(counter_uniform(seed, stream, k, n, j));
}

/// Standard normal CDF (used by tests and the inverse refinement).
double normal_cdf(double x);

}  // namespace ttbsde
