#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace captrack {

/// Error thrown on rejected inputs, malformed files and degenerate geometry.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

/// Feature maps run to tens of MB; with glibc defaults those allocations are
/// fresh mmaps whose page faults dominate the math. Raising the thresholds
/// recycles the blocks through the heap. Safe to call more than once.
inline void tune_malloc_for_tensors() {
#if defined(__GLIBC__)
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
        return true;
    }();
    (void)done;
#endif
}

// Deterministic RNG. mt19937_64 has a standard-pinned stream and the
// distributions below are spelled out explicitly, so sequences are identical
// across platforms and standard libraries.
struct Rng {
    std::mt19937_64 gen;
    bool has_spare = false;
    double spare = 0.0;

    explicit Rng(uint64_t seed = 0) : gen(seed) {}

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double mag = std::sqrt(-2.0 * std::log(u1));
        spare = mag * std::sin(2.0 * M_PI * u2);
        has_spare = true;
        return mag * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform integer in [0, n). Modulo bias is irrelevant for n << 2^64.
    int uniform_int(int n) { return static_cast<int>(gen() % static_cast<uint64_t>(n)); }

    bool coin() { return (gen() & 1u) != 0; }
};

}  // namespace captrack
