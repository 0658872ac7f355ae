#pragma once

#include <cstdint>
#include <random>

namespace rlt {

// splitmix64; used to derive independent sub-seeds from (base, stream) pairs
// so per-layer / per-ticket streams do not alias.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Seeded stream with explicit mappings (no std::uniform_*_distribution, whose
// output is implementation-defined); draws are reproducible across platforms.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next() { return eng_(); }

    // [0,1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0,n)
    int uniform_int(int n) {
        // modulo bias is < 2^-50 for any n that fits in int
        return static_cast<int>(next() % static_cast<std::uint64_t>(n));
    }

    bool bernoulli(double p) { return uniform() < p; }

  private:
    std::mt19937_64 eng_;
};

}  // namespace rlt
