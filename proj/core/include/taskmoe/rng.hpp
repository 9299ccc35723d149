#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "taskmoe/matrix.hpp"

namespace taskmoe {

/// Seeded generator with distribution code written out here rather than
/// taken from <random>, whose distributions are implementation-defined.
/// Seeds therefore reproduce bit-identical streams across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be nonzero.
    std::uint64_t below(std::uint64_t n);

    /// Standard normal (Box-Muller, one value per call).
    double normal();

    /// Index drawn from a discrete probability vector (need not be normalized).
    std::size_t categorical(const std::vector<double>& weights);

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[below(i)]);
        }
    }

    Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev);

private:
    std::mt19937_64 engine_;
};

/// Mixes a base seed with a stream id (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

} // namespace taskmoe
