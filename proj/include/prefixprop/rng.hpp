#pragma once

#include <cstdint>
#include <string_view>

namespace prefixprop {

/// SplitMix64 (Steele, Lea & Flood 2014): state advances by the golden-ratio
/// increment 0x9E3779B97F4A7C15 and each output is the state passed through
/// the Stafford "Mix13" finalizer. Chosen for datasets and initialization
/// because the algorithm is a few lines and reproducible in any language.
class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next_u64() noexcept {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1) built from the top 53 bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, bound) by rejection, no modulo bias. bound > 0.
    std::uint64_t below(std::uint64_t bound) noexcept;

    // Standard normal via Box-Muller; one draw per call (the pair's sine half is discarded).
    double normal() noexcept;

    // Independent generator for a named sub-stream.
    Rng fork(std::string_view label) const noexcept;
    Rng fork(std::uint64_t index) const noexcept;

    std::uint64_t state() const noexcept { return state_; }

private:
    std::uint64_t state_;
};

// FNV-1a, used to turn stream labels into seeds.
std::uint64_t hash_label(std::string_view label) noexcept;

template <typename It>
void shuffle(It first, It last, Rng& rng) {
    // Fisher-Yates, highest index first.
    auto n = last - first;
    for (auto i = n - 1; i > 0; --i) {
        auto j = static_cast<decltype(i)>(rng.below(static_cast<std::uint64_t>(i) + 1));
        using std::swap;
        swap(first[i], first[j]);
    }
}

}  // namespace prefixprop
