#include "prefixprop/rng.hpp"

#include <cmath>
#include <numbers>

namespace prefixprop {

std::uint64_t Rng::below(std::uint64_t bound) noexcept {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    for (;;) {
        const std::uint64_t x = next_u64();
        if (x < limit) {
            return x % bound;
        }
    }
}

double Rng::normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t hash_label(std::string_view label) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Rng Rng::fork(std::string_view label) const noexcept {
    Rng mixer(state_ ^ hash_label(label));
    return Rng(mixer.next_u64());
}

Rng Rng::fork(std::uint64_t index) const noexcept {
    Rng mixer(state_ ^ (index * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL));
    return Rng(mixer.next_u64());
}

}  // namespace prefixprop
