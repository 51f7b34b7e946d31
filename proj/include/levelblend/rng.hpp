#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "levelblend/common.hpp"

namespace lvb {

// Counter-based SplitMix64 generator. Streams split off by label, so every
// subsystem draws from its own deterministic sequence regardless of call
// order elsewhere.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    Rng child(std::string_view label) const {
        return Rng(mix64(state_ ^ (fnv1a64(label) * 0x9E3779B97F4A7C15ull)));
    }

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        return mix64(state_);
    }

    // [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float uniform(float lo, float hi) {
        return lo + static_cast<float>(next_double()) * (hi - lo);
    }

    // [0, n)
    std::size_t index(std::size_t n) { return n == 0 ? 0 : next_u64() % n; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

} // namespace lvb
