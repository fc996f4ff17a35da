#pragma once
#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace ccdiff {

// Counter-style deterministic RNG. Every consumer derives its own stream from
// (seed, purpose tag, indices...), so adding or removing a draw in one place
// never shifts the values another place sees. That is what makes paired runs
// (same seed, different strategy) consume bit-identical noise.

inline std::uint64_t splitmix64(std::uint64_t& s) {
    s += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d493bdd3c81b27ull;
    return z ^ (z >> 31);
}

// Hash-chain a seed with a path of integers into a stream key.
inline std::uint64_t rng_key(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t k = seed ^ 0x6a09e667f3bcc909ull;
    splitmix64(k);
    for (std::uint64_t p : path) {
        k ^= p + 0x9e3779b97f4a7c15ull + (k << 6) + (k >> 2);
        splitmix64(k);
    }
    return k;
}

// Purpose tags (first path element) so distinct uses of the same seed/iter
// never collide.
namespace rngtag {
constexpr std::uint64_t init_weights  = 1;
constexpr std::uint64_t data_scene    = 2;
constexpr std::uint64_t train_t       = 3;
constexpr std::uint64_t train_noise   = 4;
constexpr std::uint64_t train_batch   = 5;
constexpr std::uint64_t sample_noise  = 6;
constexpr std::uint64_t sample_start  = 7;
constexpr std::uint64_t misc          = 8;
} // namespace rngtag

class RngStream {
public:
    explicit RngStream(std::uint64_t key) : state_(key) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // inclusive on both ends
    int uniform_int(int lo, int hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    // standard normal via Box-Muller; the spare value is cached
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        // avoid log(0)
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace ccdiff
