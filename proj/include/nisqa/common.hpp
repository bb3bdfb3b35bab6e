#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>

namespace nisqa {

// Error categories map onto the CLI exit-code contract:
// usage errors -> 1, data errors -> 2, internal errors -> 3.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InternalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic RNG helpers. std::<distribution> output is
// implementation-defined, so corpora and weight init would not be
// byte-stable across standard libraries; these are fully specified.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    // splitmix64
    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, standard normal
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double t = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

    std::uint64_t index(std::uint64_t n) { return next_u64() % n; }

    // Derive an independent stream, e.g. per (condition, file).
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
        Rng r(seed ^ (a * 0xd1342543de82ef95ull) ^ (b * 0xaf251af3b0f025b5ull));
        return r.next_u64();
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// CRC32 (IEEE 802.3, reflected), used by the weight-bundle format.
inline std::uint32_t crc32_update(std::uint32_t crc, const void* data, std::size_t len) {
    static const auto table = [] {
        struct Table { std::uint32_t t[256]; };
        Table tb{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : (c >> 1);
            tb.t[i] = c;
        }
        return tb;
    }();
    const auto* p = static_cast<const unsigned char*>(data);
    crc = ~crc;
    for (std::size_t i = 0; i < len; ++i) crc = table.t[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
    return ~crc;
}

inline std::uint32_t crc32(const void* data, std::size_t len) {
    return crc32_update(0, data, len);
}

}  // namespace nisqa
