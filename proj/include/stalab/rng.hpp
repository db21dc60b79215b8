#pragma once

#include <cstdint>
#include <random>

namespace stalab {

// Deterministic stream-splittable RNG. (base_seed, stream_id) fully determine
// the sample sequence, independent of how work is partitioned across workers.
class RngStream {
public:
    RngStream(std::uint64_t base_seed, std::uint64_t stream_id)
        : base_seed_(base_seed), stream_id_(stream_id),
          engine_(mix(base_seed, stream_id)) {}

    std::uint64_t base_seed() const { return base_seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

    // Fresh stream derived from this one's identity; does not consume state.
    RngStream substream(std::uint64_t id) const {
        return RngStream(mix(base_seed_, stream_id_), id);
    }

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::uint64_t next_u64() { return engine_(); }

    // Uniform integer in [1, n].
    std::uint64_t uniform_index(std::uint64_t n) {
        std::uniform_int_distribution<std::uint64_t> d(1, n);
        return d(engine_);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        // splitmix64 finalizer over the pair
        std::uint64_t x = a + 0x9E3779B97F4A7C15ULL * (b + 1);
        x ^= x >> 30; x *= 0xBF58476D1CE4E5B9ULL;
        x ^= x >> 27; x *= 0x94D049BB133111EBULL;
        x ^= x >> 31;
        return x;
    }

    std::uint64_t base_seed_;
    std::uint64_t stream_id_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Stable 64-bit FNV-1a, used to derive subsystem stream ids from names.
inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    return fnv1a64(s.data(), s.size());
}

} // namespace stalab
