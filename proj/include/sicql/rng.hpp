// Deterministic seedable RNG with named sub-streams.
//
// Every source of randomness in the pipeline fans out from one root seed to a
// named stream (data collection, parameter init, batch sampling, evaluation),
// so that changing e.g. the evaluation protocol never perturbs the batches a
// training run sees. Identical seed + identical call sequence gives identical
// outputs on every platform; nothing here depends on libstdc++ distribution
// internals.
#pragma once

#include <cmath>
#include <cstdint>

namespace sicql {

// splitmix64 finalizer (stateless hash step).
inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

enum class Stream : uint64_t {
    data = 1,       // offline dataset collection
    init = 2,       // parameter initialization
    batch = 3,      // training batch sampling
    eval = 4,       // test-time rollouts
    calibrate = 5,  // epsilon calibration probes
    world_model = 6,
    misc = 7,
};

class Rng {
public:
    Rng() = default;
    explicit Rng(uint64_t seed) { state_ = mix64(seed + 0x9e3779b97f4a7c15ULL); }

    // Derive an independent generator for (seed, stream, substream). Substreams
    // index parallel units of work (trajectories, batch steps, rollouts) so
    // draw sequences never overlap and never depend on scheduling order.
    static Rng fan(uint64_t seed, Stream stream, uint64_t substream = 0) {
        uint64_t h = mix64(seed + 0x9e3779b97f4a7c15ULL);
        h = mix64(h ^ (static_cast<uint64_t>(stream) * 0xd1342543de82ef95ULL));
        h = mix64(h ^ (substream * 0x2545f4914f6cdd1dULL));
        Rng r;
        r.state_ = h;
        return r;
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix64(state_);
    }

    // [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Unbiased-to-2^-64 integer in [0, n) via multiply-shift.
    int uniform_int(int n) {
        return static_cast<int>(
            (static_cast<unsigned __int128>(next_u64()) * static_cast<uint64_t>(n)) >> 64);
    }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 6.283185307179586476925286766559 * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    uint64_t state_ = 0x853c49e6748fea9bULL;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace sicql
