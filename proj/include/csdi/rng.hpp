#pragma once

// Deterministic random number generation. All randomness in the project flows
// through Rng so that a (seed, stream) pair fully determines every draw,
// independent of platform library details. Gaussian sampling is Box-Muller
// with an explicit cached spare rather than std::normal_distribution, whose
// algorithm is implementation-defined.

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "csdi/common.hpp"

namespace csdi {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Mixes a base seed with stream indices; used to derive independent
// per-image / per-run streams that are stable under any scheduling.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t h = splitmix64(base ^ 0x8f1bbcdcbfa53e0bull);
    h = splitmix64(h ^ splitmix64(a));
    h = splitmix64(h ^ splitmix64(b ^ 0x2545f4914f6cdd1dull));
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Simple rejection keeps it exact.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw NumericError("Rng::below: n must be positive");
        std::uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
        for (;;) {
            std::uint64_t r = engine_();
            if (r >= threshold) return r % n;
        }
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // Box-Muller; u1 in (0,1] to keep the log finite.
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double rademacher() { return (engine_() & 1ull) ? 1.0 : -1.0; }

    void fill_normal(std::vector<double>& out) {
        for (double& x : out) x = normal();
    }

    // State serialization for checkpoints. The spare is flushed first so the
    // state is a plain mt19937_64 stream.
    std::string save_state() const {
        std::ostringstream os;
        os << engine_;
        std::ostringstream out;
        out << (has_spare_ ? 1 : 0) << ' ';
        // Hex-encode the spare to make the round trip bit-exact.
        std::uint64_t bits = 0;
        std::memcpy(&bits, &spare_, sizeof(bits));
        out << to_hex_u64(bits) << ' ' << os.str();
        return out.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        int has = 0;
        std::string hex;
        if (!(is >> has >> hex)) throw IoError("Rng::load_state: malformed state string");
        has_spare_ = has != 0;
        std::uint64_t bits = 0;
        for (char c : hex) {
            bits <<= 4;
            if (c >= '0' && c <= '9')
                bits |= static_cast<std::uint64_t>(c - '0');
            else if (c >= 'a' && c <= 'f')
                bits |= static_cast<std::uint64_t>(c - 'a' + 10);
            else
                throw IoError("Rng::load_state: bad hex");
        }
        std::memcpy(&spare_, &bits, sizeof(spare_));
        if (!(is >> engine_)) throw IoError("Rng::load_state: malformed engine state");
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace csdi
