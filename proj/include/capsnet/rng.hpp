#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace capsnet {

// Seeded RNG with portable sampling. std::mt19937 output is pinned by the
// standard, but the std distributions are not, so uniform/normal are done
// by hand to keep streams identical across compilers.
class Rng {
public:
    Rng() : Rng(0) {}
    explicit Rng(uint64_t seed) : engine_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

    uint32_t next_u32() { return engine_(); }

    // uniform in [0, 1) with 24 bits of mantissa
    double uniform() { return (next_u32() >> 8) * (1.0 / 16777216.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint32_t below(uint32_t n) { return static_cast<uint32_t>(uniform() * n); }

    // Box-Muller; one value per call (the twin is discarded so the stream
    // stays a pure function of call count)
    double normal() {
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 1e-12);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = below(static_cast<uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
    }

    bool operator==(const Rng& o) const { return engine_ == o.engine_; }

private:
    std::mt19937 engine_;
};

}  // namespace capsnet
