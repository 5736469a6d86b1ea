#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cadtrans {

// Deterministic random stream. std::mt19937_64 output is specified exactly by
// the standard; the distributions here are hand-rolled because the standard
// library distribution objects are implementation-defined and would break
// byte-identical golden files.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // i in [0, n)
    std::uint64_t below(std::uint64_t n) {
        // Rejection-free modulo is fine here: n is tiny relative to 2^64 in
        // every use, so the bias is far below any observable effect, and the
        // result stays deterministic.
        return engine_() % n;
    }

    // Standard normal via Box-Muller.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Fisher-Yates over an index container.
    template <typename Vec>
    void shuffle(Vec& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    // Stateless mix for deriving independent per-sample seeds (splitmix64).
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace cadtrans
