#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace poet {

// Error categories. The CLI maps these onto exit codes:
// config=2, data=3, training=4, io=5 (anything else = 1).
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error { using Error::Error; };     // bad parameters / invalid config
struct ParseError : Error { using Error::Error; };      // malformed external data
struct ContractError : Error { using Error::Error; };   // violated call contract
struct NumericError : Error { using Error::Error; };    // numeric degeneracy (zero norms, ...)
struct TrainingError : Error { using Error::Error; };   // divergence, non-finite losses
struct ProtocolError : Error { using Error::Error; };   // session/class protocol violations
struct IntegrityError : Error { using Error::Error; };  // corrupt checkpoints
struct IoError : Error { using Error::Error; };         // filesystem failures

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

// Deterministic RNG. splitmix64 core with explicit uniform/normal mappings so
// streams are bit-identical regardless of the standard library in use.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // [0, n)
    int uniform_int(int n) {
        check(n > 0, "uniform_int: n must be positive");
        int k = static_cast<int>(uniform() * n);
        return k < n ? k : n - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            std::swap(v[static_cast<std::size_t>(i)],
                      v[static_cast<std::size_t>(uniform_int(i + 1))]);
        }
    }

    // Draw k distinct indices from [0, n) in selection order.
    std::vector<int> sample_without_replacement(int n, int k) {
        check(k >= 0 && k <= n, "sample_without_replacement: k out of range");
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        shuffle(idx);
        idx.resize(static_cast<std::size_t>(k));
        return idx;
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Independent sub-stream seed for (seed, tag) pairs.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    Rng r(seed ^ (tag * 0xd1342543de82ef95ULL));
    return r.next_u64();
}

// FNV-1a over a byte string; used to key run directories by config content.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace poet
