#ifndef MALDIKIT_COMMON_HPP
#define MALDIKIT_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace maldikit {

// Bad or inconsistent input data (files, corpora, unknown labels, ...).
// The CLI maps this to exit code 3.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure (divergence, non-finite loss, ...). CLI exit code 4.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_name(std::string_view name) {
    // FNV-1a
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Named, reproducible random stream. All randomness in the library flows
// through explicit streams; there is no global RNG. Streams derived via
// derive() are independent of draw order on the parent.
class RngStream {
  public:
    explicit RngStream(uint64_t seed) : base_(seed) { reseed(seed); }
    RngStream(uint64_t seed, std::string_view name) : RngStream(splitmix64(seed ^ hash_name(name))) {}

    RngStream derive(std::string_view name) const { return RngStream(base_, name); }
    RngStream derive(uint64_t index) const { return RngStream(splitmix64(base_ ^ splitmix64(index + 0x51ed2701ULL))); }

    uint64_t next_u64() {
        // xoshiro256** — small, fast, fully specified (std engines have
        // implementation-defined distributions, so we roll everything here).
        uint64_t result = rotl(s_[1] * 5, 7) * 9;
        uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n) {
        // modulo is biased for huge n; n here is corpus-sized
        return int64_t(next_u64() % uint64_t(n));
    }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    void fill_normal(std::vector<double>& out) {
        for (auto& x : out) x = normal();
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
            int64_t j = uniform_int(i + 1);
            std::swap(v[size_t(i)], v[size_t(j)]);
        }
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& s : s_) s = x = splitmix64(x);
        have_spare_ = false;
    }

    uint64_t base_;
    uint64_t s_[4];
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Deterministic parallel map: fn(i) for i in [0, n). Each index is computed
// by exactly one worker, so results do not depend on the thread count.
inline void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn) {
    if (threads <= 0) threads = int(std::thread::hardware_concurrency());
    if (threads < 1) threads = 1;
    if (threads == 1 || n < 2) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    int nworkers = int(std::min<int64_t>(threads, n));
    std::vector<std::thread> pool;
    pool.reserve(size_t(nworkers));
    for (int w = 0; w < nworkers; ++w) {
        pool.emplace_back([&, w]() {
            for (int64_t i = w; i < n; i += nworkers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace maldikit

#endif
