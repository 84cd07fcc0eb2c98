#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace conlab {

inline constexpr const char* kToolVersion = "consistency-lab 0.1.0";

// Thrown for bad user input (malformed files, invalid arguments, dimension
// mismatches). The CLI maps this to exit code 1; anything else is exit 2.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

using Vec = std::vector<double>;

// Dense row-major matrix of doubles. All model/SAE math runs in 64-bit;
// the ACTV container down-casts to f32 at the file boundary.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

inline Vec matvec(const Mat& m, const Vec& x) {
    if (x.size() != m.cols) {
        throw ValidationError("matvec: dimension mismatch (" + std::to_string(m.cols) +
                              " cols vs " + std::to_string(x.size()) + " elements)");
    }
    Vec y(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        double acc = 0.0;
        const double* row = m.data.data() + r * m.cols;
        for (std::size_t c = 0; c < m.cols; ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
    return y;
}

// y = M^T x
inline Vec matvec_t(const Mat& m, const Vec& x) {
    if (x.size() != m.rows) {
        throw ValidationError("matvec_t: dimension mismatch");
    }
    Vec y(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* row = m.data.data() + r * m.cols;
        for (std::size_t c = 0; c < m.cols; ++c) y[c] += row[c] * x[r];
    }
    return y;
}

// M += scale * u v^T
inline void add_outer(Mat& m, const Vec& u, const Vec& v, double scale = 1.0) {
    for (std::size_t r = 0; r < m.rows; ++r) {
        double* row = m.data.data() + r * m.cols;
        const double ur = scale * u[r];
        for (std::size_t c = 0; c < m.cols; ++c) row[c] += ur * v[c];
    }
}

inline void axpy(Vec& y, const Vec& x, double a = 1.0) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

// splitmix64: the named 64-bit generator behind every seeded stream.
// Deterministic across platforms (pure integer mixing).
struct SplitMix64 {
    std::uint64_t state;

    explicit SplitMix64(std::uint64_t seed) : state(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform_open() {
        double u;
        do { u = uniform(); } while (u == 0.0);
        return u;
    }

    // Box-Muller; two uniforms per draw, no cached spare (keeps streams
    // position-independent).
    double normal() {
        const double u1 = uniform_open();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return n ? next() % n : 0; }
};

// FNV-1a, used to derive named sub-streams from one master seed.
inline std::uint64_t hash_name(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : name) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline SplitMix64 seeded_stream(std::uint64_t master_seed, std::string_view stream_name) {
    SplitMix64 mixer(master_seed ^ hash_name(stream_name));
    mixer.next();
    return mixer;
}

inline int max_threads() {
    if (const char* env = std::getenv("CONSISTENCY_LAB_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<int>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

// Runs fn(i) for i in [0, n). Work is chunked across threads; callers that
// need deterministic numeric results write into per-index slots and reduce
// serially afterwards, so the outcome is independent of the thread count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const int nthreads = std::min<int>(max_threads(), static_cast<int>(n));
    if (nthreads <= 1 || n < 32) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(nthreads));
    const std::size_t chunk = (n + static_cast<std::size_t>(nthreads) - 1) / static_cast<std::size_t>(nthreads);
    for (int t = 0; t < nthreads; ++t) {
        const std::size_t lo = static_cast<std::size_t>(t) * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([lo, hi, &fn] {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& w : workers) w.join();
}

// Round to `digits` decimals, away-from-zero ties (what report tables use).
inline double round_to(double x, int digits) {
    const double p = std::pow(10.0, digits);
    return std::round(x * p) / p;
}

// (base - now)/base as a percentage rounded to one decimal.
inline double reduction_percent(double base, double now) {
    return round_to(100.0 * (base - now) / base, 1);
}

}  // namespace conlab
