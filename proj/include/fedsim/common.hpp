#pragma once

#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace fedsim {

// ---------------------------------------------------------------------------
// Seed derivation. All randomness in the simulator flows through explicit
// 64-bit seeds so that results are reproducible across runs and independent
// of worker scheduling.
// ---------------------------------------------------------------------------

inline constexpr uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline constexpr uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(splitmix64(a) ^ b); }

inline uint64_t mix_seed(uint64_t a, uint64_t b, std::string_view s) {
    return splitmix64(mix_seed(a, b) ^ fnv1a64(s));
}

// ---------------------------------------------------------------------------
// Draw helpers on top of std::mt19937_64. The standard engine is fully
// specified; the draw functions below avoid std::*_distribution so that the
// exact bit stream of generated artifacts does not depend on the standard
// library implementation.
// ---------------------------------------------------------------------------

/// Uniform double in the open interval (0, 1).
inline double draw_unit(std::mt19937_64& rng) {
    return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

/// Uniform integer in [0, n). Rejection sampling, unbiased.
inline uint64_t draw_below(std::mt19937_64& rng, uint64_t n) {
    if (n == 0) throw std::invalid_argument("draw_below: n must be positive");
    const uint64_t limit = n * (UINT64_MAX / n);
    uint64_t x = rng();
    while (x >= limit) x = rng();
    return x % n;
}

/// Uniform integer in [lo, hi].
inline int64_t draw_int(std::mt19937_64& rng, int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(draw_below(rng, static_cast<uint64_t>(hi - lo + 1)));
}

template <typename T>
void shuffle_values(std::mt19937_64& rng, std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(draw_below(rng, i));
        std::swap(v[i - 1], v[j]);
    }
}

// ---------------------------------------------------------------------------
// Worker parallelism. FEDSIM_THREADS caps the number of workers; results are
// identical under any thread count because tasks write to disjoint slots.
// ---------------------------------------------------------------------------

inline size_t worker_thread_count() {
    if (const char* env = std::getenv("FEDSIM_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

/// Runs fn(i) for i in [0, n) on up to worker_thread_count() threads.
template <typename Fn>
void parallel_for_index(size_t n, Fn&& fn) {
    const size_t threads = std::min(worker_thread_count(), n);
    if (threads <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                const size_t i = next.fetch_add(1);
                if (i >= n || failed.load()) return;
                try {
                    fn(i);
                } catch (...) {
                    if (!failed.exchange(true)) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failed.load()) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Little-endian float64 encoding for checkpoint files.
// ---------------------------------------------------------------------------

inline void append_f64_le(std::string& out, double v) {
    const auto bits = std::bit_cast<uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double read_f64_le(const unsigned char* p) {
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

// ---------------------------------------------------------------------------
// File helpers.
// ---------------------------------------------------------------------------

/// Write-temp-then-rename so partially written files are never observed.
inline void atomic_write_file(const std::filesystem::path& path, std::string_view content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return content;
}

/// Fixed decimal formatting used in CSV output (deterministic, locale-free).
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace fedsim
