// common.hpp - error types, deterministic RNG, numeric helpers
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vqflow {

// ---------------------------------------------------------------------------
// Errors. Contract violations, shape mismatches, numeric failures and file
// format problems are kept as distinct types so callers (and tests) can tell
// them apart.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error("contract: " + msg) {}
};

struct DimensionError : ContractError {
    explicit DimensionError(const std::string& msg) : ContractError("dimension: " + msg) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error("numeric: " + msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error("format: " + msg) {}
};

struct VersionError : Error {
    explicit VersionError(const std::string& msg) : Error("version: " + msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 core with explicit float mappings; avoids
// std::uniform_*_distribution whose output differs between standard library
// implementations.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float next_float() { return static_cast<float>(next_double()); }

    // uniform integer in [0, n)
    std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // uniform in [lo, hi)
    float uniform(float lo, float hi) { return lo + (hi - lo) * next_float(); }

    // standard normal via Box-Muller, one draw per call
    float normal() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                                  std::cos(6.283185307179586 * u2));
    }

    // derive an independent stream; distinct tags give distinct streams
    Rng fork(std::uint64_t tag) {
        Rng derived(state_ ^ (0x9e3779b97f4a7c15ULL * (tag + 1)));
        derived.next_u64();
        return derived;
    }

private:
    std::uint64_t state_;
};

// Fisher-Yates permutation of {0..n-1}
inline std::vector<int> random_permutation(int n, Rng& rng) {
    std::vector<int> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i) {
        int j = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(i) + 1));
        std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Pairwise summation. Used by all reduction primitives.
// ---------------------------------------------------------------------------

inline float pairwise_sum(const float* x, std::size_t n) {
    if (n <= 16) {
        float s = 0.0f;
        for (std::size_t i = 0; i < n; ++i) s += x[i];
        return s;
    }
    std::size_t half = n / 2;
    return pairwise_sum(x, half) + pairwise_sum(x + half, n - half);
}

inline float pairwise_sum(std::span<const float> x) { return pairwise_sum(x.data(), x.size()); }

// Pairwise sum over rows
// of a row-major [rows x width] block; accumulates into out[width].
inline void pairwise_row_sum(const float* x, std::size_t rows, std::size_t width, float* out) {
    if (rows <= 16) {
        for (std::size_t c = 0; c < width; ++c) out[c] = 0.0f;
        for (std::size_t r = 0; r < rows; ++r) {
            const float* row = x + r * width;
            for (std::size_t c = 0; c < width; ++c) out[c] += row[c];
        }
        return;
    }
    std::size_t half = rows / 2;
    std::vector<float> tmp(width);
    pairwise_row_sum(x, half, width, out);
    pairwise_row_sum(x + half * width, rows - half, width, tmp.data());
    for (std::size_t c = 0; c < width; ++c) out[c] += tmp[c];
}

inline bool all_finite(const float* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (!std::isfinite(x[i])) return false;
    return true;
}

// FNV-1a 64-bit digest; used for reproducibility checks on serialized output.
inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t n,
                             std::uint64_t seed = 0xcbf29ce484222325ULL) {
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace vqflow
