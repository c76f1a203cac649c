#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace shifcon {

// ---------------------------------------------------------------------------
// Error taxonomy. Everything thrown by this library derives from Error;
// ConfigError maps to CLI exit code 2, everything else to 1.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller handed us data that violates a precondition or invariant.
class InvalidInputError : public Error {
public:
    using Error::Error;
};

/// An iterative method failed to converge or produced unusable values.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Matrix expected to be symmetric positive definite is not.
class NotPositiveDefiniteError : public NumericalError {
public:
    NotPositiveDefiniteError(const std::string& msg, std::size_t pivot)
        : NumericalError(msg), pivot_index(pivot) {}
    std::size_t pivot_index;
};

/// Subspace fit collapsed to rank zero (no variance in the data).
class DegenerateSubspaceError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// Requested language/layer/component does not exist.
class LookupError : public Error {
public:
    using Error::Error;
};

/// File does not look like one of ours (magic/version mismatch).
class FormatError : public Error {
public:
    using Error::Error;
};

/// File is ours but damaged; byte_offset is where reading had to stop.
class CorruptionError : public FormatError {
public:
    CorruptionError(const std::string& msg, std::uint64_t offset)
        : FormatError(msg), byte_offset(offset) {}
    std::uint64_t byte_offset;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Bad user-supplied configuration; CLI exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// ceil(L*beta) came out below 2, so no valid [L_to, L_bk) exists.
class AreaTooSmallError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// double/normal constructions below avoid std::*_distribution, whose output
// is implementation-defined.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform integer in [lo, hi] by rejection (no modulo bias).
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1u;
        if (range == 0) return static_cast<std::int64_t>(engine_());  // full range
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return lo + static_cast<std::int64_t>(x % range);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Checksums for manifests and training logs.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::span<const double> values, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(values.data(), values.size() * sizeof(double), h);
}

inline std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace shifcon
