#pragma once

#include <bit>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

namespace fwi {

/// Error raised for invalid shapes, values or arguments.
class ValueError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Error raised for file-format and I/O problems.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Error raised when a numeric run becomes unstable (NaN loss, blown-up wavefield).
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void format_into(std::ostringstream&) {}

template <typename Head, typename... Tail>
void format_into(std::ostringstream& os, const Head& head, const Tail&... tail) {
    os << head;
    format_into(os, tail...);
}

} // namespace detail

/// Concatenate streamable arguments into a string (error-message helper).
template <typename... Args>
std::string str(const Args&... args) {
    std::ostringstream os;
    detail::format_into(os, args...);
    return os.str();
}

inline std::string shape_str(const std::vector<size_t>& shape) {
    std::string out = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

/// Deterministic RNG used everywhere a seed is accepted.
using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(rng);
}

inline int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
}

/// FNV-1a over raw bytes; used for provenance hashes and config digests.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), h);
}

} // namespace fwi
