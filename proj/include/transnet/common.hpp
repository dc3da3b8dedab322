#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace transnet {

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

struct EmptyMaskError : std::runtime_error {
    explicit EmptyMaskError(const std::string& msg) : std::runtime_error("empty mask: " + msg) {}
};

struct InvalidDepthError : std::runtime_error {
    explicit InvalidDepthError(const std::string& msg) : std::runtime_error("invalid depth: " + msg) {}
};

struct DegenerateAxesError : std::runtime_error {
    explicit DegenerateAxesError(const std::string& msg) : std::runtime_error("degenerate axes: " + msg) {}
};

struct GenerationError : std::runtime_error {
    explicit GenerationError(const std::string& msg) : std::runtime_error("generation error: " + msg) {}
};

struct LoadError : std::runtime_error {
    explicit LoadError(const std::string& msg) : std::runtime_error("load error: " + msg) {}
};

struct CategoryError : std::runtime_error {
    explicit CategoryError(const std::string& msg) : std::runtime_error("category error: " + msg) {}
};

struct PairingError : std::runtime_error {
    explicit PairingError(const std::string& msg) : std::runtime_error("pairing error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// FNV-1a, used for config and dataset hashing.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t seed = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t seed = 14695981039346656037ull) {
    return fnv1a(s.data(), s.size(), seed);
}

}  // namespace transnet
