#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

namespace clab {

/// 64-bit FNV-1a, used for content digests of graphs, datasets and weights.
class Digest {
public:
    Digest& bytes(const void* data, std::size_t n)
    {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
        return *this;
    }
    Digest& text(std::string_view s) { return bytes(s.data(), s.size()); }
    Digest& u64(std::uint64_t v) { return bytes(&v, sizeof v); }
    Digest& f64(double v) { return bytes(&v, sizeof v); }
    Digest& f64s(std::span<const double> v) { return bytes(v.data(), v.size_bytes()); }

    [[nodiscard]] std::uint64_t value() const { return state_; }
    [[nodiscard]] std::string hex() const
    {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
        return buf;
    }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

/// Stateless seed mixing (splitmix64 finalizer).
constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b)
{
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace clab
