#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace quarklet {

inline std::uint64_t fnv1a64(std::span<const std::byte> bytes,
                             std::uint64_t seed = 0xcbf29ce484222325ULL) {
    std::uint64_t h = seed;
    for (std::byte b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                             std::uint64_t seed = 0xcbf29ce484222325ULL) {
    return fnv1a64(std::as_bytes(bytes), seed);
}

// Rolling stream checksum: feed chunks in order, chained through the seed.
class StreamChecksum {
public:
    void feed(std::span<const std::byte> chunk) {
        state_ = fnv1a64(chunk, state_);
        bytes_ += chunk.size();
    }
    void feed(std::span<const std::uint8_t> chunk) { feed(std::as_bytes(chunk)); }
    std::uint64_t value() const { return state_; }
    std::uint64_t bytes() const { return bytes_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
    std::uint64_t bytes_ = 0;
};

}  // namespace quarklet
