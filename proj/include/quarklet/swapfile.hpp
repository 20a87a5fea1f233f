#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "quarklet/checksum.hpp"
#include "quarklet/pagealloc.hpp"

namespace quarklet::hibernate {

using quarklet::fnv1a64;

class SwapIoError : public std::runtime_error {
public:
    explicit SwapIoError(const std::string& what) : std::runtime_error(what) {}
};

class SwapCorruption : public std::runtime_error {
public:
    explicit SwapCorruption(std::uint64_t slot)
        : std::runtime_error("swap slot " + std::to_string(slot) +
                             " failed checksum/epoch verification") {}
};

// On-disk layout: header {magic "QSWP", version u32, slot_size u32}, then
// fixed 4096-byte slots. The sidecar index (<path>.idx) maps
// slot -> (vpn, checksum, epoch). All fields little-endian.
class SwapFile {
public:
    static constexpr char kMagic[4] = {'Q', 'S', 'W', 'P'};
    static constexpr std::uint32_t kVersion = 1;
    static constexpr std::uint32_t kSlotSize = pagealloc::kPageSize;
    static constexpr std::uint64_t kHeaderSize = 12;

    explicit SwapFile(std::filesystem::path path);

    std::uint64_t alloc_slot();
    void release_slot(std::uint64_t slot);

    // Computes and records the checksum; a slot may be written at most once
    // per epoch.
    void write_slot(std::uint64_t slot, std::uint64_t vpn, std::uint64_t epoch,
                    std::span<const std::byte> page);

    // Verifies checksum and epoch; throws SwapCorruption on mismatch.
    std::vector<std::byte> read_slot(std::uint64_t slot, std::uint64_t epoch);

    std::size_t allocated_slots() const;
    std::uint64_t slot_vpn(std::uint64_t slot) const;

    void flush_index();

    const std::filesystem::path& path() const { return path_; }

    // Test hook: fail the Nth subsequent write with SwapIoError.
    void fail_after_writes(std::optional<std::uint64_t> n) { fail_after_ = n; }

private:
    struct SlotMeta {
        std::uint64_t vpn = 0;
        std::uint64_t checksum = 0;
        std::uint64_t epoch = 0;
        bool written = false;
    };

    std::filesystem::path path_;
    mutable std::mutex mu_;
    std::fstream file_;
    std::map<std::uint64_t, SlotMeta> slots_;
    std::vector<std::uint64_t> free_slots_;
    std::uint64_t next_slot_ = 0;
    std::optional<std::uint64_t> fail_after_;
    std::uint64_t writes_ = 0;
};

}  // namespace quarklet::hibernate
