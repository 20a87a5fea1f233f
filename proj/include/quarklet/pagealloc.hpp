#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace quarklet::pagealloc {

inline constexpr std::size_t kPageSize = 4096;
inline constexpr std::size_t kPagesPerBlock = 1024;
inline constexpr std::size_t kL2Words = kPagesPerBlock / 64;  // 16

// Control-page layout (page 0 of every block):
//   byte 0:  L1 bitmap, 16 bits (uint16_t, little-endian)
//   byte 64: L2 bitmap, 1024 bits (16 x uint64_t, little-endian)
// Bit sense: 1 = free. L2 bit 0 is always 0 (control page).
inline constexpr std::size_t kL1Offset = 0;
inline constexpr std::size_t kL2Offset = 64;

class NoFreePage : public std::runtime_error {
public:
    NoFreePage() : std::runtime_error("no free page in block") {}
};

class DoubleFree : public std::runtime_error {
public:
    explicit DoubleFree(std::size_t idx)
        : std::runtime_error("double free of page " + std::to_string(idx)) {}
};

class InvalidPage : public std::runtime_error {
public:
    explicit InvalidPage(std::size_t idx)
        : std::runtime_error("invalid page index " + std::to_string(idx)) {}
};

struct PageRef {
    std::uint32_t block_id = 0;
    std::uint32_t page_index = 0;  // always in [1, 1023]

    friend bool operator==(const PageRef&, const PageRef&) = default;
};

// Counters for the bounded-work property: alloc touches at most one L1 word
// and one L2 word.
struct ScanStats {
    std::uint64_t l1_word_reads = 0;
    std::uint64_t l2_word_reads = 0;
};

// 1024 x 4KiB arena. All free-page metadata lives inside page 0, so zeroing
// free pages (reclamation) cannot corrupt allocator state.
class PageBlock {
public:
    PageBlock();

    PageBlock(const PageBlock&) = delete;
    PageBlock& operator=(const PageBlock&) = delete;
    PageBlock(PageBlock&&) = default;
    PageBlock& operator=(PageBlock&&) = default;

    // Lowest-indexed free page. Throws NoFreePage on exhaustion.
    // The returned page's contents are all zero.
    std::size_t alloc();

    void free(std::size_t page_index);

    // Zero-fills every free page, modeling host reclamation of
    // zero-fill-on-demand pages. Allocated pages and bitmaps are untouched.
    // Returns the number of pages zeroed.
    std::size_t reclaim_free_pages();

    std::size_t free_count() const { return free_count_; }
    bool is_free(std::size_t page_index) const;

    std::span<std::byte, kPageSize> page(std::size_t page_index);
    std::span<const std::byte, kPageSize> page(std::size_t page_index) const;

    std::uint16_t l1() const;
    std::uint64_t l2_word(std::size_t k) const;

    // Cumulative pages handed back to the host by reclaim_free_pages.
    std::uint64_t reclaimed_pages() const { return reclaimed_pages_; }

    const ScanStats& scan_stats() const { return scan_stats_; }
    ScanStats& scan_stats() { return scan_stats_; }

private:
    std::uint16_t* l1_ptr();
    std::uint64_t* l2_ptr();
    const std::uint16_t* l1_ptr() const;
    const std::uint64_t* l2_ptr() const;

    std::unique_ptr<std::byte[]> storage_;
    std::size_t free_count_ = 0;
    std::uint64_t reclaimed_pages_ = 0;
    ScanStats scan_stats_;
};

// First-fit list of PageBlocks. Grows by one block when every existing block
// is exhausted.
class PageArena {
public:
    PageRef alloc();
    void free(PageRef ref);
    std::size_t reclaim_free_pages();

    std::span<std::byte, kPageSize> page(PageRef ref);
    std::span<const std::byte, kPageSize> page(PageRef ref) const;

    std::size_t block_count() const { return blocks_.size(); }
    std::size_t free_count() const;
    PageBlock& block(std::size_t id) { return *blocks_.at(id); }

private:
    std::vector<std::unique_ptr<PageBlock>> blocks_;
};

}  // namespace quarklet::pagealloc
