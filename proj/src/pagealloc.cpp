#include "quarklet/pagealloc.hpp"

#include <bit>
#include <cstring>

namespace quarklet::pagealloc {

PageBlock::PageBlock()
    : storage_(new std::byte[kPagesPerBlock * kPageSize]) {
    std::memset(storage_.get(), 0, kPagesPerBlock * kPageSize);
    auto* l2 = l2_ptr();
    for (std::size_t k = 0; k < kL2Words; ++k) l2[k] = ~0ULL;
    l2[0] &= ~1ULL;  // control page never allocatable
    *l1_ptr() = 0xFFFF;
    free_count_ = kPagesPerBlock - 1;
}

std::uint16_t* PageBlock::l1_ptr() {
    return reinterpret_cast<std::uint16_t*>(storage_.get() + kL1Offset);
}

std::uint64_t* PageBlock::l2_ptr() {
    return reinterpret_cast<std::uint64_t*>(storage_.get() + kL2Offset);
}

const std::uint16_t* PageBlock::l1_ptr() const {
    return reinterpret_cast<const std::uint16_t*>(storage_.get() + kL1Offset);
}

const std::uint64_t* PageBlock::l2_ptr() const {
    return reinterpret_cast<const std::uint64_t*>(storage_.get() + kL2Offset);
}

std::uint16_t PageBlock::l1() const { return *l1_ptr(); }

std::uint64_t PageBlock::l2_word(std::size_t k) const {
    if (k >= kL2Words) throw InvalidPage(k * 64);
    return l2_ptr()[k];
}

std::size_t PageBlock::alloc() {
    std::uint16_t l1 = *l1_ptr();
    ++scan_stats_.l1_word_reads;
    if (l1 == 0) throw NoFreePage();
    const unsigned k = std::countr_zero(l1);
    auto* l2 = l2_ptr();
    ++scan_stats_.l2_word_reads;
    std::uint64_t word = l2[k];
    // L1 bit set implies the word is nonzero
    const unsigned bit = std::countr_zero(word);
    const std::size_t idx = k * 64 + bit;
    word &= ~(1ULL << bit);
    l2[k] = word;
    if (word == 0) *l1_ptr() = l1 & static_cast<std::uint16_t>(~(1u << k));
    --free_count_;
    std::memset(storage_.get() + idx * kPageSize, 0, kPageSize);
    return idx;
}

void PageBlock::free(std::size_t page_index) {
    if (page_index == 0 || page_index >= kPagesPerBlock)
        throw InvalidPage(page_index);
    const std::size_t k = page_index / 64;
    const std::uint64_t mask = 1ULL << (page_index % 64);
    auto* l2 = l2_ptr();
    if (l2[k] & mask) throw DoubleFree(page_index);
    l2[k] |= mask;
    *l1_ptr() |= static_cast<std::uint16_t>(1u << k);
    ++free_count_;
}

bool PageBlock::is_free(std::size_t page_index) const {
    if (page_index >= kPagesPerBlock) throw InvalidPage(page_index);
    return (l2_ptr()[page_index / 64] >> (page_index % 64)) & 1ULL;
}

std::size_t PageBlock::reclaim_free_pages() {
    std::size_t zeroed = 0;
    const auto* l2 = l2_ptr();
    for (std::size_t k = 0; k < kL2Words; ++k) {
        std::uint64_t word = l2[k];
        while (word) {
            const unsigned bit = std::countr_zero(word);
            word &= word - 1;
            const std::size_t idx = k * 64 + bit;
            std::memset(storage_.get() + idx * kPageSize, 0, kPageSize);
            ++zeroed;
        }
    }
    reclaimed_pages_ += zeroed;
    return zeroed;
}

std::span<std::byte, kPageSize> PageBlock::page(std::size_t page_index) {
    if (page_index == 0 || page_index >= kPagesPerBlock)
        throw InvalidPage(page_index);
    return std::span<std::byte, kPageSize>(storage_.get() + page_index * kPageSize,
                                           kPageSize);
}

std::span<const std::byte, kPageSize> PageBlock::page(std::size_t page_index) const {
    if (page_index == 0 || page_index >= kPagesPerBlock)
        throw InvalidPage(page_index);
    return std::span<const std::byte, kPageSize>(
        storage_.get() + page_index * kPageSize, kPageSize);
}

PageRef PageArena::alloc() {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        if (blocks_[i]->free_count() > 0) {
            return PageRef{static_cast<std::uint32_t>(i),
                           static_cast<std::uint32_t>(blocks_[i]->alloc())};
        }
    }
    blocks_.push_back(std::make_unique<PageBlock>());
    const std::size_t i = blocks_.size() - 1;
    return PageRef{static_cast<std::uint32_t>(i),
                   static_cast<std::uint32_t>(blocks_[i]->alloc())};
}

void PageArena::free(PageRef ref) {
    blocks_.at(ref.block_id)->free(ref.page_index);
}

std::size_t PageArena::reclaim_free_pages() {
    std::size_t total = 0;
    for (auto& b : blocks_) total += b->reclaim_free_pages();
    return total;
}

std::span<std::byte, kPageSize> PageArena::page(PageRef ref) {
    return blocks_.at(ref.block_id)->page(ref.page_index);
}

std::span<const std::byte, kPageSize> PageArena::page(PageRef ref) const {
    return blocks_.at(ref.block_id)->page(ref.page_index);
}

std::size_t PageArena::free_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b->free_count();
    return n;
}

}  // namespace quarklet::pagealloc
