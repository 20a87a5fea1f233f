#pragma once

#include <atomic>
#include <bit>
#include <cstddef>
#include <vector>

namespace quarklet {

// Lock-free single-producer single-consumer ring of T.
template <typename T>
class SpscRing {
public:
    explicit SpscRing(std::size_t capacity)
        : buf_(std::bit_ceil(capacity)), mask_(buf_.size() - 1) {}

    bool try_push(T value) {
        const auto tail = tail_.load(std::memory_order_relaxed);
        if (tail - head_.load(std::memory_order_acquire) > mask_) return false;
        buf_[tail & mask_] = std::move(value);
        tail_.store(tail + 1, std::memory_order_release);
        return true;
    }

    bool try_pop(T& out) {
        const auto head = head_.load(std::memory_order_relaxed);
        if (head == tail_.load(std::memory_order_acquire)) return false;
        out = std::move(buf_[head & mask_]);
        head_.store(head + 1, std::memory_order_release);
        return true;
    }

    std::size_t size() const {
        return tail_.load(std::memory_order_acquire) -
               head_.load(std::memory_order_acquire);
    }
    std::size_t capacity() const { return mask_ + 1; }

private:
    std::vector<T> buf_;
    std::size_t mask_;
    alignas(64) std::atomic<std::size_t> head_{0};
    alignas(64) std::atomic<std::size_t> tail_{0};
};

}  // namespace quarklet
