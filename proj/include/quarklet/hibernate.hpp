#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <thread>
#include <vector>

#include "quarklet/pagealloc.hpp"
#include "quarklet/swapfile.hpp"

namespace quarklet::hibernate {

enum class SandboxState { Init, Warm, Running, Hibernated, WakeUp };

const char* to_string(SandboxState s);

class WrongState : public std::runtime_error {
public:
    WrongState(SandboxState actual, const char* op);
    SandboxState actual;
};

class UnmappedPage : public std::runtime_error {
public:
    explicit UnmappedPage(std::uint64_t vpn)
        : std::runtime_error("unmapped vpn " + std::to_string(vpn)), vpn(vpn) {}
    std::uint64_t vpn;
};

// Cooperative pause point. App workers call checkpoint() at loop boundaries;
// hibernate() closes the gate and resume() reopens it.
class PauseGate {
public:
    // Blocks until every registered worker is parked at its checkpoint.
    void pause();
    void resume();
    void checkpoint();
    bool paused() const;

    void register_worker();
    void unregister_worker();

private:
    mutable std::mutex mu_;
    std::condition_variable cv_;
    bool paused_ = false;
    int blocked_ = 0;
    int workers_ = 0;
};

// Worker thread that repeatedly runs `step` through the pause gate until
// stopped or `step` returns false.
class Worker {
public:
    Worker(PauseGate& gate, std::function<bool()> step);
    ~Worker();
    void stop();

private:
    std::atomic<bool> stop_{false};
    std::thread thread_;
};

struct SnapshotStats {
    std::uint64_t pages_swapped = 0;
    std::uint64_t bytes_written = 0;
};

struct PageTableEntry {
    bool present = false;
    pagealloc::PageRef frame;
    std::uint64_t swap_slot = 0;
    std::mutex mu;
};

class Sandbox {
public:
    explicit Sandbox(std::filesystem::path swap_path);
    ~Sandbox();

    SandboxState state() const;

    // Init -> Warm
    void warm_up();
    // Warm/WakeUp -> Running
    void begin_request();
    // Running -> Warm; any pages still swapped out are restored first so a
    // Warm sandbox never holds swapped pages.
    void end_request();

    // Warm -> Hibernated: pause workers, swap out every present page in
    // ascending vpn order, reclaim frames. Per-page order is write slot,
    // flip entry, free frame; on I/O failure already-migrated pages are
    // restored and the sandbox returns to Warm.
    SnapshotStats hibernate();

    // Hibernated -> WakeUp: resume workers, swap nothing in eagerly.
    void wakeup();

    void map_page(std::uint64_t vpn);
    bool is_mapped(std::uint64_t vpn) const;

    void write_page(std::uint64_t vpn, std::span<const std::byte> data,
                    std::size_t offset = 0);
    std::vector<std::byte> read_page(std::uint64_t vpn);

    std::uint64_t resident_bytes() const;
    std::uint64_t resident_pages() const { return resident_pages_.load(); }
    std::uint64_t swapped_pages() const { return swapped_pages_.load(); }
    std::uint64_t swapin_count() const { return swapin_count_.load(); }

    Worker& add_worker(std::function<bool()> step);
    PauseGate& pause_gate() { return gate_; }
    SwapFile& swap_file() { return swap_; }

private:
    std::span<std::byte, pagealloc::kPageSize> fault_in_locked(
        std::uint64_t vpn, PageTableEntry& entry);
    void require(SandboxState expected, const char* op) const;

    mutable std::shared_mutex state_mu_;  // unique: transitions; shared: access
    SandboxState state_ = SandboxState::Init;

    std::mutex arena_mu_;
    pagealloc::PageArena arena_;
    SwapFile swap_;
    std::uint64_t epoch_ = 0;

    std::map<std::uint64_t, std::unique_ptr<PageTableEntry>> table_;

    std::atomic<std::uint64_t> resident_pages_{0};
    std::atomic<std::uint64_t> swapped_pages_{0};
    std::atomic<std::uint64_t> swapin_count_{0};

    PauseGate gate_;
    std::vector<std::unique_ptr<Worker>> workers_;
};

}  // namespace quarklet::hibernate
