#include "quarklet/hibernate.hpp"

#include <algorithm>
#include <cstring>

namespace quarklet::hibernate {

const char* to_string(SandboxState s) {
    switch (s) {
        case SandboxState::Init: return "Init";
        case SandboxState::Warm: return "Warm";
        case SandboxState::Running: return "Running";
        case SandboxState::Hibernated: return "Hibernated";
        case SandboxState::WakeUp: return "WakeUp";
    }
    return "?";
}

WrongState::WrongState(SandboxState actual, const char* op)
    : std::runtime_error(std::string(op) + " not allowed in state " +
                         to_string(actual)),
      actual(actual) {}

void PauseGate::pause() {
    std::unique_lock lock(mu_);
    paused_ = true;
    cv_.wait(lock, [&] { return blocked_ == workers_; });
}

void PauseGate::resume() {
    {
        std::lock_guard lock(mu_);
        paused_ = false;
    }
    cv_.notify_all();
}

void PauseGate::checkpoint() {
    std::unique_lock lock(mu_);
    ++blocked_;
    cv_.notify_all();  // let pause() observe that this worker parked
    cv_.wait(lock, [&] { return !paused_; });
    --blocked_;
}

void PauseGate::register_worker() {
    std::lock_guard lock(mu_);
    ++workers_;
}

void PauseGate::unregister_worker() {
    {
        std::lock_guard lock(mu_);
        --workers_;
    }
    cv_.notify_all();
}

bool PauseGate::paused() const {
    std::lock_guard lock(mu_);
    return paused_;
}

Worker::Worker(PauseGate& gate, std::function<bool()> step)
    : thread_([this, &gate, step = std::move(step)] {
          gate.register_worker();
          while (!stop_.load(std::memory_order_relaxed)) {
              gate.checkpoint();
              if (stop_.load(std::memory_order_relaxed)) break;
              if (!step()) break;
          }
          gate.unregister_worker();
      }) {}

Worker::~Worker() { stop(); }

void Worker::stop() {
    stop_.store(true);
    if (thread_.joinable()) thread_.join();
}

Sandbox::Sandbox(std::filesystem::path swap_path) : swap_(std::move(swap_path)) {}

Sandbox::~Sandbox() {
    // Open the gate before joining workers so none is left parked inside it.
    gate_.resume();
    workers_.clear();
}

SandboxState Sandbox::state() const {
    std::shared_lock lock(state_mu_);
    return state_;
}

void Sandbox::require(SandboxState expected, const char* op) const {
    if (state_ != expected) throw WrongState(state_, op);
}

void Sandbox::warm_up() {
    std::unique_lock lock(state_mu_);
    require(SandboxState::Init, "warm_up");
    state_ = SandboxState::Warm;
}

void Sandbox::begin_request() {
    std::unique_lock lock(state_mu_);
    if (state_ != SandboxState::Warm && state_ != SandboxState::WakeUp)
        throw WrongState(state_, "begin_request");
    state_ = SandboxState::Running;
}

void Sandbox::end_request() {
    std::unique_lock lock(state_mu_);
    require(SandboxState::Running, "end_request");
    // Warm sandboxes hold no swapped pages; restore any stragglers.
    for (auto& [vpn, entry] : table_) {
        if (!entry->present) fault_in_locked(vpn, *entry);
    }
    state_ = SandboxState::Warm;
}

SnapshotStats Sandbox::hibernate() {
    std::unique_lock lock(state_mu_);
    require(SandboxState::Warm, "hibernate");
    gate_.pause();
    ++epoch_;
    SnapshotStats stats;
    std::vector<std::pair<std::uint64_t, PageTableEntry*>> migrated;
    try {
        for (auto& [vpn, entry] : table_) {
            if (!entry->present) continue;
            const std::uint64_t slot = swap_.alloc_slot();
            auto page = arena_.page(entry->frame);
            try {
                swap_.write_slot(slot, vpn, epoch_, page);
            } catch (...) {
                swap_.release_slot(slot);
                throw;
            }
            const pagealloc::PageRef frame = entry->frame;
            entry->present = false;
            entry->swap_slot = slot;
            arena_.free(frame);
            resident_pages_.fetch_sub(1);
            swapped_pages_.fetch_add(1);
            migrated.emplace_back(vpn, entry.get());
            ++stats.pages_swapped;
            stats.bytes_written += pagealloc::kPageSize;
        }
    } catch (const SwapIoError&) {
        // Undo fully-migrated pages, then stay Warm.
        for (auto& [vpn, entry] : migrated) {
            auto bytes = swap_.read_slot(entry->swap_slot, epoch_);
            entry->frame = arena_.alloc();
            auto page = arena_.page(entry->frame);
            std::memcpy(page.data(), bytes.data(), bytes.size());
            swap_.release_slot(entry->swap_slot);
            entry->present = true;
            resident_pages_.fetch_add(1);
            swapped_pages_.fetch_sub(1);
        }
        gate_.resume();
        throw;
    }
    arena_.reclaim_free_pages();
    swap_.flush_index();
    state_ = SandboxState::Hibernated;
    return stats;
}

void Sandbox::wakeup() {
    std::unique_lock lock(state_mu_);
    require(SandboxState::Hibernated, "wakeup");
    gate_.resume();
    state_ = SandboxState::WakeUp;
}

void Sandbox::map_page(std::uint64_t vpn) {
    std::unique_lock lock(state_mu_);
    if (state_ != SandboxState::Warm && state_ != SandboxState::Running &&
        state_ != SandboxState::WakeUp)
        throw WrongState(state_, "map_page");
    if (table_.contains(vpn)) return;
    auto entry = std::make_unique<PageTableEntry>();
    {
        std::lock_guard alock(arena_mu_);
        entry->frame = arena_.alloc();
    }
    entry->present = true;
    table_.emplace(vpn, std::move(entry));
    resident_pages_.fetch_add(1);
}

bool Sandbox::is_mapped(std::uint64_t vpn) const {
    std::shared_lock lock(state_mu_);
    return table_.contains(vpn);
}

std::span<std::byte, pagealloc::kPageSize> Sandbox::fault_in_locked(
    std::uint64_t /*vpn*/, PageTableEntry& entry) {
    if (!entry.present) {
        auto bytes = swap_.read_slot(entry.swap_slot, epoch_);
        pagealloc::PageRef frame;
        {
            std::lock_guard alock(arena_mu_);
            frame = arena_.alloc();
        }
        auto page = [&] {
            std::lock_guard alock(arena_mu_);
            return arena_.page(frame);
        }();
        std::memcpy(page.data(), bytes.data(), bytes.size());
        entry.frame = frame;
        entry.present = true;
        swap_.release_slot(entry.swap_slot);
        swapin_count_.fetch_add(1);
        swapped_pages_.fetch_sub(1);
        resident_pages_.fetch_add(1);
    }
    std::lock_guard alock(arena_mu_);
    return arena_.page(entry.frame);
}

void Sandbox::write_page(std::uint64_t vpn, std::span<const std::byte> data,
                         std::size_t offset) {
    std::shared_lock lock(state_mu_);
    if (state_ != SandboxState::Warm && state_ != SandboxState::Running &&
        state_ != SandboxState::WakeUp)
        throw WrongState(state_, "write_page");
    auto it = table_.find(vpn);
    if (it == table_.end()) throw UnmappedPage(vpn);
    std::lock_guard elock(it->second->mu);
    auto page = fault_in_locked(vpn, *it->second);
    if (offset + data.size() > page.size()) throw UnmappedPage(vpn);
    std::memcpy(page.data() + offset, data.data(), data.size());
}

std::vector<std::byte> Sandbox::read_page(std::uint64_t vpn) {
    std::shared_lock lock(state_mu_);
    if (state_ != SandboxState::Warm && state_ != SandboxState::Running &&
        state_ != SandboxState::WakeUp)
        throw WrongState(state_, "read_page");
    auto it = table_.find(vpn);
    if (it == table_.end()) throw UnmappedPage(vpn);
    std::lock_guard elock(it->second->mu);
    auto page = fault_in_locked(vpn, *it->second);
    return std::vector<std::byte>(page.begin(), page.end());
}

std::uint64_t Sandbox::resident_bytes() const {
    return resident_pages_.load() * pagealloc::kPageSize;
}

Worker& Sandbox::add_worker(std::function<bool()> step) {
    workers_.push_back(std::make_unique<Worker>(gate_, std::move(step)));
    return *workers_.back();
}

}  // namespace quarklet::hibernate
