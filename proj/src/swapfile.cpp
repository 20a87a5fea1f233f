#include "quarklet/swapfile.hpp"

#include <cstring>

namespace quarklet::hibernate {

namespace {

void put_u32(std::ofstream& out, std::uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.write(buf, 4);
}

}  // namespace

SwapFile::SwapFile(std::filesystem::path path) : path_(std::move(path)) {
    {
        std::ofstream create(path_, std::ios::binary | std::ios::trunc);
        if (!create) throw SwapIoError("cannot create swap file " + path_.string());
        create.write(kMagic, 4);
        put_u32(create, kVersion);
        put_u32(create, kSlotSize);
    }
    file_.open(path_, std::ios::binary | std::ios::in | std::ios::out);
    if (!file_) throw SwapIoError("cannot open swap file " + path_.string());
}

std::uint64_t SwapFile::alloc_slot() {
    std::lock_guard lock(mu_);
    std::uint64_t slot;
    if (!free_slots_.empty()) {
        slot = free_slots_.back();
        free_slots_.pop_back();
    } else {
        slot = next_slot_++;
    }
    slots_[slot] = SlotMeta{};
    return slot;
}

void SwapFile::release_slot(std::uint64_t slot) {
    std::lock_guard lock(mu_);
    auto it = slots_.find(slot);
    if (it == slots_.end()) return;
    slots_.erase(it);
    free_slots_.push_back(slot);
}

void SwapFile::write_slot(std::uint64_t slot, std::uint64_t vpn,
                          std::uint64_t epoch, std::span<const std::byte> page) {
    std::lock_guard lock(mu_);
    if (page.size() != kSlotSize) throw SwapIoError("bad slot payload size");
    auto it = slots_.find(slot);
    if (it == slots_.end()) throw SwapIoError("write to unallocated slot");
    if (it->second.written && it->second.epoch == epoch)
        throw SwapIoError("slot written twice in one epoch");
    if (fail_after_ && writes_ >= *fail_after_)
        throw SwapIoError("injected swap write failure");
    ++writes_;
    file_.seekp(static_cast<std::streamoff>(kHeaderSize + slot * kSlotSize));
    file_.write(reinterpret_cast<const char*>(page.data()),
                static_cast<std::streamsize>(page.size()));
    file_.flush();
    if (!file_) throw SwapIoError("swap write failed at slot " + std::to_string(slot));
    it->second = SlotMeta{vpn, fnv1a64(page), epoch, true};
}

std::vector<std::byte> SwapFile::read_slot(std::uint64_t slot, std::uint64_t epoch) {
    std::lock_guard lock(mu_);
    auto it = slots_.find(slot);
    if (it == slots_.end() || !it->second.written) throw SwapCorruption(slot);
    if (it->second.epoch != epoch) throw SwapCorruption(slot);
    std::vector<std::byte> buf(kSlotSize);
    file_.seekg(static_cast<std::streamoff>(kHeaderSize + slot * kSlotSize));
    file_.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size()));
    if (!file_) throw SwapIoError("swap read failed at slot " + std::to_string(slot));
    if (fnv1a64(buf) != it->second.checksum) throw SwapCorruption(slot);
    return buf;
}

std::size_t SwapFile::allocated_slots() const {
    std::lock_guard lock(mu_);
    return slots_.size();
}

std::uint64_t SwapFile::slot_vpn(std::uint64_t slot) const {
    std::lock_guard lock(mu_);
    return slots_.at(slot).vpn;
}

void SwapFile::flush_index() {
    std::lock_guard lock(mu_);
    std::ofstream idx(path_.string() + ".idx", std::ios::binary | std::ios::trunc);
    if (!idx) throw SwapIoError("cannot write sidecar index");
    for (const auto& [slot, meta] : slots_) {
        if (!meta.written) continue;
        std::uint64_t rec[4] = {slot, meta.vpn, meta.checksum, meta.epoch};
        idx.write(reinterpret_cast<const char*>(rec), sizeof rec);
    }
}

}  // namespace quarklet::hibernate
