#include "quarklet/ioring.hpp"

#include <unistd.h>

#include <algorithm>
#include <cerrno>

namespace quarklet::qcall {

IoRing::IoRing(FileTable& files, std::size_t ring_capacity)
    : files_(files), sq_(ring_capacity), cq_(ring_capacity) {
    worker_ = std::thread([this] {
        Slot slot;
        while (!stop_.load(std::memory_order_acquire)) {
            if (!sq_.try_pop(slot)) {
                std::this_thread::yield();
                continue;
            }
            IoCompletion comp;
            comp.desc_id = slot.id;
            IoDesc& d = slot.desc;
            const int fd = files_.fd(d.file_id);
            if (fd < 0) {
                comp.result = -EBADF;
            } else if (d.op == IoOp::Write) {
                ssize_t n = ::pwrite(fd, d.buffer.data(), d.len,
                                     static_cast<off_t>(d.offset));
                comp.result = n < 0 ? -errno : n;
            } else {
                comp.data.resize(d.len);
                ssize_t n = ::pread(fd, comp.data.data(), d.len,
                                    static_cast<off_t>(d.offset));
                if (n < 0) {
                    comp.result = -errno;
                    comp.data.clear();
                } else {
                    comp.result = n;
                    comp.data.resize(static_cast<std::size_t>(n));
                }
            }
            while (!cq_.try_push(std::move(comp))) std::this_thread::yield();
        }
    });
}

IoRing::~IoRing() { shutdown(); }

void IoRing::shutdown() {
    bool expected = false;
    if (stop_.compare_exchange_strong(expected, true) && worker_.joinable())
        worker_.join();
}

IoTicket IoRing::submit(std::vector<IoDesc> batch) {
    for (const auto& d : batch) {
        if (files_.fd(d.file_id) < 0) throw UnopenedFile(d.file_id);
    }
    IoTicket ticket{next_id_, static_cast<std::uint32_t>(batch.size())};
    for (auto& d : batch) {
        Slot slot{next_id_++, std::move(d)};
        while (!sq_.try_push(std::move(slot))) std::this_thread::yield();
    }
    return ticket;
}

std::vector<IoCompletion> IoRing::reap(const IoTicket& ticket) {
    std::vector<IoCompletion> out;
    out.reserve(ticket.count);
    const std::uint64_t last = ticket.first_id + ticket.count;
    while (out.size() < ticket.count) {
        bool found = false;
        for (auto it = reaped_.begin(); it != reaped_.end(); ++it) {
            if (it->desc_id >= ticket.first_id && it->desc_id < last) {
                out.push_back(std::move(*it));
                reaped_.erase(it);
                found = true;
                break;
            }
        }
        if (found) continue;
        IoCompletion comp;
        if (cq_.try_pop(comp)) {
            if (comp.desc_id >= ticket.first_id && comp.desc_id < last)
                out.push_back(std::move(comp));
            else
                reaped_.push_back(std::move(comp));
        } else {
            std::this_thread::yield();
        }
    }
    std::sort(out.begin(), out.end(),
              [](const IoCompletion& a, const IoCompletion& b) {
                  return a.desc_id < b.desc_id;
              });
    return out;
}

}  // namespace quarklet::qcall
