#pragma once

#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <thread>
#include <vector>

#include "quarklet/qcall.hpp"
#include "quarklet/spsc_ring.hpp"

namespace quarklet::qcall {

class UnopenedFile : public std::runtime_error {
public:
    explicit UnopenedFile(std::uint64_t id)
        : std::runtime_error("file id " + std::to_string(id) +
                             " was not opened via the control path") {}
};

enum class IoOp : std::uint8_t { Read = 0, Write = 1 };

struct IoDesc {
    IoOp op = IoOp::Read;
    std::uint64_t file_id = 0;
    std::uint64_t offset = 0;
    std::uint32_t len = 0;
    std::vector<std::byte> buffer;  // write source; read destination on completion
};

struct IoCompletion {
    std::uint64_t desc_id = 0;
    std::int64_t result = 0;  // bytes transferred, or negative errno
    std::vector<std::byte> data;
};

struct IoTicket {
    std::uint64_t first_id = 0;
    std::uint32_t count = 0;
};

// Batched asynchronous data-path I/O over shared submission/completion rings.
// Data descriptors may only reference files opened through the control-path
// OpenFile qcall; the data path never opens files itself.
class IoRing {
public:
    explicit IoRing(FileTable& files, std::size_t ring_capacity = 256);
    ~IoRing();

    // Single producer. Throws UnopenedFile before queuing anything if any
    // descriptor references an unknown file id.
    IoTicket submit(std::vector<IoDesc> batch);

    // Blocks until every descriptor of the ticket has completed; completions
    // are returned in submission order.
    std::vector<IoCompletion> reap(const IoTicket& ticket);

    void shutdown();

private:
    struct Slot {
        std::uint64_t id;
        IoDesc desc;
    };

    FileTable& files_;
    SpscRing<Slot> sq_;
    SpscRing<IoCompletion> cq_;
    std::atomic<bool> stop_{false};
    std::uint64_t next_id_ = 1;
    std::vector<IoCompletion> reaped_;  // completions popped but not yet claimed
    std::thread worker_;
};

}  // namespace quarklet::qcall
