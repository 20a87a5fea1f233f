#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <set>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

#include "quarklet/transport.hpp"

namespace quarklet::tsor {

using transport::Fabric;
using transport::LaneKind;
using transport::NodeId;
using transport::PodAddr;
using transport::Registry;
using transport::TransportMsg;

class ChannelClosed : public std::runtime_error {
public:
    ChannelClosed() : std::runtime_error("channel closed") {}
};

class NoListener : public std::runtime_error {
public:
    NoListener() : std::runtime_error("no listener at destination") {}
};

class Timeout : public std::runtime_error {
public:
    Timeout() : std::runtime_error("operation timed out") {}
};

class PortInUse : public std::runtime_error {
public:
    PortInUse() : std::runtime_error("port already has a listener") {}
};

class ListenerClosed : public std::runtime_error {
public:
    ListenerClosed() : std::runtime_error("listener closed") {}
};

class FlowControlViolation : public std::logic_error {
public:
    FlowControlViolation() : std::logic_error("read ring deposit exceeds free space") {}
};

// Bounded FIFO byte stream; capacity is a power of two. Producer advances
// tail, consumer advances head; safe for one producer and one consumer.
class RingBuffer {
public:
    explicit RingBuffer(std::uint32_t capacity = 65536);

    std::size_t write(std::span<const std::uint8_t> data);
    std::size_t read(std::span<std::uint8_t> out);
    std::size_t peek(std::span<std::uint8_t> out) const;

    std::size_t used() const;
    std::size_t free() const;
    std::size_t capacity() const { return buf_.size(); }

private:
    std::vector<std::uint8_t> buf_;
    std::uint32_t mask_;
    std::atomic<std::uint64_t> head_{0};
    std::atomic<std::uint64_t> tail_{0};
};

struct ClientMsg {
    enum class Type : std::uint8_t {
        WriteReq,
        ConnectReq,
        ListenReq,
        CloseReq,
        ReadConsumed,
    };
    Type type = Type::WriteReq;
    std::uint64_t channel_id = 0;
    PodAddr dst{};
    std::uint16_t port = 0;
    std::uint64_t req_id = 0;
};

struct ServiceMsg {
    enum class Type : std::uint8_t {
        ReadReady,
        ConnectDone,
        AcceptIncoming,
        Closed,
        Error,
    };
    Type type = Type::ReadReady;
    std::uint64_t channel_id = 0;
    std::uint64_t req_id = 0;
    std::int32_t code = 0;
};

// Error codes carried by ServiceMsg::Error.
enum class TsorError : std::int32_t {
    None = 0,
    NoListener = 1,
    PolicyDenied = 2,
    UnknownPod = 3,
    PortInUse = 4,
};

// Mutex-backed bounded FIFO; one side produces, the other consumes.
template <typename T>
class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

    bool try_push(T msg) {
        std::lock_guard lock(mu_);
        if (q_.size() >= capacity_) return false;
        q_.push_back(std::move(msg));
        return true;
    }

    bool try_pop(T& out) {
        std::lock_guard lock(mu_);
        if (q_.empty()) return false;
        out = std::move(q_.front());
        q_.pop_front();
        return true;
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return q_.size();
    }

private:
    mutable std::mutex mu_;
    std::deque<T> q_;
    std::size_t capacity_;
};

// Two-layer bitmap over client ids: L2 bit c set means client c has
// unserviced SQ entries; L1 bit k summarizes L2 word k.
class NotificationBitmap {
public:
    explicit NotificationBitmap(std::size_t max_clients = 4096);

    void set(std::uint32_t client);
    void clear(std::uint32_t client);
    bool any() const;

    // Lowest flagged client at or after `from`, scanning L1 then one L2
    // word; wraps once. Instrumented with word-read counters.
    std::optional<std::uint32_t> scan(std::uint32_t from = 0);

    std::uint64_t l1() const { return l1_.load(); }
    std::uint64_t l2_word(std::size_t k) const { return l2_[k].load(); }
    std::size_t l2_words() const { return l2_.size(); }

    std::uint64_t l1_reads = 0;
    std::uint64_t l2_reads = 0;

private:
    std::atomic<std::uint64_t> l1_{0};
    std::vector<std::atomic<std::uint64_t>> l2_;
};

// Per-channel rings plus the coalescing/lazy-notification state shared
// between a client and its service.
struct ChannelBuffers {
    explicit ChannelBuffers(std::uint32_t ring_capacity)
        : read(ring_capacity), write(ring_capacity) {}

    RingBuffer read;
    RingBuffer write;
    // write-side signal coalescing: set while a WriteReq is outstanding or
    // the service is actively draining
    std::atomic<bool> write_signal_active{false};
    // read-side: set while the client has an unconsumed ReadReady
    std::atomic<bool> read_signal_active{false};
    // consumption not yet observed by the local service
    std::atomic<std::uint64_t> consumed_unreported{0};
    std::atomic<bool> consumed_signal_pending{false};
};

// One shared region per client: SQ, CQ, and the per-channel buffer pairs
// that double as the transfer source/sink.
struct SharedRegion {
    SharedRegion(std::size_t sq_cap, std::size_t cq_cap) : sq(sq_cap), cq(cq_cap) {}

    BoundedQueue<ClientMsg> sq;
    BoundedQueue<ServiceMsg> cq;
    std::mutex buffers_mu;
    std::map<std::uint64_t, std::shared_ptr<ChannelBuffers>> buffers;

    std::shared_ptr<ChannelBuffers> channel(std::uint64_t id) {
        std::lock_guard lock(buffers_mu);
        auto it = buffers.find(id);
        return it == buffers.end() ? nullptr : it->second;
    }
};

struct TsorConfig {
    std::uint32_t ring_capacity = 65536;
    std::size_t sq_capacity = 256;
    std::size_t cq_capacity = 256;
    std::size_t max_clients = 4096;
    std::uint64_t idle_spin_budget = 64;
};

struct ServiceStats {
    std::uint64_t data_writes_sent = 0;
    std::uint64_t bytes_sent = 0;
    std::uint64_t space_updates_sent = 0;
    std::uint64_t read_ready_enqueued = 0;
    std::uint64_t connects_handled = 0;
    std::uint64_t accepts_handled = 0;
    std::uint64_t idle_polls = 0;
    std::uint64_t sleeps = 0;
    std::uint64_t wakes = 0;
};

class TsorService;

using ChannelHandle = std::uint64_t;

// Socket-call surface of one TSoR client. One application thread drives one
// channel at a time; different channels may be driven concurrently.
class TsorClient {
public:
    TsorClient(TsorService& service, std::uint32_t client_id, PodAddr pod);

    // Nonblocking handshake: start pushes the connect request; poll returns
    // the handle once ConnectDone arrives (throws on Error).
    std::uint64_t connect_start(PodAddr dst);
    std::optional<ChannelHandle> connect_poll(std::uint64_t req_id);
    ChannelHandle sys_connect(PodAddr dst,
                              std::chrono::milliseconds timeout =
                                  std::chrono::milliseconds(5000));

    std::uint64_t listen_start(std::uint16_t port);
    bool listen_poll(std::uint64_t req_id);  // throws PortInUse on rejection
    void sys_listen(std::uint16_t port);
    std::optional<ChannelHandle> accept_poll();
    ChannelHandle sys_accept(std::chrono::milliseconds timeout =
                                 std::chrono::milliseconds(5000));

    // Copies at most the write ring's free space; 0 means WouldBlock.
    std::size_t sys_write(ChannelHandle h, std::span<const std::uint8_t> data);

    // Blocking read: waits for data or end-of-stream (empty result).
    std::vector<std::uint8_t> sys_read(ChannelHandle h, std::size_t max,
                                       std::chrono::milliseconds timeout =
                                           std::chrono::milliseconds(5000));
    // Nonblocking read: nullopt = WouldBlock, empty = end-of-stream.
    std::optional<std::vector<std::uint8_t>> sys_read_nb(ChannelHandle h,
                                                         std::size_t max);

    void sys_close(ChannelHandle h);

    bool eof(ChannelHandle h);

    PodAddr pod() const { return pod_; }
    std::uint32_t id() const { return id_; }
    std::uint64_t sq_write_reqs() const { return sq_write_reqs_.load(); }
    std::uint64_t sq_entries() const { return sq_entries_.load(); }

private:
    friend class TsorService;

    struct ChanState {
        bool established = false;
        bool closed_remote = false;  // peer sent ChannelClose (drain then EOF)
        bool closed_local = false;
        std::int32_t error = 0;
    };

    void push_sq(ClientMsg msg);
    void dispatch_cq_locked();
    ChanState& chan_locked(ChannelHandle h);

    TsorService& service_;
    std::uint32_t id_;
    PodAddr pod_;
    std::shared_ptr<SharedRegion> region_;

    std::mutex mu_;
    std::condition_variable cv_;
    std::map<std::uint64_t, ChanState> chans_;
    std::map<std::uint64_t, std::pair<bool, std::int64_t>> connect_results_;
    std::deque<ChannelHandle> accept_queue_;
    bool listening_ = false;
    std::uint64_t next_req_id_ = 1;
    std::atomic<std::uint64_t> sq_write_reqs_{0};
    std::atomic<std::uint64_t> sq_entries_{0};
};

// Per-node engine: consumes client SQs (found via the notification bitmap),
// moves ring data over the fabric under credit flow control, deposits
// arriving data, and issues lazy space updates.
class TsorService {
public:
    TsorService(NodeId node, Registry& registry, Fabric& fabric,
                TsorConfig config = {});
    ~TsorService();

    TsorClient& register_client(PodAddr pod);

    // One engine iteration; returns whether any work was done.
    bool service_step();

    // Busy-poll/idle-sleep loop on a dedicated thread.
    void run();
    void stop();

    NodeId node() const { return node_; }
    const TsorConfig& config() const { return config_; }
    const ServiceStats& stats() const { return stats_; }
    NotificationBitmap& bitmap() { return bitmap_; }
    std::size_t channel_count() const;

    // Fabric receive hook; enqueues and wakes the engine, never blocks.
    void on_transport(NodeId src, LaneKind lane, TransportMsg msg);

private:
    friend class TsorClient;

    struct ServiceChannel {
        std::uint64_t id = 0;
        std::uint32_t owner = 0;  // client id
        NodeId peer = 0;
        std::uint64_t peer_channel = 0;  // channel id at the peer endpoint
        std::shared_ptr<ChannelBuffers> bufs;
        std::uint64_t credit = 0;  // known free bytes in peer read ring
        std::uint64_t unannounced_freed = 0;
        bool established = false;
        bool close_pending = false;
        bool close_sent = false;
        bool remote_closed = false;
        std::uint64_t connect_req_id = 0;  // requester side
    };

    void notify(std::uint32_t client_id);  // client -> engine doorbell
    bool process_client(std::uint32_t client_id);
    bool pump_channel(ServiceChannel& ch);  // true while stalled on credit
    void handle_transport(NodeId src, TransportMsg& msg);
    void push_cq(std::uint32_t client_id, ServiceMsg msg);
    void send_to_peer(ServiceChannel& ch, TransportMsg msg);
    void maybe_remove_channel(std::uint64_t id);

    NodeId node_;
    Registry& registry_;
    Fabric& fabric_;
    TsorConfig config_;

    mutable std::mutex mu_;  // channel/client tables
    std::vector<std::unique_ptr<TsorClient>> clients_;
    std::map<std::uint64_t, ServiceChannel> channels_;
    std::map<std::pair<std::uint32_t, std::uint16_t>, std::uint32_t>
        listeners_;  // (virtual_ip, port) -> client id
    std::set<std::uint64_t> pump_set_;  // channels with data (or close) to move

    NotificationBitmap bitmap_;
    std::mutex inbound_mu_;
    std::deque<std::pair<NodeId, TransportMsg>> inbound_;

    std::mutex event_mu_;
    std::condition_variable event_cv_;
    bool event_flag_ = false;
    std::atomic<bool> stop_{false};
    std::thread engine_thread_;

    ServiceStats stats_;
    std::uint64_t next_channel_seq_ = 1;
};

}  // namespace quarklet::tsor
