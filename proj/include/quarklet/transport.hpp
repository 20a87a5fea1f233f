#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace quarklet::transport {

using NodeId = std::uint32_t;

struct PodAddr {
    std::uint32_t virtual_ip = 0;
    std::uint16_t port = 0;

    friend auto operator<=>(const PodAddr&, const PodAddr&) = default;
};

enum class LaneKind : std::uint8_t { Control = 0, Data = 1 };

class UnknownPod : public std::runtime_error {
public:
    UnknownPod() : std::runtime_error("pod not registered") {}
};

class PolicyDenied : public std::runtime_error {
public:
    PolicyDenied() : std::runtime_error("connection denied by policy") {}
};

class DuplicateNode : public std::runtime_error {
public:
    DuplicateNode() : std::runtime_error("node already joined") {}
};

class ConnectionClosed : public std::runtime_error {
public:
    ConnectionClosed() : std::runtime_error("node connection closed") {}
};

// Cluster metadata: node list, pod placement, connection permission policy.
class Registry {
public:
    void add_node(NodeId node);
    bool has_node(NodeId node) const;
    std::vector<NodeId> nodes() const;

    void register_pod(PodAddr pod, NodeId node);

    // Rules are evaluated in insertion order, first match wins; unmatched
    // pairs fall back to the default verdict (allow unless configured).
    void add_rule(PodAddr src, PodAddr dst, bool allow);
    void set_default_allow(bool allow) { default_allow_ = allow; }

    NodeId lookup_and_authorize(PodAddr src, PodAddr dst) const;
    std::optional<NodeId> find_pod(PodAddr pod) const;

private:
    mutable std::mutex mu_;
    std::set<NodeId> nodes_;
    std::map<PodAddr, NodeId> pods_;
    struct Rule {
        PodAddr src, dst;
        bool allow;
    };
    std::vector<Rule> rules_;
    bool default_allow_ = true;
};

struct BufferDesc {
    std::uint32_t capacity = 0;
};

// Control/data messages carried by a node-pair connection. DataWrite models a
// one-sided write into the peer's read buffer.
struct TransportMsg {
    enum class Type : std::uint8_t {
        DataWrite = 1,
        ConnectReq = 2,
        ConnectResp = 3,
        SpaceUpdate = 4,
        ChannelClose = 5,
    };

    Type type = Type::DataWrite;
    std::uint64_t channel_id = 0;
    std::vector<std::uint8_t> bytes;  // DataWrite payload
    PodAddr src{};                    // ConnectReq
    PodAddr dst{};                    // ConnectReq
    BufferDesc buffer{};              // ConnectReq / ConnectResp
    std::uint8_t verdict = 0;         // ConnectResp: 0 ok, 1 no listener, 2 denied
    std::uint64_t req_token = 0;      // ConnectReq/Resp correlation
    std::uint64_t peer_channel = 0;   // ConnectResp: responder's channel id
    std::uint32_t free_bytes = 0;     // SpaceUpdate (newly freed bytes)

    std::vector<std::uint8_t> encode() const;
    static TransportMsg decode(LaneKind lane, std::uint64_t channel_id,
                               const std::uint8_t* data, std::size_t len);
    LaneKind lane() const {
        return type == Type::DataWrite ? LaneKind::Data : LaneKind::Control;
    }
};

struct ConnectionStats {
    std::uint64_t messages = 0;
    std::uint64_t bytes = 0;
};

// Message handler invoked on delivery; must not block the dispatcher.
using MsgHandler =
    std::function<void(NodeId src, LaneKind lane, TransportMsg msg)>;

class Fabric {
public:
    virtual ~Fabric() = default;

    virtual void register_node(NodeId node, MsgHandler handler) = 0;

    // Pre-establishes connections from `node` to every already-joined node.
    // Returns the number of connections created.
    virtual std::size_t join_node(Registry& registry, NodeId node) = 0;

    virtual void send(NodeId src, NodeId dst, TransportMsg msg) = 0;

    virtual std::size_t connection_count() const = 0;
    virtual std::uint64_t connections_created() const = 0;
    virtual ConnectionStats stats(NodeId a, NodeId b) const = 0;
};

// Deterministic in-process fabric. With zero latency, send() delivers
// synchronously (per-lane FIFO via a single-drainer inbox per direction).
// With latency configured, messages sit in a virtual-time queue until pump().
class InprocFabric : public Fabric {
public:
    struct Latency {
        std::uint64_t fixed_ns = 0;
        std::uint64_t jitter_ns = 0;  // uniform [0, jitter_ns]
    };

    InprocFabric() : InprocFabric(Latency{}, 0) {}
    explicit InprocFabric(Latency latency, std::uint64_t seed = 0);

    void register_node(NodeId node, MsgHandler handler) override;
    std::size_t join_node(Registry& registry, NodeId node) override;
    void send(NodeId src, NodeId dst, TransportMsg msg) override;

    // Delivers all pending messages in virtual-time order (per-lane FIFO
    // enforced). No-op in zero-latency mode.
    std::size_t pump();

    void leave_node(NodeId node);

    std::size_t connection_count() const override;
    std::uint64_t connections_created() const override;
    ConnectionStats stats(NodeId a, NodeId b) const override;

private:
    struct Pending {
        std::uint64_t due_ns;
        std::uint64_t seq;
        NodeId src, dst;
        TransportMsg msg;
    };
    struct Direction {
        std::deque<std::pair<NodeId, TransportMsg>> inbox;
        bool draining = false;
    };
    struct Connection {
        bool open = true;
        ConnectionStats stats;
        std::map<NodeId, Direction> dir;  // keyed by destination
    };
    using PairKey = std::pair<NodeId, NodeId>;
    static PairKey key(NodeId a, NodeId b) {
        return a < b ? PairKey{a, b} : PairKey{b, a};
    }
    Connection& conn(NodeId a, NodeId b);
    void deliver(NodeId src, NodeId dst, TransportMsg msg);

    mutable std::mutex mu_;
    Latency latency_;
    std::mt19937_64 rng_;
    std::uint64_t now_ns_ = 0;
    std::uint64_t seq_ = 0;
    std::map<PairKey, Connection> conns_;
    std::map<NodeId, MsgHandler> handlers_;
    std::set<NodeId> joined_;
    std::uint64_t created_ = 0;
    // per (src,dst,lane,channel) last assigned due time, for per-lane FIFO
    std::map<std::tuple<NodeId, NodeId, LaneKind, std::uint64_t>, std::uint64_t>
        lane_due_;
    std::vector<Pending> pending_;
};

// Loopback-socket fabric: one TCP connection per node pair on 127.0.0.1.
// Wire format: frames {u32 len, u8 lane_kind, u64 channel_id, payload},
// little-endian; payload is TransportMsg::encode() output.
class LoopbackFabric : public Fabric {
public:
    LoopbackFabric();
    ~LoopbackFabric() override;

    void register_node(NodeId node, MsgHandler handler) override;
    std::size_t join_node(Registry& registry, NodeId node) override;
    void send(NodeId src, NodeId dst, TransportMsg msg) override;

    std::size_t connection_count() const override;
    std::uint64_t connections_created() const override;
    ConnectionStats stats(NodeId a, NodeId b) const override;

    void shutdown();

private:
    struct Link {
        int fd = -1;
        std::thread reader;
        std::mutex send_mu;
        ConnectionStats stats;
    };
    struct Node {
        int listen_fd = -1;
        std::uint16_t port = 0;
        std::thread acceptor;
        MsgHandler handler;
    };
    void start_reader(NodeId local, NodeId peer, int fd);
    Link& link(NodeId a, NodeId b);

    mutable std::mutex mu_;
    std::condition_variable links_cv_;
    std::map<NodeId, std::unique_ptr<Node>> nodes_;
    std::map<std::pair<NodeId, NodeId>, std::unique_ptr<Link>> links_;
    std::uint64_t created_ = 0;
    bool down_ = false;
};

}  // namespace quarklet::transport
