#include "quarklet/transport.hpp"

#include <algorithm>
#include <cstring>

namespace quarklet::transport {

void Registry::add_node(NodeId node) {
    std::lock_guard lock(mu_);
    if (!nodes_.insert(node).second) throw DuplicateNode();
}

bool Registry::has_node(NodeId node) const {
    std::lock_guard lock(mu_);
    return nodes_.contains(node);
}

std::vector<NodeId> Registry::nodes() const {
    std::lock_guard lock(mu_);
    return {nodes_.begin(), nodes_.end()};
}

void Registry::register_pod(PodAddr pod, NodeId node) {
    std::lock_guard lock(mu_);
    pods_[pod] = node;
}

void Registry::add_rule(PodAddr src, PodAddr dst, bool allow) {
    std::lock_guard lock(mu_);
    rules_.push_back({src, dst, allow});
}

NodeId Registry::lookup_and_authorize(PodAddr src, PodAddr dst) const {
    std::lock_guard lock(mu_);
    auto it = pods_.find(dst);
    if (it == pods_.end()) throw UnknownPod();
    bool allow = default_allow_;
    for (const auto& r : rules_) {
        if (r.src == src && r.dst == dst) {
            allow = r.allow;
            break;
        }
    }
    if (!allow) throw PolicyDenied();
    return it->second;
}

std::optional<NodeId> Registry::find_pod(PodAddr pod) const {
    std::lock_guard lock(mu_);
    auto it = pods_.find(pod);
    if (it == pods_.end()) return std::nullopt;
    return it->second;
}

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto n = out.size();
    out.resize(n + sizeof(T));
    std::memcpy(out.data() + n, &v, sizeof(T));
}

template <typename T>
T get(const std::uint8_t*& p, const std::uint8_t* end) {
    if (p + sizeof(T) > end) throw std::runtime_error("short transport message");
    T v;
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    return v;
}

}  // namespace

std::vector<std::uint8_t> TransportMsg::encode() const {
    if (type == Type::DataWrite) return bytes;
    std::vector<std::uint8_t> out;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(type));
    switch (type) {
        case Type::ConnectReq:
            put<std::uint32_t>(out, src.virtual_ip);
            put<std::uint16_t>(out, src.port);
            put<std::uint32_t>(out, dst.virtual_ip);
            put<std::uint16_t>(out, dst.port);
            put<std::uint32_t>(out, buffer.capacity);
            put<std::uint64_t>(out, req_token);
            break;
        case Type::ConnectResp:
            put<std::uint8_t>(out, verdict);
            put<std::uint32_t>(out, buffer.capacity);
            put<std::uint64_t>(out, req_token);
            put<std::uint64_t>(out, peer_channel);
            break;
        case Type::SpaceUpdate:
            put<std::uint32_t>(out, free_bytes);
            break;
        case Type::ChannelClose:
        case Type::DataWrite:
            break;
    }
    return out;
}

TransportMsg TransportMsg::decode(LaneKind lane, std::uint64_t channel_id,
                                  const std::uint8_t* data, std::size_t len) {
    TransportMsg msg;
    msg.channel_id = channel_id;
    if (lane == LaneKind::Data) {
        msg.type = Type::DataWrite;
        msg.bytes.assign(data, data + len);
        return msg;
    }
    const std::uint8_t* p = data;
    const std::uint8_t* end = data + len;
    msg.type = static_cast<Type>(get<std::uint8_t>(p, end));
    switch (msg.type) {
        case Type::ConnectReq:
            msg.src.virtual_ip = get<std::uint32_t>(p, end);
            msg.src.port = get<std::uint16_t>(p, end);
            msg.dst.virtual_ip = get<std::uint32_t>(p, end);
            msg.dst.port = get<std::uint16_t>(p, end);
            msg.buffer.capacity = get<std::uint32_t>(p, end);
            msg.req_token = get<std::uint64_t>(p, end);
            break;
        case Type::ConnectResp:
            msg.verdict = get<std::uint8_t>(p, end);
            msg.buffer.capacity = get<std::uint32_t>(p, end);
            msg.req_token = get<std::uint64_t>(p, end);
            msg.peer_channel = get<std::uint64_t>(p, end);
            break;
        case Type::SpaceUpdate:
            msg.free_bytes = get<std::uint32_t>(p, end);
            break;
        case Type::ChannelClose:
            break;
        case Type::DataWrite:
            throw std::runtime_error("DataWrite on control lane");
    }
    return msg;
}

InprocFabric::InprocFabric(Latency latency, std::uint64_t seed)
    : latency_(latency), rng_(seed) {}

void InprocFabric::register_node(NodeId node, MsgHandler handler) {
    std::lock_guard lock(mu_);
    handlers_[node] = std::move(handler);
}

std::size_t InprocFabric::join_node(Registry& registry, NodeId node) {
    registry.add_node(node);
    std::lock_guard lock(mu_);
    std::size_t made = 0;
    for (NodeId peer : joined_) {
        auto& c = conns_[key(node, peer)];
        c.open = true;
        c.dir[node];
        c.dir[peer];
        ++created_;
        ++made;
    }
    joined_.insert(node);
    return made;
}

InprocFabric::Connection& InprocFabric::conn(NodeId a, NodeId b) {
    auto it = conns_.find(key(a, b));
    if (it == conns_.end() || !it->second.open) throw ConnectionClosed();
    return it->second;
}

void InprocFabric::send(NodeId src, NodeId dst, TransportMsg msg) {
    std::unique_lock lock(mu_);
    auto& c = conn(src, dst);
    c.stats.messages += 1;
    c.stats.bytes += msg.bytes.size();
    if (latency_.fixed_ns == 0 && latency_.jitter_ns == 0) {
        auto& d = c.dir[dst];
        d.inbox.emplace_back(src, std::move(msg));
        if (d.draining) return;  // an earlier frame's drain loop will take it
        d.draining = true;
        while (!d.inbox.empty()) {
            auto [from, m] = std::move(d.inbox.front());
            d.inbox.pop_front();
            MsgHandler h = handlers_.at(dst);
            const LaneKind lane = m.lane();
            lock.unlock();
            h(from, lane, std::move(m));
            lock.lock();
        }
        d.draining = false;
        return;
    }
    std::uint64_t due = now_ns_ + latency_.fixed_ns;
    if (latency_.jitter_ns)
        due += std::uniform_int_distribution<std::uint64_t>(0, latency_.jitter_ns)(rng_);
    auto lane_key = std::make_tuple(src, dst, msg.lane(), msg.channel_id);
    auto& last = lane_due_[lane_key];
    due = std::max(due, last);  // per-lane FIFO
    last = due;
    pending_.push_back({due, seq_++, src, dst, std::move(msg)});
}

std::size_t InprocFabric::pump() {
    std::unique_lock lock(mu_);
    std::stable_sort(pending_.begin(), pending_.end(),
                     [](const Pending& a, const Pending& b) {
                         return a.due_ns != b.due_ns ? a.due_ns < b.due_ns
                                                     : a.seq < b.seq;
                     });
    std::vector<Pending> batch;
    batch.swap(pending_);
    std::size_t n = batch.size();
    for (auto& p : batch) {
        now_ns_ = std::max(now_ns_, p.due_ns);
        auto hit = handlers_.find(p.dst);
        if (hit == handlers_.end()) continue;
        MsgHandler h = hit->second;
        const LaneKind lane = p.msg.lane();
        lock.unlock();
        h(p.src, lane, std::move(p.msg));
        lock.lock();
    }
    return n;
}

void InprocFabric::leave_node(NodeId node) {
    std::vector<std::pair<NodeId, TransportMsg>> closes;
    {
        std::lock_guard lock(mu_);
        joined_.erase(node);
        for (auto& [k, c] : conns_) {
            if ((k.first == node || k.second == node) && c.open) c.open = false;
        }
    }
}

std::size_t InprocFabric::connection_count() const {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (const auto& [k, c] : conns_)
        if (c.open) ++n;
    return n;
}

std::uint64_t InprocFabric::connections_created() const {
    std::lock_guard lock(mu_);
    return created_;
}

ConnectionStats InprocFabric::stats(NodeId a, NodeId b) const {
    std::lock_guard lock(mu_);
    auto it = conns_.find(key(a, b));
    if (it == conns_.end()) return {};
    return it->second.stats;
}

}  // namespace quarklet::transport
