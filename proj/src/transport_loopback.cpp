#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstring>

#include "quarklet/transport.hpp"

namespace quarklet::transport {

namespace {

bool read_exact(int fd, void* buf, std::size_t len) {
    auto* p = static_cast<std::uint8_t*>(buf);
    while (len > 0) {
        ssize_t n = ::read(fd, p, len);
        if (n <= 0) return false;
        p += n;
        len -= static_cast<std::size_t>(n);
    }
    return true;
}

bool write_all(int fd, const void* buf, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(buf);
    while (len > 0) {
        ssize_t n = ::write(fd, p, len);
        if (n <= 0) return false;
        p += n;
        len -= static_cast<std::size_t>(n);
    }
    return true;
}

}  // namespace

LoopbackFabric::LoopbackFabric() = default;

LoopbackFabric::~LoopbackFabric() { shutdown(); }

void LoopbackFabric::register_node(NodeId node, MsgHandler handler) {
    std::lock_guard lock(mu_);
    auto it = nodes_.find(node);
    if (it != nodes_.end()) {
        it->second->handler = std::move(handler);
        return;
    }
    auto n = std::make_unique<Node>();
    n->handler = std::move(handler);
    nodes_[node] = std::move(n);
}

std::size_t LoopbackFabric::join_node(Registry& registry, NodeId node) {
    registry.add_node(node);
    std::unique_lock lock(mu_);
    auto it = nodes_.find(node);
    if (it == nodes_.end()) {
        nodes_[node] = std::make_unique<Node>();
        it = nodes_.find(node);
    }
    Node& self = *it->second;

    self.listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
    int one = 1;
    ::setsockopt(self.listen_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(self.listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
        ::listen(self.listen_fd, 64) != 0)
        throw std::runtime_error("loopback bind/listen failed");
    socklen_t alen = sizeof addr;
    ::getsockname(self.listen_fd, reinterpret_cast<sockaddr*>(&addr), &alen);
    self.port = ntohs(addr.sin_port);

    self.acceptor = std::thread([this, node, fd = self.listen_fd] {
        for (;;) {
            int cfd = ::accept(fd, nullptr, nullptr);
            if (cfd < 0) return;
            std::uint32_t peer_id;
            if (!read_exact(cfd, &peer_id, sizeof peer_id)) {
                ::close(cfd);
                continue;
            }
            {
                std::lock_guard lk(mu_);
                auto l = std::make_unique<Link>();
                l->fd = cfd;
                links_[{node, peer_id}] = std::move(l);
            }
            links_cv_.notify_all();
            start_reader(node, peer_id, cfd);
        }
    });

    // Connect out to every already-joined peer.
    std::size_t made = 0;
    std::vector<std::pair<NodeId, std::uint16_t>> peers;
    for (auto& [id, n] : nodes_) {
        if (id != node && n->listen_fd >= 0) peers.emplace_back(id, n->port);
    }
    lock.unlock();
    for (auto [peer, port] : peers) {
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        sockaddr_in paddr{};
        paddr.sin_family = AF_INET;
        paddr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        paddr.sin_port = htons(port);
        if (::connect(fd, reinterpret_cast<sockaddr*>(&paddr), sizeof paddr) != 0)
            throw std::runtime_error("loopback connect failed");
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        std::uint32_t self_id = node;
        write_all(fd, &self_id, sizeof self_id);
        {
            std::lock_guard lk(mu_);
            auto l = std::make_unique<Link>();
            l->fd = fd;
            links_[{node, peer}] = std::move(l);
            ++created_;
        }
        start_reader(node, peer, fd);
        // Wait for the peer's acceptor to register the reverse link so the
        // connection is usable in both directions once join_node returns.
        {
            std::unique_lock lk(mu_);
            links_cv_.wait(lk, [&] {
                return down_ || links_.count({peer, node}) > 0;
            });
        }
        ++made;
    }
    return made;
}

void LoopbackFabric::start_reader(NodeId local, NodeId peer, int fd) {
    std::thread reader([this, local, peer, fd] {
        for (;;) {
            std::uint32_t len;
            std::uint8_t lane;
            std::uint64_t channel;
            if (!read_exact(fd, &len, 4) || !read_exact(fd, &lane, 1) ||
                !read_exact(fd, &channel, 8))
                return;
            std::vector<std::uint8_t> payload(len);
            if (len && !read_exact(fd, payload.data(), len)) return;
            MsgHandler h;
            {
                std::lock_guard lk(mu_);
                if (down_) return;
                auto it = nodes_.find(local);
                if (it == nodes_.end()) return;
                h = it->second->handler;
            }
            if (!h) continue;
            auto kind = static_cast<LaneKind>(lane);
            h(peer, kind,
              TransportMsg::decode(kind, channel, payload.data(), payload.size()));
        }
    });
    std::lock_guard lk(mu_);
    auto it = links_.find({local, peer});
    if (it != links_.end()) it->second->reader = std::move(reader);
    else reader.detach();
}

LoopbackFabric::Link& LoopbackFabric::link(NodeId a, NodeId b) {
    auto it = links_.find({a, b});
    if (it == links_.end()) throw ConnectionClosed();
    return *it->second;
}

void LoopbackFabric::send(NodeId src, NodeId dst, TransportMsg msg) {
    Link* l;
    {
        std::lock_guard lock(mu_);
        l = &link(src, dst);
    }
    const auto payload = msg.encode();
    const std::uint32_t len = static_cast<std::uint32_t>(payload.size());
    const std::uint8_t lane = static_cast<std::uint8_t>(msg.lane());
    std::lock_guard slock(l->send_mu);
    if (!write_all(l->fd, &len, 4) || !write_all(l->fd, &lane, 1) ||
        !write_all(l->fd, &msg.channel_id, 8) ||
        (len && !write_all(l->fd, payload.data(), len)))
        throw ConnectionClosed();
    l->stats.messages += 1;
    l->stats.bytes += payload.size();
}

std::size_t LoopbackFabric::connection_count() const {
    std::lock_guard lock(mu_);
    return links_.size() / 2;
}

std::uint64_t LoopbackFabric::connections_created() const {
    std::lock_guard lock(mu_);
    return created_;
}

ConnectionStats LoopbackFabric::stats(NodeId a, NodeId b) const {
    std::lock_guard lock(mu_);
    ConnectionStats s;
    for (auto key : {std::pair{a, b}, std::pair{b, a}}) {
        auto it = links_.find(key);
        if (it != links_.end()) {
            s.messages += it->second->stats.messages;
            s.bytes += it->second->stats.bytes;
        }
    }
    return s;
}

void LoopbackFabric::shutdown() {
    std::unique_lock lock(mu_);
    if (down_) return;
    down_ = true;
    links_cv_.notify_all();
    for (auto& [id, n] : nodes_) {
        if (n->listen_fd >= 0) {
            ::shutdown(n->listen_fd, SHUT_RDWR);
            ::close(n->listen_fd);
            n->listen_fd = -1;
        }
    }
    for (auto& [k, l] : links_) {
        if (l->fd >= 0) ::shutdown(l->fd, SHUT_RDWR);
    }
    lock.unlock();
    for (auto& [id, n] : nodes_)
        if (n->acceptor.joinable()) n->acceptor.join();
    for (auto& [k, l] : links_) {
        if (l->reader.joinable()) l->reader.join();
        if (l->fd >= 0) ::close(l->fd);
        l->fd = -1;
    }
}

}  // namespace quarklet::transport
