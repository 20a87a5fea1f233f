#include "quarklet/tsor.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

namespace quarklet::tsor {

// ---------------------------------------------------------------------------
// RingBuffer

RingBuffer::RingBuffer(std::uint32_t capacity)
    : buf_(std::bit_ceil(capacity)), mask_(static_cast<std::uint32_t>(buf_.size() - 1)) {}

std::size_t RingBuffer::write(std::span<const std::uint8_t> data) {
    const std::uint64_t head = head_.load(std::memory_order_acquire);
    const std::uint64_t tail = tail_.load(std::memory_order_relaxed);
    const std::size_t space = buf_.size() - static_cast<std::size_t>(tail - head);
    const std::size_t n = std::min(space, data.size());
    for (std::size_t i = 0; i < n; ++i) buf_[(tail + i) & mask_] = data[i];
    tail_.store(tail + n, std::memory_order_release);
    return n;
}

std::size_t RingBuffer::read(std::span<std::uint8_t> out) {
    const std::uint64_t tail = tail_.load(std::memory_order_acquire);
    const std::uint64_t head = head_.load(std::memory_order_relaxed);
    const std::size_t avail = static_cast<std::size_t>(tail - head);
    const std::size_t n = std::min(avail, out.size());
    for (std::size_t i = 0; i < n; ++i) out[i] = buf_[(head + i) & mask_];
    head_.store(head + n, std::memory_order_release);
    return n;
}

std::size_t RingBuffer::peek(std::span<std::uint8_t> out) const {
    const std::uint64_t tail = tail_.load(std::memory_order_acquire);
    const std::uint64_t head = head_.load(std::memory_order_acquire);
    const std::size_t avail = static_cast<std::size_t>(tail - head);
    const std::size_t n = std::min(avail, out.size());
    for (std::size_t i = 0; i < n; ++i) out[i] = buf_[(head + i) & mask_];
    return n;
}

std::size_t RingBuffer::used() const {
    return static_cast<std::size_t>(tail_.load(std::memory_order_acquire) -
                                    head_.load(std::memory_order_acquire));
}

std::size_t RingBuffer::free() const { return buf_.size() - used(); }

// ---------------------------------------------------------------------------
// NotificationBitmap

NotificationBitmap::NotificationBitmap(std::size_t max_clients)
    : l2_((max_clients + 63) / 64) {}

void NotificationBitmap::set(std::uint32_t client) {
    const std::size_t k = client / 64;
    l2_[k].fetch_or(1ULL << (client % 64), std::memory_order_release);
    l1_.fetch_or(1ULL << k, std::memory_order_release);
}

void NotificationBitmap::clear(std::uint32_t client) {
    const std::size_t k = client / 64;
    const std::uint64_t word =
        l2_[k].fetch_and(~(1ULL << (client % 64)), std::memory_order_acq_rel) &
        ~(1ULL << (client % 64));
    if (word == 0) {
        l1_.fetch_and(~(1ULL << k), std::memory_order_acq_rel);
        // Repair the summary if a concurrent set raced the clear.
        if (l2_[k].load(std::memory_order_acquire) != 0)
            l1_.fetch_or(1ULL << k, std::memory_order_release);
    }
}

bool NotificationBitmap::any() const {
    return l1_.load(std::memory_order_acquire) != 0;
}

std::optional<std::uint32_t> NotificationBitmap::scan(std::uint32_t from) {
    const std::size_t words = l2_.size();
    const std::size_t from_word = (from / 64) % words;
    const std::uint32_t from_bit = from % 64;
    ++l1_reads;
    const std::uint64_t l1 = l1_.load(std::memory_order_acquire);
    if (l1 == 0) return std::nullopt;
    // Walk words flagged in L1 starting at from_word; the extra final step
    // revisits the start word for the bits below `from` (full wrap-around).
    for (std::size_t step = 0; step <= words; ++step) {
        const std::size_t k = (from_word + step) % words;
        if (!((l1 >> k) & 1)) continue;
        std::uint64_t mask = ~0ull;
        if (step == 0)
            mask <<= from_bit;
        else if (step == words)
            mask = from_bit ? ~(~0ull << from_bit) : 0;
        ++l2_reads;
        const std::uint64_t w = l2_[k].load(std::memory_order_acquire) & mask;
        if (w) return static_cast<std::uint32_t>(k * 64 + std::countr_zero(w));
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// TsorClient

TsorClient::TsorClient(TsorService& service, std::uint32_t client_id, PodAddr pod)
    : service_(service), id_(client_id), pod_(pod) {
    region_ = std::make_shared<SharedRegion>(service.config().sq_capacity,
                                             service.config().cq_capacity);
}

void TsorClient::push_sq(ClientMsg msg) {
    while (!region_->sq.try_push(msg)) std::this_thread::yield();
    sq_entries_.fetch_add(1, std::memory_order_relaxed);
    service_.notify(id_);
}

void TsorClient::dispatch_cq_locked() {
    ServiceMsg msg;
    while (region_->cq.try_pop(msg)) {
        switch (msg.type) {
            case ServiceMsg::Type::ConnectDone:
                if (msg.channel_id != 0) chans_[msg.channel_id].established = true;
                connect_results_[msg.req_id] = {true,
                                                static_cast<std::int64_t>(msg.channel_id)};
                break;
            case ServiceMsg::Type::Error:
                connect_results_[msg.req_id] = {false, msg.code};
                break;
            case ServiceMsg::Type::AcceptIncoming:
                chans_[msg.channel_id].established = true;
                accept_queue_.push_back(msg.channel_id);
                break;
            case ServiceMsg::Type::ReadReady:
                break;  // readiness lives in the ring; wake is enough
            case ServiceMsg::Type::Closed:
                chans_[msg.channel_id].closed_remote = true;
                break;
        }
    }
    cv_.notify_all();
}

TsorClient::ChanState& TsorClient::chan_locked(ChannelHandle h) {
    return chans_[h];
}

std::uint64_t TsorClient::connect_start(PodAddr dst) {
    std::uint64_t req_id;
    {
        std::lock_guard lock(mu_);
        req_id = next_req_id_++;
    }
    ClientMsg msg;
    msg.type = ClientMsg::Type::ConnectReq;
    msg.dst = dst;
    msg.req_id = req_id;
    push_sq(msg);
    return req_id;
}

namespace {

[[noreturn]] void throw_tsor_error(std::int64_t code) {
    switch (static_cast<TsorError>(code)) {
        case TsorError::NoListener: throw NoListener();
        case TsorError::PolicyDenied: throw transport::PolicyDenied();
        case TsorError::UnknownPod: throw transport::UnknownPod();
        case TsorError::PortInUse: throw PortInUse();
        default: throw std::runtime_error("tsor error " + std::to_string(code));
    }
}

}  // namespace

std::optional<ChannelHandle> TsorClient::connect_poll(std::uint64_t req_id) {
    std::lock_guard lock(mu_);
    dispatch_cq_locked();
    auto it = connect_results_.find(req_id);
    if (it == connect_results_.end()) return std::nullopt;
    auto [ok, value] = it->second;
    connect_results_.erase(it);
    if (!ok) throw_tsor_error(value);
    return static_cast<ChannelHandle>(value);
}

ChannelHandle TsorClient::sys_connect(PodAddr dst,
                                      std::chrono::milliseconds timeout) {
    const std::uint64_t req_id = connect_start(dst);
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::unique_lock lock(mu_);
    for (;;) {
        dispatch_cq_locked();
        auto it = connect_results_.find(req_id);
        if (it != connect_results_.end()) {
            auto [ok, value] = it->second;
            connect_results_.erase(it);
            if (!ok) throw_tsor_error(value);
            return static_cast<ChannelHandle>(value);
        }
        if (cv_.wait_until(lock, deadline) == std::cv_status::timeout)
            throw Timeout();
    }
}

std::uint64_t TsorClient::listen_start(std::uint16_t port) {
    std::uint64_t req_id;
    {
        std::lock_guard lock(mu_);
        req_id = next_req_id_++;
    }
    ClientMsg msg;
    msg.type = ClientMsg::Type::ListenReq;
    msg.port = port;
    msg.req_id = req_id;
    push_sq(msg);
    return req_id;
}

bool TsorClient::listen_poll(std::uint64_t req_id) {
    std::lock_guard lock(mu_);
    dispatch_cq_locked();
    auto it = connect_results_.find(req_id);
    if (it == connect_results_.end()) return false;
    auto [ok, value] = it->second;
    connect_results_.erase(it);
    if (!ok) throw_tsor_error(value);
    listening_ = true;
    return true;
}

void TsorClient::sys_listen(std::uint16_t port) {
    const std::uint64_t req_id = listen_start(port);
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
    std::unique_lock lock(mu_);
    for (;;) {
        dispatch_cq_locked();
        auto it = connect_results_.find(req_id);
        if (it != connect_results_.end()) {
            auto [ok, value] = it->second;
            connect_results_.erase(it);
            if (!ok) throw_tsor_error(value);
            listening_ = true;
            return;
        }
        if (cv_.wait_until(lock, deadline) == std::cv_status::timeout)
            throw Timeout();
    }
}

std::optional<ChannelHandle> TsorClient::accept_poll() {
    std::lock_guard lock(mu_);
    dispatch_cq_locked();
    if (accept_queue_.empty()) return std::nullopt;
    ChannelHandle h = accept_queue_.front();
    accept_queue_.pop_front();
    return h;
}

ChannelHandle TsorClient::sys_accept(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::unique_lock lock(mu_);
    for (;;) {
        dispatch_cq_locked();
        if (!accept_queue_.empty()) {
            ChannelHandle h = accept_queue_.front();
            accept_queue_.pop_front();
            return h;
        }
        if (!listening_) throw ListenerClosed();
        if (cv_.wait_until(lock, deadline) == std::cv_status::timeout)
            throw Timeout();
    }
}

std::size_t TsorClient::sys_write(ChannelHandle h,
                                  std::span<const std::uint8_t> data) {
    auto bufs = region_->channel(h);
    if (!bufs) throw ChannelClosed();
    {
        std::lock_guard lock(mu_);
        dispatch_cq_locked();
        auto& st = chan_locked(h);
        if (st.closed_local) throw ChannelClosed();
    }
    const std::size_t n = bufs->write.write(data);
    if (n > 0 && !bufs->write_signal_active.exchange(true)) {
        sq_write_reqs_.fetch_add(1, std::memory_order_relaxed);
        ClientMsg msg;
        msg.type = ClientMsg::Type::WriteReq;
        msg.channel_id = h;
        push_sq(msg);
    }
    return n;
}

std::optional<std::vector<std::uint8_t>> TsorClient::sys_read_nb(ChannelHandle h,
                                                                 std::size_t max) {
    auto bufs = region_->channel(h);
    if (!bufs) {
        std::lock_guard lock(mu_);
        dispatch_cq_locked();
        auto& st = chan_locked(h);
        if (st.closed_remote || st.closed_local)
            return std::vector<std::uint8_t>{};  // torn-down channel: EOF
        throw ChannelClosed();
    }
    std::vector<std::uint8_t> out(max);
    for (;;) {
        const std::size_t n = bufs->read.read(out);
        if (n > 0) {
            out.resize(n);
            bufs->consumed_unreported.fetch_add(n, std::memory_order_release);
            if (!bufs->consumed_signal_pending.exchange(true)) {
                ClientMsg msg;
                msg.type = ClientMsg::Type::ReadConsumed;
                msg.channel_id = h;
                push_sq(msg);
            }
            return out;
        }
        bool closed;
        {
            std::lock_guard lock(mu_);
            dispatch_cq_locked();
            auto& st = chan_locked(h);
            closed = st.closed_remote || st.closed_local;
        }
        if (bufs->read.used() > 0) continue;  // data raced in with the close
        if (closed) return std::vector<std::uint8_t>{};  // end of stream
        bufs->read_signal_active.store(false, std::memory_order_release);
        if (bufs->read.used() > 0) continue;  // deposit raced the disarm
        return std::nullopt;  // would block
    }
}

std::vector<std::uint8_t> TsorClient::sys_read(ChannelHandle h, std::size_t max,
                                               std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
        auto r = sys_read_nb(h, max);
        if (r) return std::move(*r);
        std::unique_lock lock(mu_);
        dispatch_cq_locked();
        auto bufs = region_->channel(h);
        if (bufs && bufs->read.used() > 0) continue;
        auto& st = chan_locked(h);
        if (st.closed_remote || st.closed_local) continue;  // drain via nb path
        if (cv_.wait_until(lock, deadline) == std::cv_status::timeout)
            throw Timeout();
    }
}

void TsorClient::sys_close(ChannelHandle h) {
    {
        std::lock_guard lock(mu_);
        auto& st = chan_locked(h);
        if (st.closed_local) return;  // idempotent
        st.closed_local = true;
    }
    ClientMsg msg;
    msg.type = ClientMsg::Type::CloseReq;
    msg.channel_id = h;
    push_sq(msg);
}

bool TsorClient::eof(ChannelHandle h) {
    auto bufs = region_->channel(h);
    std::lock_guard lock(mu_);
    dispatch_cq_locked();
    auto& st = chan_locked(h);
    return st.closed_remote && (!bufs || bufs->read.used() == 0);
}

// ---------------------------------------------------------------------------
// TsorService

TsorService::TsorService(NodeId node, Registry& registry, Fabric& fabric,
                         TsorConfig config)
    : node_(node),
      registry_(registry),
      fabric_(fabric),
      config_(config),
      bitmap_(config.max_clients) {
    fabric_.register_node(node_, [this](NodeId src, LaneKind lane, TransportMsg msg) {
        (void)lane;
        on_transport(src, lane, std::move(msg));
    });
}

TsorService::~TsorService() { stop(); }

TsorClient& TsorService::register_client(PodAddr pod) {
    std::lock_guard lock(mu_);
    if (clients_.size() >= config_.max_clients)
        throw std::runtime_error("client limit reached");
    auto client = std::make_unique<TsorClient>(
        *this, static_cast<std::uint32_t>(clients_.size()), pod);
    clients_.push_back(std::move(client));
    return *clients_.back();
}

void TsorService::notify(std::uint32_t client_id) {
    bitmap_.set(client_id);
    {
        std::lock_guard lock(event_mu_);
        event_flag_ = true;
    }
    event_cv_.notify_one();
}

void TsorService::on_transport(NodeId src, LaneKind lane, TransportMsg msg) {
    (void)lane;
    {
        std::lock_guard lock(inbound_mu_);
        inbound_.emplace_back(src, std::move(msg));
    }
    {
        std::lock_guard lock(event_mu_);
        event_flag_ = true;
    }
    event_cv_.notify_one();
}

void TsorService::push_cq(std::uint32_t client_id, ServiceMsg msg) {
    TsorClient* client;
    {
        std::lock_guard lock(mu_);
        client = clients_.at(client_id).get();
    }
    while (!client->region_->cq.try_push(msg)) std::this_thread::yield();
    client->cv_.notify_all();
}

void TsorService::send_to_peer(ServiceChannel& ch, TransportMsg msg) {
    msg.channel_id = ch.peer_channel;
    if (ch.peer == node_) {
        // Same-node pair: loop locally without touching the fabric.
        std::lock_guard lock(inbound_mu_);
        inbound_.emplace_back(node_, std::move(msg));
        return;
    }
    fabric_.send(node_, ch.peer, std::move(msg));
}

bool TsorService::service_step() {
    bool work = false;

    // (c)/(e): apply arrived transport messages (data deposits, credits,
    // handshake traffic) before scanning for new client requests.
    for (;;) {
        std::pair<NodeId, TransportMsg> item;
        {
            std::lock_guard lock(inbound_mu_);
            if (inbound_.empty()) break;
            item = std::move(inbound_.front());
            inbound_.pop_front();
        }
        handle_transport(item.first, item.second);
        work = true;
    }

    // (a)/(b): find requesting clients via the two-layer bitmap.
    std::uint32_t start = 0;
    for (;;) {
        auto found = bitmap_.scan(start);
        if (!found) break;
        const std::uint32_t c = *found;
        bitmap_.clear(c);
        if (process_client(c)) work = true;
        start = c + 1;
    }

    // (b)/(d): move bytes for every channel with pending data or close.
    std::vector<std::uint64_t> to_pump(pump_set_.begin(), pump_set_.end());
    for (std::uint64_t id : to_pump) {
        std::lock_guard lock(mu_);
        auto it = channels_.find(id);
        if (it == channels_.end()) {
            pump_set_.erase(id);
            continue;
        }
        if (!it->second.established) continue;  // wait for handshake
        const std::uint64_t before = stats_.bytes_sent;
        const bool stalled = pump_channel(it->second);
        if (stats_.bytes_sent != before) work = true;
        if (!stalled) pump_set_.erase(id);
    }
    return work;
}

bool TsorService::process_client(std::uint32_t client_id) {
    TsorClient* client;
    {
        std::lock_guard lock(mu_);
        if (client_id >= clients_.size()) return false;
        client = clients_[client_id].get();
    }
    bool work = false;
    ClientMsg msg;
    while (client->region_->sq.try_pop(msg)) {
        work = true;
        switch (msg.type) {
            case ClientMsg::Type::ConnectReq: {
                ++stats_.connects_handled;
                NodeId peer;
                try {
                    peer = registry_.lookup_and_authorize(client->pod(), msg.dst);
                } catch (const transport::UnknownPod&) {
                    push_cq(client_id,
                            {ServiceMsg::Type::Error, 0, msg.req_id,
                             static_cast<std::int32_t>(TsorError::UnknownPod)});
                    break;
                } catch (const transport::PolicyDenied&) {
                    push_cq(client_id,
                            {ServiceMsg::Type::Error, 0, msg.req_id,
                             static_cast<std::int32_t>(TsorError::PolicyDenied)});
                    break;
                }
                std::uint64_t id;
                std::shared_ptr<ChannelBuffers> bufs;
                {
                    std::lock_guard lock(mu_);
                    id = (static_cast<std::uint64_t>(node_) << 32) |
                         next_channel_seq_++;
                    bufs = std::make_shared<ChannelBuffers>(config_.ring_capacity);
                    {
                        std::lock_guard block(client->region_->buffers_mu);
                        client->region_->buffers[id] = bufs;
                    }
                    ServiceChannel ch;
                    ch.id = id;
                    ch.owner = client_id;
                    ch.peer = peer;
                    ch.bufs = bufs;
                    ch.connect_req_id = msg.req_id;
                    channels_[id] = std::move(ch);
                }
                TransportMsg req;
                req.type = TransportMsg::Type::ConnectReq;
                req.channel_id = id;
                req.src = client->pod();
                req.dst = msg.dst;
                req.buffer.capacity = config_.ring_capacity;
                req.req_token = id;
                if (peer == node_) {
                    std::lock_guard lock(inbound_mu_);
                    inbound_.emplace_back(node_, std::move(req));
                } else {
                    fabric_.send(node_, peer, std::move(req));
                }
                break;
            }
            case ClientMsg::Type::ListenReq: {
                bool in_use;
                {
                    std::lock_guard lock(mu_);
                    const auto key =
                        std::make_pair(client->pod().virtual_ip, msg.port);
                    in_use = listeners_.contains(key);
                    if (!in_use) listeners_[key] = client_id;
                }
                if (in_use) {
                    push_cq(client_id,
                            {ServiceMsg::Type::Error, 0, msg.req_id,
                             static_cast<std::int32_t>(TsorError::PortInUse)});
                } else {
                    push_cq(client_id,
                            {ServiceMsg::Type::ConnectDone, 0, msg.req_id, 0});
                }
                break;
            }
            case ClientMsg::Type::WriteReq:
                pump_set_.insert(msg.channel_id);
                break;
            case ClientMsg::Type::ReadConsumed: {
                std::lock_guard lock(mu_);
                auto it = channels_.find(msg.channel_id);
                if (it == channels_.end()) break;
                ServiceChannel& ch = it->second;
                ch.bufs->consumed_signal_pending.store(false,
                                                       std::memory_order_release);
                const std::uint64_t freed =
                    ch.bufs->consumed_unreported.exchange(0,
                                                          std::memory_order_acquire);
                ch.unannounced_freed += freed;
                // Lazy notification: announce only past the half-ring mark.
                if (ch.unannounced_freed > config_.ring_capacity / 2) {
                    TransportMsg up;
                    up.type = TransportMsg::Type::SpaceUpdate;
                    up.free_bytes = static_cast<std::uint32_t>(ch.unannounced_freed);
                    ch.unannounced_freed = 0;
                    ++stats_.space_updates_sent;
                    send_to_peer(ch, std::move(up));
                }
                break;
            }
            case ClientMsg::Type::CloseReq: {
                std::lock_guard lock(mu_);
                auto it = channels_.find(msg.channel_id);
                if (it == channels_.end()) break;
                it->second.close_pending = true;
                pump_set_.insert(msg.channel_id);
                break;
            }
        }
    }
    return work;
}

bool TsorService::pump_channel(ServiceChannel& ch) {
    std::vector<std::uint8_t> chunk;
    for (;;) {
        const std::size_t used = ch.bufs->write.used();
        if (used == 0) {
            ch.bufs->write_signal_active.store(false, std::memory_order_seq_cst);
            if (ch.bufs->write.used() > 0) {
                ch.bufs->write_signal_active.store(true, std::memory_order_seq_cst);
                continue;  // client refilled between drain and disarm
            }
            if (ch.close_pending && !ch.close_sent) {
                TransportMsg close;
                close.type = TransportMsg::Type::ChannelClose;
                ch.close_sent = true;
                send_to_peer(ch, std::move(close));
                maybe_remove_channel(ch.id);
            }
            return false;
        }
        const std::size_t n = std::min<std::uint64_t>(used, ch.credit);
        if (n == 0) return true;  // flow-control gate: wait for SpaceUpdate
        chunk.resize(n);
        const std::size_t got = ch.bufs->write.read(chunk);
        chunk.resize(got);
        ch.credit -= got;
        TransportMsg data;
        data.type = TransportMsg::Type::DataWrite;
        data.bytes = std::move(chunk);
        ++stats_.data_writes_sent;
        stats_.bytes_sent += got;
        send_to_peer(ch, std::move(data));
        chunk.clear();
    }
}

void TsorService::handle_transport(NodeId src, TransportMsg& msg) {
    switch (msg.type) {
        case TransportMsg::Type::ConnectReq: {
            std::uint32_t owner;
            {
                std::lock_guard lock(mu_);
                auto it = listeners_.find({msg.dst.virtual_ip, msg.dst.port});
                if (it == listeners_.end()) {
                    TransportMsg resp;
                    resp.type = TransportMsg::Type::ConnectResp;
                    resp.channel_id = msg.channel_id;
                    resp.verdict =
                        static_cast<std::uint8_t>(TsorError::NoListener);
                    resp.req_token = msg.req_token;
                    if (src == node_) {
                        std::lock_guard ilock(inbound_mu_);
                        inbound_.emplace_back(node_, std::move(resp));
                    } else {
                        fabric_.send(node_, src, std::move(resp));
                    }
                    return;
                }
                owner = it->second;
            }
            ++stats_.accepts_handled;
            std::uint64_t local_id;
            {
                std::lock_guard lock(mu_);
                local_id = (static_cast<std::uint64_t>(node_) << 32) |
                           next_channel_seq_++;
                auto bufs = std::make_shared<ChannelBuffers>(config_.ring_capacity);
                TsorClient* client = clients_.at(owner).get();
                {
                    std::lock_guard block(client->region_->buffers_mu);
                    client->region_->buffers[local_id] = bufs;
                }
                ServiceChannel ch;
                ch.id = local_id;
                ch.owner = owner;
                ch.peer = src;
                ch.peer_channel = msg.channel_id;
                ch.bufs = std::move(bufs);
                ch.credit = msg.buffer.capacity;
                ch.established = true;
                channels_[local_id] = std::move(ch);
            }
            push_cq(owner, {ServiceMsg::Type::AcceptIncoming, local_id, 0, 0});
            TransportMsg resp;
            resp.type = TransportMsg::Type::ConnectResp;
            resp.channel_id = msg.channel_id;
            resp.peer_channel = local_id;
            resp.buffer.capacity = config_.ring_capacity;
            resp.req_token = msg.req_token;
            if (src == node_) {
                std::lock_guard ilock(inbound_mu_);
                inbound_.emplace_back(node_, std::move(resp));
            } else {
                fabric_.send(node_, src, std::move(resp));
            }
            break;
        }
        case TransportMsg::Type::ConnectResp: {
            std::uint32_t owner = 0;
            std::uint64_t req_id = 0;
            bool ok = false;
            {
                std::lock_guard lock(mu_);
                auto it = channels_.find(msg.channel_id);
                if (it == channels_.end()) return;
                ServiceChannel& ch = it->second;
                owner = ch.owner;
                req_id = ch.connect_req_id;
                if (msg.verdict != 0) {
                    // Handshake rejected: free the channel created in Step #2.
                    TsorClient* client = clients_.at(owner).get();
                    {
                        std::lock_guard block(client->region_->buffers_mu);
                        client->region_->buffers.erase(ch.id);
                    }
                    channels_.erase(it);
                } else {
                    ch.established = true;
                    ch.credit = msg.buffer.capacity;
                    ch.peer_channel = msg.peer_channel;
                    pump_set_.insert(ch.id);
                    ok = true;
                }
            }
            if (ok) {
                push_cq(owner,
                        {ServiceMsg::Type::ConnectDone, msg.channel_id, req_id, 0});
            } else {
                push_cq(owner, {ServiceMsg::Type::Error, msg.channel_id, req_id,
                                static_cast<std::int32_t>(msg.verdict)});
            }
            break;
        }
        case TransportMsg::Type::DataWrite: {
            std::uint32_t owner;
            std::shared_ptr<ChannelBuffers> bufs;
            {
                std::lock_guard lock(mu_);
                auto it = channels_.find(msg.channel_id);
                if (it == channels_.end()) return;
                owner = it->second.owner;
                bufs = it->second.bufs;
            }
            if (msg.bytes.size() > bufs->read.free()) throw FlowControlViolation();
            bufs->read.write(msg.bytes);
            if (!bufs->read_signal_active.exchange(true)) {
                ++stats_.read_ready_enqueued;
                push_cq(owner, {ServiceMsg::Type::ReadReady, msg.channel_id, 0, 0});
            } else {
                TsorClient* client;
                {
                    std::lock_guard lock(mu_);
                    client = clients_.at(owner).get();
                }
                client->cv_.notify_all();
            }
            break;
        }
        case TransportMsg::Type::SpaceUpdate: {
            std::lock_guard lock(mu_);
            auto it = channels_.find(msg.channel_id);
            if (it == channels_.end()) return;
            it->second.credit += msg.free_bytes;
            pump_set_.insert(msg.channel_id);
            break;
        }
        case TransportMsg::Type::ChannelClose: {
            std::uint32_t owner;
            {
                std::lock_guard lock(mu_);
                auto it = channels_.find(msg.channel_id);
                if (it == channels_.end()) return;
                it->second.remote_closed = true;
                owner = it->second.owner;
            }
            push_cq(owner, {ServiceMsg::Type::Closed, msg.channel_id, 0, 0});
            {
                std::lock_guard lock(mu_);
                maybe_remove_channel(msg.channel_id);
            }
            break;
        }
    }
}

void TsorService::maybe_remove_channel(std::uint64_t id) {
    auto it = channels_.find(id);
    if (it == channels_.end()) return;
    if (!(it->second.close_sent && it->second.remote_closed)) return;
    TsorClient* client = clients_.at(it->second.owner).get();
    {
        std::lock_guard block(client->region_->buffers_mu);
        client->region_->buffers.erase(id);
    }
    channels_.erase(it);
    pump_set_.erase(id);
}

std::size_t TsorService::channel_count() const {
    std::lock_guard lock(mu_);
    return channels_.size();
}

void TsorService::run() {
    if (engine_thread_.joinable()) return;
    stop_.store(false);
    engine_thread_ = std::thread([this] {
        std::uint64_t spins = 0;
        while (!stop_.load(std::memory_order_acquire)) {
            if (service_step()) {
                spins = 0;
                continue;
            }
            ++stats_.idle_polls;
            if (++spins < config_.idle_spin_budget) {
                std::this_thread::yield();
                continue;
            }
            std::unique_lock lock(event_mu_);
            if (!event_flag_ && !stop_.load()) {
                ++stats_.sleeps;
                event_cv_.wait(lock, [&] { return event_flag_ || stop_.load(); });
            }
            event_flag_ = false;
            ++stats_.wakes;
            spins = 0;
        }
    });
}

void TsorService::stop() {
    if (!engine_thread_.joinable()) return;
    stop_.store(true);
    {
        std::lock_guard lock(event_mu_);
        event_flag_ = true;
    }
    event_cv_.notify_all();
    engine_thread_.join();
}

}  // namespace quarklet::tsor
