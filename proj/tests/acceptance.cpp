// Acceptance harness: one pass/fail line per criterion, nonzero exit on any
// failure. Each check is property-based (counters, orderings, oracles), not
// absolute timings.

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "quarklet/bench.hpp"
#include "quarklet/checksum.hpp"
#include "quarklet/hibernate.hpp"
#include "quarklet/pagealloc.hpp"
#include "quarklet/qcall.hpp"
#include "quarklet/tsor.hpp"

using namespace quarklet;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& name, bool ok,
            const std::string& detail = "") {
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << criterion << ": "
              << name;
    if (!detail.empty()) std::cout << " (" << detail << ")";
    std::cout << std::endl;
    if (!ok) ++g_failures;
}

struct Check {
    bool ok = true;
    std::ostringstream detail;

    void expect(bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            if (detail.tellp() > 0) detail << "; ";
            detail << what;
        }
    }
};

// Minimal two-node TSoR cluster driven cooperatively on this thread.
struct Cluster {
    transport::Registry reg;
    transport::InprocFabric fab;
    std::unique_ptr<tsor::TsorService> a, b;

    explicit Cluster(tsor::TsorConfig cfg = {}) {
        a = std::make_unique<tsor::TsorService>(1, reg, fab, cfg);
        b = std::make_unique<tsor::TsorService>(2, reg, fab, cfg);
        fab.join_node(reg, 1);
        fab.join_node(reg, 2);
    }

    void settle() {
        bool any;
        do {
            any = a->service_step();
            any = b->service_step() || any;
        } while (any);
    }

    std::pair<tsor::ChannelHandle, tsor::ChannelHandle> dial(
        tsor::TsorClient& ca, tsor::TsorClient& cb, std::uint16_t port) {
        const auto crid = ca.connect_start({cb.pod().virtual_ip, port});
        std::optional<tsor::ChannelHandle> ha, hb;
        while (!(ha = ca.connect_poll(crid))) settle();
        while (!(hb = cb.accept_poll())) settle();
        return {*ha, *hb};
    }
};

std::vector<std::uint8_t> rand_bytes(std::mt19937_64& rng, std::size_t n) {
    std::vector<std::uint8_t> out(n);
    for (auto& x : out) x = static_cast<std::uint8_t>(rng() & 0xFF);
    return out;
}

std::filesystem::path scratch() {
    auto p = std::filesystem::temp_directory_path() / "quarklet-acceptance";
    std::filesystem::create_directories(p);
    return p;
}

// ---------------------------------------------------------------------------

void criterion1_stream_integrity() {
    Check c;
    const auto t0 = Clock::now();
    for (std::uint64_t seed = 1; seed <= 20 && c.ok; ++seed) {
        Cluster cl;
        cl.reg.register_pod({10, 0}, 1);
        cl.reg.register_pod({20, 100}, 2);
        auto& ca = cl.a->register_client({10, 0});
        auto& cb = cl.b->register_client({20, 100});
        const auto lrid = cb.listen_start(100);
        cl.settle();
        cb.listen_poll(lrid);
        auto [ha, hb] = cl.dial(ca, cb, 100);

        std::mt19937_64 rng(seed);
        StreamChecksum tx, rx;
        std::uint64_t remaining = 10ull << 20;
        while (remaining > 0 || rx.bytes() < tx.bytes()) {
            if (remaining > 0) {
                auto chunk = rand_bytes(
                    rng, std::min<std::uint64_t>(1 + rng() % 16384, remaining));
                std::size_t off = 0;
                while (off < chunk.size()) {
                    const auto n = ca.sys_write(
                        ha, std::span<const std::uint8_t>(chunk).subspan(off));
                    off += n;
                    if (n == 0) break;
                }
                tx.feed(std::span<const std::uint8_t>(chunk.data(), off));
                remaining -= off;
            }
            cl.settle();
            for (;;) {
                auto r = cb.sys_read_nb(hb, 65536);
                if (!r || r->empty()) break;
                rx.feed(std::span<const std::uint8_t>(*r));
            }
        }
        c.expect(tx.bytes() == (10ull << 20), "sender did not push 10 MiB");
        c.expect(tx.value() == rx.value(),
                 "checksum mismatch at seed " + std::to_string(seed));
    }
    const double secs =
        std::chrono::duration<double>(Clock::now() - t0).count();
    c.expect(secs < 60.0, "took " + std::to_string(secs) + " s");
    report(1, "stream integrity, 20 seeds x 10 MiB", c.ok, c.detail.str());
}

void criterion2_handshake_economy() {
    Check c;
    Cluster cl;
    cl.reg.register_pod({10, 0}, 1);
    cl.reg.register_pod({20, 200}, 2);
    auto& ca = cl.a->register_client({10, 0});
    auto& cb = cl.b->register_client({20, 200});
    const auto lrid = cb.listen_start(200);
    cl.settle();
    cb.listen_poll(lrid);

    const auto created0 = cl.fab.connections_created();
    std::uint64_t handshake_msgs = 0;
    for (int i = 0; i < 1000; ++i) {
        const auto msgs0 = cl.fab.stats(1, 2).messages;
        auto [ha, hb] = cl.dial(ca, cb, 200);
        handshake_msgs += cl.fab.stats(1, 2).messages - msgs0;
        ca.sys_close(ha);
        cb.sys_close(hb);
        cl.settle();
    }
    c.expect(handshake_msgs == 2000,
             "messages per connection != 2: total " +
                 std::to_string(handshake_msgs));
    c.expect(cl.fab.connections_created() == created0,
             "transport connections were created on the connect path");
    report(2, "handshake economy, 1000 connects", c.ok, c.detail.str());
}

void criterion3_flow_control_safety() {
    Check c;
    try {
        for (std::uint64_t seed = 1; seed <= 50 && c.ok; ++seed) {
            tsor::TsorConfig cfg;
            cfg.ring_capacity = 1024;
            Cluster cl(cfg);
            cl.reg.register_pod({10, 0}, 1);
            cl.reg.register_pod({20, 300}, 2);
            auto& ca = cl.a->register_client({10, 0});
            auto& cb = cl.b->register_client({20, 300});
            const auto lrid = cb.listen_start(300);
            cl.settle();
            cb.listen_poll(lrid);
            auto [ha, hb] = cl.dial(ca, cb, 300);

            std::mt19937_64 rng(seed);
            StreamChecksum tx, rx;
            for (int step = 0; step < 10000; ++step) {
                switch (rng() % 4) {
                    case 0: {
                        auto chunk = rand_bytes(rng, 1 + rng() % 700);
                        const auto n = ca.sys_write(
                            ha, std::span<const std::uint8_t>(chunk));
                        tx.feed(std::span<const std::uint8_t>(chunk.data(), n));
                        break;
                    }
                    case 1: {
                        auto r = cb.sys_read_nb(hb, 1 + rng() % 700);
                        if (r && !r->empty())
                            rx.feed(std::span<const std::uint8_t>(*r));
                        break;
                    }
                    case 2:
                        cl.a->service_step();
                        break;
                    default:
                        cl.b->service_step();
                        break;
                }
            }
            for (;;) {
                cl.settle();
                auto r = cb.sys_read_nb(hb, 4096);
                if (!r || r->empty()) break;
                rx.feed(std::span<const std::uint8_t>(*r));
            }
            c.expect(tx.value() == rx.value(),
                     "stream diverged at seed " + std::to_string(seed));
        }
    } catch (const tsor::FlowControlViolation&) {
        c.expect(false, "deposit-time assertion fired");
    }
    report(3, "flow-control safety, fuzzed slow reader 1e4 x 50 seeds", c.ok,
           c.detail.str());
}

void criterion4_coalescing_and_laziness() {
    Check c;
    {
        Cluster cl;
        cl.reg.register_pod({10, 0}, 1);
        cl.reg.register_pod({20, 400}, 2);
        auto& ca = cl.a->register_client({10, 0});
        auto& cb = cl.b->register_client({20, 400});
        const auto lrid = cb.listen_start(400);
        cl.settle();
        cb.listen_poll(lrid);
        auto [ha, hb] = cl.dial(ca, cb, 400);
        (void)hb;

        const auto reqs0 = ca.sq_write_reqs();
        const std::uint8_t byte[1] = {1};
        for (int i = 0; i < 50; ++i) ca.sys_write(ha, byte);  // service paused
        c.expect(ca.sq_write_reqs() - reqs0 == 1,
                 "50 paused writes produced " +
                     std::to_string(ca.sq_write_reqs() - reqs0) + " SQ entries");
    }
    {
        tsor::TsorConfig cfg;
        cfg.ring_capacity = 65536;
        Cluster cl(cfg);
        cl.reg.register_pod({10, 0}, 1);
        cl.reg.register_pod({20, 401}, 2);
        auto& ca = cl.a->register_client({10, 0});
        auto& cb = cl.b->register_client({20, 401});
        const auto lrid = cb.listen_start(401);
        cl.settle();
        cb.listen_poll(lrid);
        auto [ha, hb] = cl.dial(ca, cb, 401);

        std::mt19937_64 rng(4);
        const std::uint64_t total = 10ull << 20;
        std::uint64_t sent = 0, got = 0;
        while (got < total) {
            if (sent < total) {
                auto chunk = rand_bytes(
                    rng, std::min<std::uint64_t>(8192, total - sent));
                std::size_t off = 0;
                while (off < chunk.size()) {
                    const auto n = ca.sys_write(
                        ha, std::span<const std::uint8_t>(chunk).subspan(off));
                    off += n;
                    if (n == 0) break;
                }
                sent += off;
            }
            cl.settle();
            for (;;) {
                auto r = cb.sys_read_nb(hb, 65536);
                if (!r || r->empty()) break;
                got += r->size();
            }
        }
        const auto updates = cl.b->stats().space_updates_sent;
        const std::uint64_t bound = (total + 32767) / 32768 + 1;
        c.expect(updates <= bound, "SpaceUpdates " + std::to_string(updates) +
                                       " > bound " + std::to_string(bound));
    }
    report(4, "coalescing (1 SQ entry) + lazy SpaceUpdate bound", c.ok,
           c.detail.str());
}

void criterion5_allocator_oracle() {
    Check c;
    using namespace quarklet::pagealloc;
    // linear-scan boolean-array oracle, state-for-state
    {
        PageBlock b;
        std::vector<bool> free(kPagesPerBlock, true);
        free[0] = false;
        auto oracle_alloc = [&]() -> std::size_t {
            for (std::size_t i = 1; i < free.size(); ++i)
                if (free[i]) {
                    free[i] = false;
                    return i;
                }
            return 0;
        };
        auto coherent = [&] {
            std::size_t from_l2 = 0;
            for (std::size_t k = 0; k < kL2Words; ++k) {
                const std::uint64_t w = b.l2_word(k);
                from_l2 += static_cast<std::size_t>(std::popcount(w));
                if ((((b.l1() >> k) & 1u) != 0) != (w != 0)) return false;
            }
            return from_l2 == b.free_count();
        };
        std::mt19937_64 rng(77);
        std::vector<std::size_t> held;
        for (int op = 0; op < 100000 && c.ok; ++op) {
            const int what = static_cast<int>(rng() % 100);
            if (what < 55 && b.free_count() > 0) {
                const std::size_t got = b.alloc();
                const std::size_t want = oracle_alloc();
                c.expect(got == want, "alloc divergence at op " +
                                          std::to_string(op));
                held.push_back(got);
            } else if (what < 90 && !held.empty()) {
                const std::size_t k = rng() % held.size();
                std::swap(held[k], held.back());
                b.free(held.back());
                free[held.back()] = true;
                held.pop_back();
            } else {
                b.reclaim_free_pages();
            }
            // bitmap coherence after every op
            if (!coherent()) {
                c.expect(false, "bitmap incoherent at op " + std::to_string(op));
            }
            if (op % 5000 == 0) {
                const auto oracle_free = static_cast<std::size_t>(
                    std::count(free.begin(), free.end(), true));
                c.expect(b.free_count() == oracle_free, "free count divergence");
            }
        }
    }
    // reclaim-commutes on 50 seeded schedules
    for (std::uint64_t seed = 0; seed < 50 && c.ok; ++seed) {
        PageBlock plain, reclaimed;
        std::mt19937_64 rng(seed);
        std::vector<std::size_t> held;
        for (int op = 0; op < 2000; ++op) {
            if (rng() % 8 == 0) reclaimed.reclaim_free_pages();
            if (held.empty() || (rng() % 100 < 55 && plain.free_count() > 0)) {
                const std::size_t x = plain.alloc();
                const std::size_t y = reclaimed.alloc();
                if (x != y) {
                    c.expect(false, "reclaim changed an alloc decision, seed " +
                                        std::to_string(seed));
                    break;
                }
                held.push_back(x);
            } else {
                const std::size_t k = rng() % held.size();
                std::swap(held[k], held.back());
                plain.free(held.back());
                reclaimed.free(held.back());
                held.pop_back();
            }
        }
    }
    report(5, "allocator oracle equivalence + coherence + reclaim-commutes",
           c.ok, c.detail.str());
}

void criterion6_hibernation_round_trip() {
    Check c;
    const auto swap_path = scratch() / "criterion6.qswp";
    hibernate::Sandbox sb(swap_path);
    sb.warm_up();
    const std::size_t n = 1000;
    std::mt19937_64 data_rng(6);
    std::map<std::uint64_t, std::uint64_t> want;
    for (std::uint64_t vpn = 0; vpn < n; ++vpn) {
        sb.map_page(vpn);
        std::vector<std::byte> page(pagealloc::kPageSize);
        for (auto& x : page) x = static_cast<std::byte>(data_rng() & 0xFF);
        sb.write_page(vpn, page);
        want[vpn] = fnv1a64(page);
    }
    const auto snap = sb.hibernate();
    c.expect(snap.pages_swapped == n, "not all pages swapped");
    c.expect(sb.resident_bytes() == 0,
             "resident_bytes " + std::to_string(sb.resident_bytes()) +
                 " after hibernate");
    sb.wakeup();
    sb.begin_request();
    std::mt19937_64 pick(66);
    std::set<std::uint64_t> subset;
    while (subset.size() < n / 10) subset.insert(pick() % n);
    for (auto vpn : subset) {
        if (fnv1a64(sb.read_page(vpn)) != want[vpn]) {
            c.expect(false, "page " + std::to_string(vpn) + " corrupted");
            break;
        }
    }
    c.expect(sb.swapin_count() == subset.size(),
             "swapin_count " + std::to_string(sb.swapin_count()) + " != |subset| " +
                 std::to_string(subset.size()));
    sb.end_request();
    std::filesystem::remove(swap_path);
    std::filesystem::remove(swap_path.string() + ".idx");
    report(6, "hibernation round trip, 1000 pages, lazy 10% touch", c.ok,
           c.detail.str());
}

void criterion7_qcall_contracts() {
    Check c;
    using namespace quarklet::qcall;
    const std::size_t n_threads = 4, per_thread = 2500;
    const std::size_t total = n_threads * per_thread;

    std::mt19937_64 rng(7);
    struct Spec {
        JobKind kind;
        std::vector<std::byte> payload;
    };
    std::vector<Spec> jobs;
    for (std::size_t i = 0; i < total; ++i) {
        if (rng() % 4 == 0) {
            std::uint64_t ns = 1000;
            std::vector<std::byte> p(8);
            std::memcpy(p.data(), &ns, 8);
            jobs.push_back({JobKind::Sleep, std::move(p)});
        } else {
            std::vector<std::byte> p(1 + rng() % 32);
            for (auto& b : p) b = static_cast<std::byte>(rng() & 0xFF);
            jobs.push_back({JobKind::HostOp, std::move(p)});
        }
    }
    OpenPolicy policy{scratch(), {}};

    auto multiset = [](std::vector<std::uint64_t> v) {
        std::sort(v.begin(), v.end());
        return v;
    };
    std::vector<std::uint64_t> seq;
    for (const auto& j : jobs)
        seq.push_back(result_checksum(execute_reference(j.kind, j.payload, policy)));
    seq = multiset(std::move(seq));

    auto run_engine = [&](bool sync) {
        EngineOptions opts;
        opts.policy = policy;
        Engine engine(opts);
        std::mutex mu;
        std::vector<std::uint64_t> results;
        const auto t0 = Clock::now();
        for (std::size_t t = 0; t < n_threads; ++t) {
            engine.spawn([&, t](Engine::Ctx& ctx) {
                for (std::size_t i = 0; i < per_thread; ++i) {
                    const auto& j = jobs[t * per_thread + i];
                    auto r = sync ? ctx.sync_hypercall(j.kind, j.payload, 2.0)
                                  : ctx.qcall(j.kind, j.payload);
                    const auto sum = result_checksum(r);
                    std::lock_guard lock(mu);
                    results.push_back(sum);
                }
            });
        }
        engine.wait_all();
        const double ms =
            std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        return std::tuple{multiset(std::move(results)), ms,
                          engine.total_context_switches()};
    };

    int qcall_faster = 0;
    bool multisets_ok = true, sync_cs_ok = true;
    for (int round = 0; round < 10; ++round) {
        auto [qr, qms, qcs] = run_engine(false);
        auto [sr, sms, scs] = run_engine(true);
        if (qr != seq || sr != seq) multisets_ok = false;
        if (scs != 2 * total) sync_cs_ok = false;
        if (qms < sms) ++qcall_faster;
    }
    c.expect(multisets_ok, "result multisets diverged");
    c.expect(sync_cs_ok, "sync hypercall context switches != 2 per call");
    c.expect(qcall_faster >= 9,
             "qcall faster in only " + std::to_string(qcall_faster) + "/10 runs");
    report(7, "qcall contracts: multisets, 2N sync switches, speed ordering",
           c.ok, c.detail.str());
}

void criterion8_startup_ordering() {
    Check c;
    bench::BenchConfig cfg;
    cfg.scenario = "startup";
    cfg.seed = 8;
    cfg.pages = 500;
    cfg.scratch_dir = (scratch() / "startup").string();
    const auto rep = bench::run(cfg);
    for (const std::string app : {"floatop", "imgxform"}) {
        const auto* resume_lt = rep.find(app + "_hibernate_resume_lt_cold");
        const auto* idle_lt = rep.find(app + "_hibernate_idle_lt_warm_idle");
        c.expect(resume_lt && resume_lt->value == 1,
                 app + ": hibernate resume not faster than cold start");
        c.expect(idle_lt && idle_lt->value == 1,
                 app + ": hibernate idle memory not below warm idle");
    }
    std::filesystem::remove_all(cfg.scratch_dir);
    report(8, "startup ordering: resume < cold, hibernate idle < warm idle",
           c.ok, c.detail.str());
}

void criterion9_determinism() {
    Check c;
    for (const std::string scenario : {"connect", "echo", "stream", "qcall"}) {
        bench::BenchConfig cfg;
        cfg.scenario = scenario;
        cfg.seed = 99;
        cfg.iterations = 200;
        cfg.connects = 200;
        cfg.total_bytes = 2ull << 20;
        cfg.n_threads = 4;
        cfg.jobs_per_thread = 32;
        cfg.trap_cost_us = 0.0;
        cfg.scratch_dir = (scratch() / "det").string();
        const auto r1 = bench::run(cfg);
        const auto r2 = bench::run(cfg);
        for (const auto& m : r1.metrics) {
            if (m.kind != bench::Metric::Kind::Counter) continue;
            const auto* other = r2.find(m.name);
            if (!other || other->value != m.value) {
                c.expect(false, scenario + "/" + m.name + " differs across runs");
            }
        }
    }
    report(9, "determinism: identical counters for identical seeds", c.ok,
           c.detail.str());
}

}  // namespace

int main() {
    criterion1_stream_integrity();
    criterion2_handshake_economy();
    criterion3_flow_control_safety();
    criterion4_coalescing_and_laziness();
    criterion5_allocator_oracle();
    criterion6_hibernation_round_trip();
    criterion7_qcall_contracts();
    criterion8_startup_ordering();
    criterion9_determinism();
    if (g_failures == 0) {
        std::cout << "ALL ACCEPTANCE CRITERIA PASSED" << std::endl;
        return 0;
    }
    std::cout << g_failures << " criterion(s) FAILED" << std::endl;
    return 1;
}
