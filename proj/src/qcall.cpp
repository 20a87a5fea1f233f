#include "quarklet/qcall.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstring>

#include "quarklet/checksum.hpp"

namespace quarklet::qcall {

bool OpenPolicy::allows(const std::string& path) const {
    for (const auto& deny : deny_substrings) {
        if (path.find(deny) != std::string::npos) return false;
    }
    return true;
}

FileTable::~FileTable() { close_all(); }

std::uint64_t FileTable::insert(int fd, std::string path) {
    std::lock_guard lock(mu_);
    for (const auto& [id, entry] : files_) {
        if (entry.second == path) return id;
    }
    const std::uint64_t id = next_id_++;
    files_[id] = {fd, std::move(path)};
    return id;
}

int FileTable::fd(std::uint64_t id) const {
    std::lock_guard lock(mu_);
    auto it = files_.find(id);
    return it == files_.end() ? -1 : it->second.first;
}

void FileTable::close_all() {
    std::lock_guard lock(mu_);
    for (auto& [id, entry] : files_) {
        if (entry.first >= 0) ::close(entry.first);
        entry.first = -1;
    }
}

std::uint64_t result_checksum(std::span<const std::byte> bytes) {
    return fnv1a64(bytes);
}

namespace {

std::vector<std::byte> ok_result(std::uint64_t value) {
    std::vector<std::byte> r(9);
    r[0] = static_cast<std::byte>(ResultCode::Ok);
    std::memcpy(r.data() + 1, &value, 8);
    return r;
}

std::vector<std::byte> code_result(ResultCode code) {
    return {static_cast<std::byte>(code)};
}

}  // namespace

std::vector<std::byte> execute_reference(JobKind kind,
                                         std::span<const std::byte> payload,
                                         const OpenPolicy& policy) {
    switch (kind) {
        case JobKind::Sleep:
            return code_result(ResultCode::Ok);
        case JobKind::HostOp:
            return ok_result(fnv1a64(payload));
        case JobKind::OpenFile: {
            std::string path(reinterpret_cast<const char*>(payload.data()),
                             payload.size());
            if (!policy.allows(path)) return code_result(ResultCode::PermissionDenied);
            return ok_result(fnv1a64(payload));
        }
    }
    return code_result(ResultCode::BadJob);
}

Engine::Engine(EngineOptions opts) : opts_(std::move(opts)) {
    if (opts_.n_vcpus == 0) opts_.n_vcpus = 1;
    for (std::size_t i = 0; i < opts_.n_vcpus; ++i) {
        auto cpu = std::make_unique<VCpu>();
        cpu->id = i;
        vcpus_.push_back(std::move(cpu));
    }
    if (!opts_.manual_handler) {
        for (std::size_t i = 0; i < opts_.n_handlers; ++i) {
            handlers_.emplace_back([this] {
                for (;;) {
                    {
                        std::unique_lock lock(mu_);
                        queue_cv_.wait(lock,
                                       [&] { return shutdown_ || !queue_.empty(); });
                        if (shutdown_ && queue_.empty()) return;
                    }
                    handler_step();
                }
            });
        }
    }
}

Engine::~Engine() {
    wait_all();
    {
        std::lock_guard lock(mu_);
        shutdown_ = true;
    }
    queue_cv_.notify_all();
    for (auto& h : handlers_)
        if (h.joinable()) h.join();
    for (auto& t : threads_)
        if (t->os_thread.joinable()) t->os_thread.join();
}

void Engine::schedule_next_locked(VCpu& cpu) {
    if (cpu.run_queue.empty()) {
        cpu.current = nullptr;
        ++cpu.idle_transitions;
        return;
    }
    VThread* next = cpu.run_queue.front();
    cpu.run_queue.pop_front();
    next->state = VThreadState::Running;
    cpu.current = next;
    if (next->resume_counts) {
        ++cpu.context_switches;
        next->resume_counts = false;
    }
    next->cv.notify_one();
}

void Engine::wake_locked(VThread& t) {
    // Exactly-once wake: the submitter must still be blocked on this job.
    if (t.state != VThreadState::Blocked) return;
    t.state = VThreadState::Ready;
    t.cpu->run_queue.push_back(&t);
    if (t.cpu->current == nullptr) schedule_next_locked(*t.cpu);
}

VThread* Engine::spawn(std::function<void(Ctx&)> body) {
    std::lock_guard lock(mu_);
    if (shutdown_) throw ShutdownInProgress();
    auto t = std::make_unique<VThread>();
    t->id = next_thread_id_++;
    t->cpu = vcpus_[spawn_rr_++ % vcpus_.size()].get();
    t->state = VThreadState::Ready;
    VThread* tp = t.get();
    ++live_threads_;
    t->os_thread = std::thread([this, tp, body = std::move(body)] {
        {
            std::unique_lock lock(mu_);
            tp->cv.wait(lock, [&] { return tp->state == VThreadState::Running; });
        }
        Ctx ctx;
        ctx.engine_ = this;
        ctx.thread_ = tp;
        body(ctx);
        {
            std::lock_guard lock(mu_);
            tp->finished = true;
            --live_threads_;
            schedule_next_locked(*tp->cpu);
        }
        done_cv_.notify_all();
    });
    threads_.push_back(std::move(t));
    tp->cpu->run_queue.push_back(tp);
    if (tp->cpu->current == nullptr) schedule_next_locked(*tp->cpu);
    return tp;
}

void Engine::wait_all() {
    std::unique_lock lock(mu_);
    done_cv_.wait(lock, [&] { return live_threads_ == 0; });
}

void Engine::block_and_wait(std::unique_lock<std::mutex>& lock, VThread& t) {
    t.cv.wait(lock, [&] { return t.state == VThreadState::Running; });
}

std::vector<std::byte> Engine::Ctx::qcall(JobKind kind,
                                          std::vector<std::byte> payload) {
    Engine& e = *engine_;
    VThread& t = *thread_;
    Job job;
    job.kind = kind;
    job.payload = std::move(payload);
    job.submitter = &t;

    std::unique_lock lock(e.mu_);
    if (e.shutdown_) throw ShutdownInProgress();
    job.id = e.next_job_id_++;
    while (e.queue_.size() >= e.opts_.queue_capacity) {
        // QueueFull: yield and retry
        t.state = VThreadState::Ready;
        t.cpu->run_queue.push_back(&t);
        e.schedule_next_locked(*t.cpu);
        e.block_and_wait(lock, t);
        if (e.shutdown_) throw ShutdownInProgress();
    }
    e.queue_.push_back(&job);
    e.queue_cv_.notify_one();

    t.state = VThreadState::Blocked;
    t.pending_job = &job;
    t.resume_counts = true;     // the switch back in is counted at dispatch
    ++t.cpu->context_switches;  // switch out
    e.schedule_next_locked(*t.cpu);
    e.block_and_wait(lock, t);  // switch back counted at dispatch
    t.pending_job = nullptr;
    return std::move(job.result);
}

std::vector<std::byte> Engine::Ctx::sync_hypercall(JobKind kind,
                                                   std::vector<std::byte> payload,
                                                   double trap_cost_us) {
    Engine& e = *engine_;
    VThread& t = *thread_;
    const auto trap = std::chrono::duration<double, std::micro>(trap_cost_us);
    Job job;
    job.kind = kind;
    job.payload = std::move(payload);
    {
        std::lock_guard lock(e.mu_);
        job.id = e.next_job_id_++;
    }
    // The vCPU is held across the whole trap-execute-return sequence.
    if (trap_cost_us > 0) std::this_thread::sleep_for(trap);
    e.execute(job);
    if (trap_cost_us > 0) std::this_thread::sleep_for(trap);
    {
        std::lock_guard lock(e.mu_);
        t.cpu->context_switches += 2;
    }
    return std::move(job.result);
}

void Engine::Ctx::yield() {
    Engine& e = *engine_;
    VThread& t = *thread_;
    std::unique_lock lock(e.mu_);
    t.state = VThreadState::Ready;
    t.cpu->run_queue.push_back(&t);
    e.schedule_next_locked(*t.cpu);
    e.block_and_wait(lock, t);
}

std::size_t Engine::handler_step() {
    std::vector<Job*> batch;
    {
        std::lock_guard lock(mu_);
        while (batch.size() < opts_.batch_size && !queue_.empty()) {
            Job* j = queue_.front();
            queue_.pop_front();
            j->status.store(JobStatus::Executing, std::memory_order_release);
            exec_order_.push_back(j->id);
            batch.push_back(j);
        }
    }
    for (Job* j : batch) {
        execute(*j);
        j->status.store(JobStatus::Done, std::memory_order_release);
        std::lock_guard lock(mu_);
        if (j->submitter) wake_locked(*j->submitter);
    }
    return batch.size();
}

void Engine::execute(Job& job) {
    switch (job.kind) {
        case JobKind::Sleep: {
            std::uint64_t ns = 0;
            if (job.payload.size() >= 8) std::memcpy(&ns, job.payload.data(), 8);
            if (ns > 0) std::this_thread::sleep_for(std::chrono::nanoseconds(ns));
            job.result = code_result(ResultCode::Ok);
            break;
        }
        case JobKind::HostOp:
            job.result = ok_result(fnv1a64(std::span<const std::byte>(job.payload)));
            break;
        case JobKind::OpenFile: {
            std::string path(reinterpret_cast<const char*>(job.payload.data()),
                             job.payload.size());
            if (!opts_.policy.allows(path)) {
                job.result = code_result(ResultCode::PermissionDenied);
                break;
            }
            auto full = opts_.policy.scratch_dir / path;
            int fd = ::open(full.c_str(), O_CREAT | O_RDWR, 0644);
            if (fd < 0) {
                job.result = code_result(ResultCode::BadJob);
                break;
            }
            files_.insert(fd, path);
            job.result = ok_result(fnv1a64(std::span<const std::byte>(job.payload)));
            break;
        }
    }
}

std::uint64_t Engine::total_context_switches() const {
    std::lock_guard lock(mu_);
    std::uint64_t n = 0;
    for (const auto& c : vcpus_) n += c->context_switches;
    return n;
}

std::uint64_t Engine::total_idle_transitions() const {
    std::lock_guard lock(mu_);
    std::uint64_t n = 0;
    for (const auto& c : vcpus_) n += c->idle_transitions;
    return n;
}

std::size_t Engine::queue_depth() const {
    std::lock_guard lock(mu_);
    return queue_.size();
}

}  // namespace quarklet::qcall
