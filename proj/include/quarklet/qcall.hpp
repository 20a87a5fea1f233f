#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace quarklet::qcall {

enum class JobKind : std::uint8_t { OpenFile = 0, Sleep = 1, HostOp = 2 };

enum class JobStatus : std::uint8_t { Queued, Executing, Done };

// First result byte is the status code; payload follows.
enum class ResultCode : std::uint8_t { Ok = 0, PermissionDenied = 1, BadJob = 2 };

struct Job {
    std::uint64_t id = 0;
    JobKind kind = JobKind::HostOp;
    std::vector<std::byte> payload;
    std::atomic<JobStatus> status{JobStatus::Queued};
    std::vector<std::byte> result;
    struct VThread* submitter = nullptr;
};

enum class VThreadState : std::uint8_t { Running, Ready, Blocked };

struct VCpu;

struct VThread {
    std::uint64_t id = 0;
    VThreadState state = VThreadState::Ready;
    Job* pending_job = nullptr;
    VCpu* cpu = nullptr;
    bool resume_counts = false;  // next dispatch is a switch-back from a qcall
    bool finished = false;
    std::condition_variable cv;
    std::thread os_thread;
};

struct VCpu {
    std::uint64_t id = 0;
    std::deque<VThread*> run_queue;
    VThread* current = nullptr;
    std::uint64_t context_switches = 0;
    std::uint64_t idle_transitions = 0;
};

class ShutdownInProgress : public std::runtime_error {
public:
    ShutdownInProgress() : std::runtime_error("engine shutting down") {}
};

// Control-path gate for OpenFile jobs: paths must live under the scratch
// directory and must not match any denied substring.
struct OpenPolicy {
    std::filesystem::path scratch_dir;
    std::vector<std::string> deny_substrings;

    bool allows(const std::string& path) const;
};

// Files opened via the control path; the data path (IoRing) may only touch
// ids registered here.
class FileTable {
public:
    ~FileTable();
    std::uint64_t insert(int fd, std::string path);
    int fd(std::uint64_t id) const;  // -1 when unknown
    void close_all();

private:
    mutable std::mutex mu_;
    std::map<std::uint64_t, std::pair<int, std::string>> files_;
    std::uint64_t next_id_ = 1;
};

struct EngineOptions {
    std::size_t n_vcpus = 1;
    std::size_t queue_capacity = 4096;
    std::size_t batch_size = 32;
    std::size_t n_handlers = 1;
    bool manual_handler = false;  // no handler threads; tests drive handler_step
    OpenPolicy policy;
};

// Virtual threads submit jobs and block; the engine swaps them off their
// vCPU so the vCPU runs other ready threads. Handler threads dequeue and
// execute jobs and wake submitters by direct thread-state transition; there
// is no completion queue to poll.
class Engine {
public:
    explicit Engine(EngineOptions opts = {});
    ~Engine();

    class Ctx;

    VThread* spawn(std::function<void(Ctx&)> body);
    void wait_all();

    std::size_t handler_step();

    const VCpu& vcpu(std::size_t i) const { return *vcpus_[i]; }
    std::uint64_t total_context_switches() const;
    std::uint64_t total_idle_transitions() const;
    std::size_t queue_depth() const;
    const std::vector<std::uint64_t>& execution_order() const {
        return exec_order_;
    }

    FileTable& files() { return files_; }

    class Ctx {
    public:
        // Submits the job, blocks this virtual thread, schedules the next
        // ready thread; returns once a handler completed the job.
        std::vector<std::byte> qcall(JobKind kind, std::vector<std::byte> payload);

        // Baseline: holds the vCPU for trap_cost_us, runs the job inline,
        // pays trap_cost_us again on return; records 2 context switches.
        std::vector<std::byte> sync_hypercall(JobKind kind,
                                              std::vector<std::byte> payload,
                                              double trap_cost_us = 2.0);

        void yield();

        VThread& thread() { return *thread_; }
        Engine& engine() { return *engine_; }

    private:
        friend class Engine;
        Engine* engine_;
        VThread* thread_;
    };

private:
    friend class Ctx;

    void execute(Job& job);
    void schedule_next_locked(VCpu& cpu);
    void wake_locked(VThread& t);
    void block_and_wait(std::unique_lock<std::mutex>& lock, VThread& t);
    bool try_enqueue_locked(Job* job);

    EngineOptions opts_;
    mutable std::mutex mu_;  // scheduler + queue lock
    std::condition_variable queue_cv_;
    std::deque<Job*> queue_;
    bool shutdown_ = false;

    std::vector<std::unique_ptr<VCpu>> vcpus_;
    std::vector<std::unique_ptr<VThread>> threads_;
    std::vector<std::thread> handlers_;
    std::condition_variable done_cv_;
    std::size_t live_threads_ = 0;
    std::uint64_t next_thread_id_ = 1;
    std::uint64_t next_job_id_ = 1;
    std::size_t spawn_rr_ = 0;
    std::vector<std::uint64_t> exec_order_;

    FileTable files_;
};

std::uint64_t result_checksum(std::span<const std::byte> bytes);

// Reference executor for result-equivalence oracles: runs one job the same
// way a handler would, without any engine.
std::vector<std::byte> execute_reference(JobKind kind,
                                         std::span<const std::byte> payload,
                                         const OpenPolicy& policy);

}  // namespace quarklet::qcall
