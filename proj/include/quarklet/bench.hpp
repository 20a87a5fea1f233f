#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace quarklet::bench {

class InvalidConfig : public std::runtime_error {
public:
    explicit InvalidConfig(const std::string& what) : std::runtime_error(what) {}
};

class ScenarioFailure : public std::runtime_error {
public:
    explicit ScenarioFailure(const std::string& what) : std::runtime_error(what) {}
};

struct BenchConfig {
    std::string scenario;
    std::string backend = "inproc";  // inproc | loopback
    std::uint64_t seed = 1;

    std::size_t node_count = 2;
    std::uint32_t ring_capacity = 65536;
    std::size_t sq_capacity = 256;
    std::size_t cq_capacity = 256;
    std::uint64_t latency_fixed_ns = 0;
    std::uint64_t latency_jitter_ns = 0;

    std::size_t message_size = 64;
    std::size_t iterations = 1000;
    std::uint64_t total_bytes = 10ull << 20;
    std::size_t connects = 1000;

    std::size_t n_threads = 8;
    std::size_t jobs_per_thread = 128;
    double trap_cost_us = 2.0;

    std::size_t pages = 1000;
    std::string mode = "all";  // startup: cold | warm | hibernate | all
    std::string scratch_dir;

    // Flat key=value lines or a JSON object; unknown keys are rejected.
    static BenchConfig load(const std::filesystem::path& path);
    void apply(const std::string& key, const std::string& value);
};

struct Metric {
    std::string name;
    double value = 0;
    // counter: seed-deterministic; timing: wall-clock; reference: a figure
    // from the hardware system this models, printed for context, not a target.
    enum class Kind { Counter, Timing, Reference } kind = Kind::Counter;
};

struct BenchReport {
    std::string scenario;
    std::uint64_t seed = 0;
    std::string backend;
    std::vector<Metric> metrics;

    void add_counter(const std::string& name, double v);
    void add_timing(const std::string& name, double v);
    void add_reference(const std::string& name, double v);
    const Metric* find(const std::string& name) const;

    std::string to_csv() const;
    std::string to_markdown() const;
    void write(const std::string& format, const std::filesystem::path& path) const;
};

BenchReport run(const BenchConfig& config);

BenchReport run_connect(const BenchConfig& config);
BenchReport run_echo(const BenchConfig& config);
BenchReport run_stream(const BenchConfig& config);
BenchReport run_qcall(const BenchConfig& config);
BenchReport run_startup(const BenchConfig& config);

}  // namespace quarklet::bench
