#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "quarklet/bench.hpp"

int main(int argc, char** argv) {
    CLI::App app{"quarklet: secure-container runtime benchmark harness"};
    app.require_subcommand(1);

    auto* bench = app.add_subcommand("bench", "run a benchmark scenario");
    std::string scenario;
    std::string config_path;
    std::string out_path;
    std::string format = "csv";
    std::string backend;
    std::uint64_t seed = 0;
    bool have_seed = false;

    bench->add_option("scenario", scenario,
                      "one of: echo, stream, connect, qcall, startup")
        ->required();
    bench->add_option("--config", config_path, "config file (key=value or JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    auto* seed_opt = bench->add_option("--seed", seed, "override the config seed");
    bench->add_option("--backend", backend, "inproc | loopback")
        ->check(CLI::IsMember({"inproc", "loopback"}));
    bench->add_option("--out", out_path, "report output path")->required();
    bench->add_option("--format", format, "csv | markdown")
        ->check(CLI::IsMember({"csv", "markdown", "md"}));

    CLI11_PARSE(app, argc, argv);
    have_seed = seed_opt->count() > 0;

    try {
        auto cfg = quarklet::bench::BenchConfig::load(config_path);
        cfg.scenario = scenario;
        if (have_seed) cfg.seed = seed;
        if (!backend.empty()) cfg.backend = backend;

        const auto report = quarklet::bench::run(cfg);
        report.write(format, out_path);

        std::cout << "scenario=" << report.scenario << " seed=" << report.seed
                  << " backend=" << report.backend << " metrics="
                  << report.metrics.size() << " -> " << out_path << "\n";
        return EXIT_SUCCESS;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return EXIT_FAILURE;
    }
}
