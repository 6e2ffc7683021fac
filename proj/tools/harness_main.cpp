#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "commkit/errors.hpp"
#include "commkit/harness.hpp"

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw commkit::Error("cannot open " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void print_report(const commkit::harness::AuditReport& report) {
    using commkit::harness::Outcome;
    std::cout << "acked_once=" << report.count(Outcome::AckedOnce)
              << " dead_lettered=" << report.count(Outcome::DeadLettered)
              << " pending=" << report.count(Outcome::Pending)
              << " lost=" << report.count(Outcome::Lost)
              << " duplicated=" << report.count(Outcome::Duplicated)
              << " redeliveries=" << report.redeliveries << '\n';
    for (const auto& v : report.violations) {
        std::cout << "violation: " << v << '\n';
    }
    std::cout << (report.passed() ? "PASS" : "FAIL") << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fault-injection scenario runner for the commkit toolkit"};
    app.require_subcommand(1);

    std::string scenario_path;
    std::string trace_out;
    bool use_threads = false;
    double time_scale = 1.0;
    auto* run = app.add_subcommand(
        "run", "Execute one scenario file and audit the delivery invariants");
    run->add_option("scenario", scenario_path, "Scenario JSON-lines file")
        ->required();
    run->add_option("--trace-out", trace_out,
                    "Write the full event trace (with the scenario embedded) "
                    "to this file");
    run->add_flag("--threads", use_threads,
                  "Run against real communicator threads on a wall clock "
                  "instead of the virtual clock");
    run->add_option("--time-scale", time_scale,
                    "Wall-clock scale factor for --threads runs");

    uint64_t seeds = 100;
    uint64_t start_seed = 0;
    size_t size = 30;
    auto* fuzz = app.add_subcommand(
        "fuzz", "Run many seeded random scenarios and audit each one");
    fuzz->add_option("--seeds", seeds, "How many seeds to run")
        ->default_val(100);
    fuzz->add_option("--start", start_seed, "First seed")->default_val(0);
    fuzz->add_option("--size", size, "Events per scenario")->default_val(30);

    std::string trace_path;
    auto* replay = app.add_subcommand(
        "replay", "Re-execute a recorded trace and verify determinism");
    replay->add_option("trace", trace_path, "Trace JSON-lines file")
        ->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            auto scenario =
                commkit::harness::scenario_from_jsonl(slurp(scenario_path));
            auto report =
                use_threads
                    ? commkit::harness::run_scenario_threads(scenario,
                                                             time_scale)
                    : commkit::harness::run_scenario(scenario);
            if (!trace_out.empty()) {
                std::ofstream out(trace_out, std::ios::binary);
                if (!out) {
                    throw commkit::Error("cannot write " + trace_out);
                }
                out << commkit::harness::trace_file_contents(scenario,
                                                             report);
            }
            print_report(report);
            return report.passed() ? 0 : 1;
        }
        if (fuzz->parsed()) {
            for (uint64_t i = 0; i < seeds; ++i) {
                uint64_t seed = start_seed + i;
                auto scenario = commkit::harness::random_scenario(seed, size);
                auto report = commkit::harness::run_scenario(scenario);
                if (!report.passed()) {
                    std::cout << "seed " << seed << " failed\n";
                    print_report(report);
                    std::cout << "scenario:\n"
                              << commkit::harness::scenario_to_jsonl(scenario);
                    return 1;
                }
                if ((i + 1) % 1000 == 0) {
                    std::cout << (i + 1) << "/" << seeds << " seeds ok\n";
                }
            }
            std::cout << seeds << " seeds, all passing\n";
            return 0;
        }
        auto report = commkit::harness::replay_trace(slurp(trace_path));
        std::cout << "replay matched the recorded trace\n";
        print_report(report);
        return report.passed() ? 0 : 1;
    } catch (const commkit::TraceMismatchError& e) {
        std::cerr << "trace mismatch: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
