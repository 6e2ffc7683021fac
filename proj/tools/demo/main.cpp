#include <signal.h>

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "commkit/communicator.hpp"
#include "demo_client.hpp"
#include "demo_process.hpp"
#include "demo_worker.hpp"

namespace {

using namespace commkit;
using namespace commkit::demo;

std::string resolve_uri(const std::string& flag) {
    if (!flag.empty()) {
        return flag;
    }
    if (const char* env = std::getenv("COMMKIT_URI"); env && *env) {
        return env;
    }
    throw UriError("no endpoint given: pass --uri or set COMMKIT_URI");
}

/// The payload argument is a file name when one exists, inline JSON
/// otherwise, and {"steps":[100]} when omitted.
Value load_payload(const std::string& arg) {
    if (arg.empty()) {
        return Value{{"steps", {100}}};
    }
    std::string text = arg;
    if (std::ifstream in(arg, std::ios::binary); in) {
        std::ostringstream buf;
        buf << in.rdbuf();
        text = buf.str();
    }
    try {
        return Value::parse(text);
    } catch (const std::exception&) {
        throw Error("payload is neither a readable file nor valid JSON: " + arg);
    }
}

std::optional<std::chrono::milliseconds> opt_timeout(std::int64_t ms) {
    if (ms <= 0) {
        return std::nullopt;
    }
    return std::chrono::milliseconds{ms};
}

ConnectOptions demo_options(const std::string& queue, int prefetch = 1) {
    ConnectOptions opts;
    if (!queue.empty()) {
        opts.task_queue = queue;
    }
    opts.prefetch = prefetch;
    return opts;
}

int run_worker(const std::string& uri, const std::string& queue, int concurrency) {
    // Own the termination signals before any thread spawns, so they are
    // delivered to sigwait below and nowhere else.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    Communicator comm = Communicator::connect(uri, demo_options(queue, concurrency));
    std::mutex out_mutex;
    auto log = [&out_mutex](const std::string& line) {
        std::lock_guard lock(out_mutex);
        std::cout << line << std::endl;
    };
    DemoWorker worker(comm, concurrency, log);
    log("worker ready: queue=" + effective_task_queue(comm.options()) +
        " concurrency=" + std::to_string(concurrency));

    int sig = 0;
    sigwait(&signals, &sig);
    log(std::string("caught ") + (sig == SIGINT ? "SIGINT" : "SIGTERM") +
        ", shutting down");
    worker.shutdown();
    return 0;
}

int run_submit(const std::string& uri, const std::string& queue,
               const std::string& payload_arg, int count, bool no_reply,
               std::int64_t timeout_ms) {
    Communicator comm = Communicator::connect(uri, demo_options(queue));
    auto submissions = submit_tasks(comm, load_payload(payload_arg), count, no_reply);
    int failures = 0;
    if (no_reply) {
        for (auto& sub : submissions) {
            sub.result.await(opt_timeout(timeout_ms));  // enqueue confirmations
        }
        std::cout << "sent " << submissions.size() << " tasks" << std::endl;
    } else {
        for (auto& sub : submissions) {
            try {
                Value result = sub.result.await(opt_timeout(timeout_ms));
                std::cout << result.dump() << std::endl;
            } catch (const OperationFailure& e) {
                std::cout << "serial " << sub.serial << " failed ["
                          << to_string(e.category()) << "]: " << e.info().message
                          << std::endl;
                ++failures;
            } catch (const TimeoutError&) {
                std::cout << "serial " << sub.serial << " failed [timeout]: no result within "
                          << timeout_ms << "ms" << std::endl;
                ++failures;
            }
        }
    }
    comm.close();
    return failures > 0 ? 1 : 0;
}

int run_ctl(const std::string& uri, const std::string& action, const std::string& pid,
            bool all, std::int64_t timeout_ms) {
    if (all == !pid.empty()) {
        throw Error("give exactly one target: a pid or --all");
    }
    if (all && action == "status") {
        throw Error("status needs a pid: broadcasts carry no reply");
    }
    Communicator comm = Communicator::connect(uri);
    int rc;
    if (all) {
        bool confirmed = control_all(comm, action);
        std::cout << (confirmed ? "broadcast sent" : "broadcast not confirmed")
                  << std::endl;
        rc = confirmed ? 0 : 1;
    } else {
        ControlOutcome outcome = control_process(comm, pid, action, opt_timeout(timeout_ms));
        std::cout << outcome.text << std::endl;
        rc = outcome.ok ? 0 : 1;
    }
    comm.close();
    return rc;
}

int run_parent_wait(const std::string& uri, const std::string& queue,
                    const std::string& payload_arg, std::int64_t timeout_ms) {
    Communicator comm = Communicator::connect(uri, demo_options(queue));
    WaitReport report = parent_wait(comm, load_payload(payload_arg),
                                    opt_timeout(timeout_ms));
    int rc = 0;
    switch (report.outcome) {
        case WaitOutcome::Finished:
            std::cout << "child " << report.pid << " finished" << std::endl;
            rc = 0;
            break;
        case WaitOutcome::Killed:
            std::cout << "child " << report.pid << " killed" << std::endl;
            rc = 2;
            break;
        case WaitOutcome::TimedOut:
            std::cout << "timed out waiting for " << report.pid << std::endl;
            rc = 3;
            break;
    }
    comm.close();
    return rc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Worker, submitter and controller demos for the commkit toolkit"};
    app.require_subcommand(1);

    std::string worker_uri;
    std::string worker_queue;
    int concurrency = 4;
    auto* worker = app.add_subcommand(
        "worker", "Consume tasks and run each as a controllable process");
    worker->add_option("--uri", worker_uri, "Broker endpoint (or set COMMKIT_URI)");
    worker->add_option("--queue", worker_queue, "Task queue name");
    worker->add_option("--concurrency", concurrency, "Simultaneous processes")
        ->check(CLI::PositiveNumber);

    std::string submit_uri;
    std::string submit_queue;
    std::string submit_payload;
    int count = 1;
    bool no_reply = false;
    std::int64_t submit_timeout = 0;
    auto* submit = app.add_subcommand("submit", "Enqueue tasks and print their results");
    submit->add_option("payload", submit_payload,
                       "Task payload: inline JSON or a file of it");
    submit->add_option("--uri", submit_uri, "Broker endpoint (or set COMMKIT_URI)");
    submit->add_option("--queue", submit_queue, "Task queue name");
    submit->add_option("--count", count, "How many tasks to send")
        ->check(CLI::PositiveNumber);
    submit->add_flag("--no-reply", no_reply, "Exit after enqueue confirmation");
    submit->add_option("--timeout", submit_timeout, "Per-result wait bound in ms");

    std::string ctl_uri;
    std::string ctl_action;
    std::string ctl_pid;
    bool ctl_all = false;
    std::int64_t ctl_timeout = 0;
    auto* ctl = app.add_subcommand("ctl", "Steer processes over RPC or broadcast");
    ctl->add_option("action", ctl_action, "pause, play, kill or status")
        ->required()
        ->check(CLI::IsMember({"pause", "play", "kill", "status"}));
    ctl->add_option("pid", ctl_pid, "Target process identifier");
    ctl->add_flag("--all", ctl_all, "Broadcast the action to every process");
    ctl->add_option("--uri", ctl_uri, "Broker endpoint (or set COMMKIT_URI)");
    ctl->add_option("--timeout", ctl_timeout, "Reply wait bound in ms");

    std::string wait_uri;
    std::string wait_queue;
    std::string wait_payload;
    std::int64_t wait_timeout = 0;
    auto* wait = app.add_subcommand(
        "parent-wait", "Submit a child task and sleep until it terminates");
    wait->add_option("payload", wait_payload,
                     "Child payload: inline JSON or a file of it");
    wait->add_option("--uri", wait_uri, "Broker endpoint (or set COMMKIT_URI)");
    wait->add_option("--queue", wait_queue, "Task queue name");
    wait->add_option("--timeout", wait_timeout, "Wait bound in ms");

    CLI11_PARSE(app, argc, argv);

    try {
        if (worker->parsed()) {
            return run_worker(resolve_uri(worker_uri), worker_queue, concurrency);
        }
        if (submit->parsed()) {
            return run_submit(resolve_uri(submit_uri), submit_queue, submit_payload,
                              count, no_reply, submit_timeout);
        }
        if (ctl->parsed()) {
            return run_ctl(resolve_uri(ctl_uri), ctl_action, ctl_pid, ctl_all,
                           ctl_timeout);
        }
        return run_parent_wait(resolve_uri(wait_uri), wait_queue, wait_payload,
                               wait_timeout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return wait->parsed() ? 4 : 2;
    }
}
