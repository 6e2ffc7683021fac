#include "demo_worker.hpp"

#include <exception>
#include <stdexcept>
#include <utility>

namespace commkit::demo {

namespace {

/// Turns one RPC request into a DemoProcess action. Runs on the
/// communication thread; the command future resolves as soon as the
/// process run loop wakes, so the await below is microseconds in
/// practice and the bound is pure defense.
Value control_request(DemoProcess& proc, const Value& request) {
    if (!request.is_string()) {
        throw std::invalid_argument(
            "control request must be \"pause\", \"play\", \"kill\" or \"status\"");
    }
    const std::string action = request.get<std::string>();
    if (action == "status") {
        return proc.status();
    }
    if (action != "pause" && action != "play" && action != "kill") {
        throw std::invalid_argument("unknown control action '" + action + "'");
    }
    return proc.command(action).await(std::chrono::milliseconds{10'000});
}

std::vector<std::chrono::milliseconds> parse_steps(const Value& payload) {
    if (!payload.is_object() || !payload.contains("serial") ||
        !payload["serial"].is_number_integer() || !payload.contains("steps") ||
        !payload["steps"].is_array()) {
        throw std::invalid_argument(
            R"(task payload must be {"serial": int, "steps": [milliseconds...]})");
    }
    std::vector<std::chrono::milliseconds> steps;
    for (const auto& step : payload["steps"]) {
        if (!step.is_number_integer() || step.get<std::int64_t>() < 0) {
            throw std::invalid_argument("every step must be a non-negative integer");
        }
        steps.emplace_back(step.get<std::int64_t>());
    }
    return steps;
}

}  // namespace

DemoWorker::DemoWorker(Communicator comm, int concurrency,
                       std::function<void(const std::string&)> log)
    : comm_(std::move(comm)), log_(std::move(log)) {
    if (concurrency < 1) {
        throw Error("concurrency must be at least 1");
    }
    try {
        pool_.reserve(static_cast<std::size_t>(concurrency));
        for (int i = 0; i < concurrency; ++i) {
            pool_.emplace_back([this] { pool_main(); });
        }
        for (const char* name : {"pause", "play", "kill"}) {
            std::string action{name};
            control_tokens_.push_back(comm_.add_broadcast_subscriber(
                BroadcastFilter{"*", action},
                [this, action](const Value&, const std::optional<std::string>&,
                               const std::optional<std::string>&, const std::string&) {
                    apply_to_all(action);
                }));
        }
        // Last, so tasks only start arriving once control is wired up.
        task_token_ = comm_.add_task_subscriber(
            [this](Communicator&, const Value& payload) { return on_task(payload); });
    } catch (...) {
        {
            std::lock_guard lock(mutex_);
            pool_stop_ = true;
        }
        pool_cv_.notify_all();
        for (auto& t : pool_) {
            t.join();
        }
        for (const auto& token : control_tokens_) {
            try {
                comm_.remove_broadcast_subscriber(token);
            } catch (const std::exception&) {
            }
        }
        throw;
    }
}

DemoWorker::~DemoWorker() {
    shutdown();
}

std::size_t DemoWorker::live_count() const {
    std::lock_guard lock(mutex_);
    return live_.size();
}

void DemoWorker::shutdown(std::chrono::milliseconds grace) {
    if (closed_.exchange(true)) {
        return;
    }
    try {
        comm_.remove_task_subscriber(task_token_);
    } catch (const std::exception&) {
    }
    // Drain while the communicator is still open: processes that finish
    // now announce and acknowledge exactly as in normal operation.
    auto deadline = std::chrono::steady_clock::now() + grace;
    while (std::chrono::steady_clock::now() < deadline && live_count() > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds{2});
    }
    // Close returns whatever outlived the drain to the broker. Its own
    // grace only needs to cover acknowledgements already in flight.
    comm_.close(std::chrono::milliseconds{250});
    std::vector<std::shared_ptr<DemoProcess>> leftovers;
    {
        std::lock_guard lock(mutex_);
        for (auto& [pid, proc] : live_) {
            leftovers.push_back(proc);
        }
    }
    for (auto& proc : leftovers) {
        proc->command("kill");
    }
    {
        std::lock_guard lock(mutex_);
        pool_stop_ = true;
    }
    pool_cv_.notify_all();
    for (auto& t : pool_) {
        t.join();
    }
}

TaskResult DemoWorker::on_task(const Value& payload) {
    auto steps = parse_steps(payload);
    const std::int64_t serial = payload["serial"].get<std::int64_t>();
    const std::string pid = pid_for_serial(serial);
    auto proc = std::make_shared<DemoProcess>(pid, std::move(steps));
    Future done;
    {
        std::lock_guard lock(mutex_);
        if (!live_.emplace(pid, proc).second) {
            throw std::runtime_error("process " + pid + " is already live on this worker");
        }
        jobs_.push_back([this, proc, done, serial] { job(proc, done, serial); });
    }
    pool_cv_.notify_one();
    return done;
}

void DemoWorker::job(std::shared_ptr<DemoProcess> proc, Future done, std::int64_t serial) {
    const std::string& pid = proc->pid();
    try {
        comm_.add_rpc_subscriber(pid, [proc](Communicator&, const Value& request) {
            return control_request(*proc, request);
        });
    } catch (const std::exception& e) {
        forget(pid);
        done.try_set_error(ErrorInfo{ErrorCategory::RemoteException,
                                     "cannot register control endpoint " + pid + ": " +
                                         e.what()});
        return;
    }
    ProcessState state = proc->run();
    try {
        comm_.remove_rpc_subscriber(pid);
    } catch (const std::exception&) {
    }
    Value summary{{"pid", pid}, {"serial", serial}, {"state", to_string(state)}};
    bool announced = false;
    try {
        announced = comm_.broadcast_send(
            summary, pid, std::string("state_changed.") + pid + "." + to_string(state));
    } catch (const std::exception&) {
        announced = false;
    }
    forget(pid);
    if (announced) {
        done.try_set_result(summary);
        say(pid + " " + to_string(state) + " (serial " + std::to_string(serial) + ")");
    } else if (comm_.is_open()) {
        // Confirm refused under extreme send backpressure: the work is
        // done, so complete the task even though the announcement sank.
        done.try_set_result(summary);
        say("termination broadcast for " + pid + " was dropped");
    } else {
        // Shutting down: leave the future pending so the delivery goes
        // back to the broker and another worker reruns the task.
        say(pid + " interrupted by shutdown; its task returns to the queue");
    }
}

void DemoWorker::apply_to_all(const std::string& action) {
    std::vector<std::shared_ptr<DemoProcess>> snapshot;
    {
        std::lock_guard lock(mutex_);
        for (auto& [pid, proc] : live_) {
            snapshot.push_back(proc);
        }
    }
    for (auto& proc : snapshot) {
        proc->command(action);  // fire-and-forget: broadcasts carry no reply
    }
}

void DemoWorker::forget(const std::string& pid) {
    std::lock_guard lock(mutex_);
    live_.erase(pid);
}

void DemoWorker::pool_main() {
    std::unique_lock lock(mutex_);
    for (;;) {
        pool_cv_.wait(lock, [&] { return pool_stop_ || !jobs_.empty(); });
        if (jobs_.empty()) {
            return;  // pool_stop_ and nothing left to drain
        }
        auto fn = std::move(jobs_.front());
        jobs_.pop_front();
        lock.unlock();
        fn();
        lock.lock();
    }
}

void DemoWorker::say(const std::string& line) {
    if (log_) {
        log_(line);
    }
}

}  // namespace commkit::demo
