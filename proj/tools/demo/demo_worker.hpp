#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "commkit/communicator.hpp"
#include "demo_process.hpp"

namespace commkit::demo {

/// Worker half of the demo: consumes {"serial", "steps"} tasks from the
/// shared queue, runs each as a DemoProcess on an execution pool, answers
/// pause/play/kill/status RPCs addressed to the process identifier,
/// applies "pause"/"play"/"kill" broadcasts to every live process, and
/// announces each termination with a "state_changed.<pid>.<state>"
/// broadcast carrying the serial.
class DemoWorker {
public:
    /// The communicator should be connected with prefetch equal to
    /// `concurrency`, so the broker never assigns more work than the pool
    /// can run at once. `log` (optional) receives one line per event and
    /// may be called from any thread.
    DemoWorker(Communicator comm, int concurrency,
               std::function<void(const std::string&)> log = {});
    ~DemoWorker();

    DemoWorker(const DemoWorker&) = delete;
    DemoWorker& operator=(const DemoWorker&) = delete;

    /// Processes currently created or running on this worker.
    std::size_t live_count() const;

    /// Graceful stop: takes no new tasks, waits up to `grace` for live
    /// processes to finish (terminations still announce and acknowledge
    /// normally), then closes the communicator — anything still
    /// unfinished returns to the broker for another worker — and joins
    /// the pool. Idempotent; the destructor calls it too.
    void shutdown(std::chrono::milliseconds grace = std::chrono::milliseconds{5'000});

private:
    TaskResult on_task(const Value& payload);
    void job(std::shared_ptr<DemoProcess> proc, Future done, std::int64_t serial);
    void apply_to_all(const std::string& action);
    void forget(const std::string& pid);
    void pool_main();
    void say(const std::string& line);

    Communicator comm_;
    std::function<void(const std::string&)> log_;
    SubscriberToken task_token_{};
    std::vector<SubscriberToken> control_tokens_;

    mutable std::mutex mutex_;  // guards live_, jobs_ and pool_stop_
    std::condition_variable pool_cv_;
    std::map<std::string, std::shared_ptr<DemoProcess>> live_;
    std::deque<std::function<void()>> jobs_;
    bool pool_stop_ = false;
    std::vector<std::thread> pool_;
    std::atomic<bool> closed_{false};
};

}  // namespace commkit::demo
