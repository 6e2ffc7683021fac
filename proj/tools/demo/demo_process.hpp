#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <mutex>
#include <string>
#include <vector>

#include "commkit/future.hpp"
#include "commkit/value.hpp"

namespace commkit::demo {

enum class ProcessState { Created, Running, Paused, Killed, Finished };

/// Lowercase name, as used in broadcast subjects and status replies.
const char* to_string(ProcessState state);

/// Canonical process identifier for a task serial. Submitters and waiting
/// parents derive it without asking the worker, so a parent can subscribe
/// to the child's termination subject before the child even exists.
std::string pid_for_serial(std::int64_t serial);

/// Simulated unit of work: a list of timed steps driven to completion by
/// run(), steerable from other threads through an ordered command queue.
/// Pause takes effect at step boundaries only (the step in progress still
/// completes); kill also interrupts the step in progress.
class DemoProcess {
public:
    DemoProcess(std::string pid, std::vector<std::chrono::milliseconds> steps);

    const std::string& pid() const { return pid_; }
    ProcessState state() const;

    /// Queues "pause", "play" or "kill". The future resolves with the
    /// reply string once run() has applied the command, in queue order;
    /// on a process that already terminated it resolves immediately with
    /// "already <state>".
    Future command(const std::string& action);

    /// Progress report, answered immediately without queueing.
    Value status() const;

    /// Drives the process to a terminal state and returns it. Transitions
    /// Created -> Running on entry; call exactly once.
    ProcessState run();

private:
    struct Command {
        std::string action;
        Future reply;
    };

    // Both helpers require mutex_ to be held.
    Value apply_locked(const std::string& action);
    void drain_locked();

    const std::string pid_;
    const std::vector<std::chrono::milliseconds> steps_;
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    ProcessState state_ = ProcessState::Created;
    std::size_t next_step_ = 0;
    std::deque<Command> commands_;
};

}  // namespace commkit::demo
