#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "commkit/communicator.hpp"
#include "demo_process.hpp"

namespace commkit::demo {

/// One submitted task: the serial actually assigned and its result.
struct Submission {
    std::int64_t serial;
    Future result;
};

/// Sends `count` copies of the payload template, assigning consecutive
/// serials starting at the template's "serial" (a random six-digit base
/// when absent). The worker replies {"pid", "serial", "state"} per task.
std::vector<Submission> submit_tasks(Communicator& comm, Value payload, int count,
                                     bool no_reply);

/// RPC control of one process by identifier.
struct ControlOutcome {
    bool ok;           // the process answered
    std::string text;  // its reply, or "UNROUTABLE ..." / "TIMEOUT ..."
};
ControlOutcome control_process(Communicator& comm, const std::string& pid,
                               const std::string& action,
                               std::optional<std::chrono::milliseconds> timeout = {});

/// Broadcast control of every live process on every worker; true once the
/// broker confirmed the fan-out.
bool control_all(Communicator& comm, const std::string& action);

enum class WaitOutcome { Finished, Killed, TimedOut };

struct WaitReport {
    WaitOutcome outcome;
    std::string pid;  // the child's identifier, derived from its serial
    Value broadcast;  // termination broadcast body; null on timeout
};

/// Subscribes to the child's "state_changed.<pid>.*" subjects, then — and
/// only then — submits the child task, then blocks until its termination
/// broadcast arrives. Subscribing first means the wakeup cannot be lost.
WaitReport parent_wait(Communicator& comm, Value child_payload,
                       std::optional<std::chrono::milliseconds> timeout = {});

}  // namespace commkit::demo
