#include "demo_process.hpp"

#include <utility>

namespace commkit::demo {

const char* to_string(ProcessState state) {
    switch (state) {
        case ProcessState::Created: return "created";
        case ProcessState::Running: return "running";
        case ProcessState::Paused: return "paused";
        case ProcessState::Killed: return "killed";
        case ProcessState::Finished: return "finished";
    }
    return "unknown";
}

std::string pid_for_serial(std::int64_t serial) {
    return "proc-" + std::to_string(serial);
}

DemoProcess::DemoProcess(std::string pid, std::vector<std::chrono::milliseconds> steps)
    : pid_(std::move(pid)), steps_(std::move(steps)) {}

ProcessState DemoProcess::state() const {
    std::lock_guard lock(mutex_);
    return state_;
}

Future DemoProcess::command(const std::string& action) {
    Future reply;
    std::lock_guard lock(mutex_);
    if (state_ == ProcessState::Killed || state_ == ProcessState::Finished) {
        reply.set_result(std::string("already ") + to_string(state_));
        return reply;
    }
    commands_.push_back(Command{action, reply});
    cv_.notify_all();
    return reply;
}

Value DemoProcess::status() const {
    std::lock_guard lock(mutex_);
    return Value{{"pid", pid_},
                 {"state", to_string(state_)},
                 {"completed_steps", next_step_},
                 {"total_steps", steps_.size()}};
}

ProcessState DemoProcess::run() {
    std::unique_lock lock(mutex_);
    state_ = ProcessState::Running;
    for (;;) {
        drain_locked();
        if (state_ == ProcessState::Killed) {
            break;
        }
        if (state_ == ProcessState::Paused) {
            cv_.wait(lock, [&] { return !commands_.empty(); });
            continue;
        }
        if (next_step_ == steps_.size()) {
            state_ = ProcessState::Finished;
            break;
        }
        // One step: sleep its duration, reacting to commands as they
        // arrive. A kill abandons the step; a pause lets it complete.
        auto deadline = std::chrono::steady_clock::now() + steps_[next_step_];
        while (state_ != ProcessState::Killed &&
               std::chrono::steady_clock::now() < deadline) {
            if (cv_.wait_until(lock, deadline, [&] { return !commands_.empty(); })) {
                drain_locked();
            }
        }
        if (state_ == ProcessState::Killed) {
            break;
        }
        ++next_step_;
    }
    drain_locked();  // stragglers resolve as "already <terminal state>"
    return state_;
}

Value DemoProcess::apply_locked(const std::string& action) {
    if (state_ == ProcessState::Killed || state_ == ProcessState::Finished) {
        return std::string("already ") + to_string(state_);
    }
    if (action == "pause") {
        if (state_ == ProcessState::Paused) {
            return "already paused";
        }
        state_ = ProcessState::Paused;
        return "paused";
    }
    if (action == "play") {
        if (state_ == ProcessState::Running) {
            return "already running";
        }
        state_ = ProcessState::Running;
        return "resumed";
    }
    if (action == "kill") {
        state_ = ProcessState::Killed;
        return "killed";
    }
    return "unknown action '" + action + "'";
}

void DemoProcess::drain_locked() {
    while (!commands_.empty()) {
        Command cmd = std::move(commands_.front());
        commands_.pop_front();
        cmd.reply.try_set_result(apply_locked(cmd.action));
    }
}

}  // namespace commkit::demo
