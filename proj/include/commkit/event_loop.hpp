#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>

namespace commkit {

/// Background event thread: posted work, one-shot timers, and an optional
/// watched file descriptor, all executed on a single owned thread.
///
/// post() is thread-safe. run_sync() executes inline when already on the
/// loop thread, so callbacks may call back into the owning facade without
/// deadlocking.
class EventLoop {
public:
    using Clock = std::chrono::steady_clock;

    EventLoop();
    ~EventLoop();

    EventLoop(const EventLoop&) = delete;
    EventLoop& operator=(const EventLoop&) = delete;

    void start();

    /// Asks the loop to exit after the current iteration.
    void request_stop();

    /// Waits for the loop thread to exit; returns false on timeout
    /// (a callback is stuck). The thread is then left running and
    /// detached on destruction.
    bool join_for(std::chrono::milliseconds timeout);

    void post(std::function<void()> fn);

    /// Runs fn on the loop thread and waits for it; inline when called
    /// from the loop thread itself. Exceptions propagate to the caller.
    void run_sync(const std::function<void()>& fn);

    bool on_loop_thread() const;
    bool running() const;

    /// One-shot timer. Returns an id usable with cancel_timer.
    uint64_t add_timer(Clock::time_point deadline, std::function<void()> fn);
    uint64_t add_timer_after(std::chrono::milliseconds delay,
                             std::function<void()> fn);
    void cancel_timer(uint64_t id);

    /// Watch fd for readability or error; callbacks run on the loop thread.
    void watch_fd(int fd, std::function<void()> on_readable,
                  std::function<void()> on_error);
    void unwatch_fd();

    /// Optional writability callback for the watched fd. Write interest is
    /// off by default; enable it while a write buffer is non-empty (or a
    /// non-blocking connect is pending) and disable it once drained.
    void set_fd_writable(std::function<void()> on_writable);
    void set_fd_write_interest(bool want);

    /// True while the loop thread is inside a posted/timer/fd callback.
    bool busy() const;

    /// Waits until the loop is not executing a callback, up to the
    /// timeout. Returns true when idle was reached.
    bool wait_idle(std::chrono::milliseconds timeout);

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
};

}  // namespace commkit
