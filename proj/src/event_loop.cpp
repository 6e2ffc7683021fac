#include "commkit/event_loop.hpp"

#include <fcntl.h>
#include <poll.h>
#include <unistd.h>

#include <atomic>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <exception>
#include <map>
#include <mutex>
#include <thread>
#include <vector>

#include "commkit/errors.hpp"

namespace commkit {

struct EventLoop::Impl {
    std::mutex mutex;
    std::condition_variable cv;
    std::deque<std::function<void()>> queue;
    std::multimap<Clock::time_point, std::pair<uint64_t, std::function<void()>>>
        timers;
    uint64_t next_timer_id = 1;

    int wake_pipe[2] = {-1, -1};
    int watched_fd = -1;
    std::function<void()> fd_readable;
    std::function<void()> fd_writable;
    std::function<void()> fd_error;
    bool fd_want_write = false;

    std::thread thread;
    std::atomic<std::thread::id> loop_thread_id{};
    std::atomic<bool> stop_requested{false};
    std::atomic<bool> exited{false};
    std::atomic<bool> started{false};
    std::atomic<bool> busy{false};
    std::condition_variable idle_cv;

    ~Impl() {
        if (wake_pipe[0] >= 0) ::close(wake_pipe[0]);
        if (wake_pipe[1] >= 0) ::close(wake_pipe[1]);
    }

    void wake() {
        char byte = 1;
        ssize_t n = ::write(wake_pipe[1], &byte, 1);
        (void)n;  // pipe full means a wakeup is already queued
    }

    void drain_wakeups() {
        char buf[64];
        while (::read(wake_pipe[0], buf, sizeof buf) > 0) {
        }
    }

    void run_one(const std::function<void()>& fn) {
        busy.store(true);
        try {
            fn();
        } catch (const std::exception& e) {
            std::fprintf(stderr, "commkit: event loop callback threw: %s\n",
                         e.what());
        } catch (...) {
            std::fprintf(stderr,
                         "commkit: event loop callback threw non-exception\n");
        }
        busy.store(false);
        {
            // Pairs with the wait_idle predicate check under the mutex.
            std::lock_guard lock(mutex);
        }
        idle_cv.notify_all();
    }

    void loop() {
        loop_thread_id.store(std::this_thread::get_id());
        while (!stop_requested.load()) {
            // Compute poll timeout from the nearest timer.
            int timeout_ms = -1;
            {
                std::lock_guard lock(mutex);
                if (!queue.empty()) {
                    timeout_ms = 0;
                } else if (!timers.empty()) {
                    auto now = Clock::now();
                    auto deadline = timers.begin()->first;
                    auto delta = std::chrono::duration_cast<
                        std::chrono::milliseconds>(deadline - now);
                    timeout_ms = delta.count() < 0
                                     ? 0
                                     : static_cast<int>(delta.count() + 1);
                }
            }

            pollfd fds[2];
            fds[0] = {wake_pipe[0], POLLIN, 0};
            nfds_t nfds = 1;
            int fd_snapshot;
            bool want_write;
            {
                std::lock_guard lock(mutex);
                fd_snapshot = watched_fd;
                want_write = fd_want_write;
            }
            if (fd_snapshot >= 0) {
                fds[1] = {fd_snapshot,
                          static_cast<short>(POLLIN |
                                             (want_write ? POLLOUT : 0)),
                          0};
                nfds = 2;
            }
            ::poll(fds, nfds, timeout_ms);
            if (fds[0].revents & POLLIN) {
                drain_wakeups();
            }

            // Posted work.
            std::deque<std::function<void()>> batch;
            {
                std::lock_guard lock(mutex);
                batch.swap(queue);
            }
            for (auto& fn : batch) {
                if (stop_requested.load()) break;
                run_one(fn);
            }

            // Due timers.
            while (!stop_requested.load()) {
                std::function<void()> fn;
                {
                    std::lock_guard lock(mutex);
                    if (timers.empty() ||
                        timers.begin()->first > Clock::now()) {
                        break;
                    }
                    fn = std::move(timers.begin()->second.second);
                    timers.erase(timers.begin());
                }
                run_one(fn);
            }

            // Socket activity.
            if (nfds == 2 && !stop_requested.load()) {
                std::function<void()> readable, error;
                {
                    std::lock_guard lock(mutex);
                    if (watched_fd == fd_snapshot) {
                        if (fds[1].revents & (POLLERR | POLLNVAL)) {
                            error = fd_error;
                        } else if (fds[1].revents & (POLLIN | POLLHUP)) {
                            // Half-close shows up as POLLHUP; let the read
                            // callback observe EOF itself.
                            readable = fd_readable;
                        }
                    }
                }
                if (error) {
                    run_one(error);
                } else if (readable) {
                    run_one(readable);
                }
                if (fds[1].revents & POLLOUT) {
                    std::function<void()> writable;
                    {
                        std::lock_guard lock(mutex);
                        // The read callback may have rewired the watch.
                        if (watched_fd == fd_snapshot && fd_want_write) {
                            writable = fd_writable;
                        }
                    }
                    if (writable) {
                        run_one(writable);
                    }
                }
            }
        }
        exited.store(true);
        idle_cv.notify_all();
        std::unique_lock lock(mutex);
        cv.notify_all();
    }
};

EventLoop::EventLoop() : impl_(std::make_shared<Impl>()) {
    if (::pipe(impl_->wake_pipe) != 0) {
        throw Error("pipe() failed for event loop wakeup");
    }
    for (int fd : impl_->wake_pipe) {
        int flags = ::fcntl(fd, F_GETFL, 0);
        ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    }
}

EventLoop::~EventLoop() {
    request_stop();
    if (impl_->thread.joinable() && !join_for(std::chrono::seconds(5))) {
        // A callback is stuck; let the thread finish on its own. It only
        // touches Impl, which it keeps alive through a shared_ptr.
        impl_->thread.detach();
    }
}

void EventLoop::start() {
    if (impl_->started.exchange(true)) {
        return;
    }
    auto impl = impl_;
    impl_->thread = std::thread([impl] { impl->loop(); });
}

void EventLoop::request_stop() {
    impl_->stop_requested.store(true);
    impl_->wake();
}

bool EventLoop::join_for(std::chrono::milliseconds timeout) {
    if (!impl_->thread.joinable()) {
        return true;
    }
    {
        std::unique_lock lock(impl_->mutex);
        if (!impl_->cv.wait_for(lock, timeout,
                                [&] { return impl_->exited.load(); })) {
            return false;
        }
    }
    impl_->thread.join();
    return true;
}

void EventLoop::post(std::function<void()> fn) {
    {
        std::lock_guard lock(impl_->mutex);
        impl_->queue.push_back(std::move(fn));
    }
    impl_->wake();
}

void EventLoop::run_sync(const std::function<void()>& fn) {
    if (on_loop_thread()) {
        fn();
        return;
    }
    std::mutex m;
    std::condition_variable done_cv;
    bool done = false;
    std::exception_ptr error;
    post([&] {
        try {
            fn();
        } catch (...) {
            error = std::current_exception();
        }
        std::lock_guard lock(m);
        done = true;
        done_cv.notify_one();
    });
    std::unique_lock lock(m);
    done_cv.wait(lock, [&] { return done; });
    if (error) {
        std::rethrow_exception(error);
    }
}

bool EventLoop::on_loop_thread() const {
    return std::this_thread::get_id() == impl_->loop_thread_id.load();
}

bool EventLoop::running() const {
    return impl_->started.load() && !impl_->exited.load();
}

uint64_t EventLoop::add_timer(Clock::time_point deadline,
                              std::function<void()> fn) {
    uint64_t id;
    {
        std::lock_guard lock(impl_->mutex);
        id = impl_->next_timer_id++;
        impl_->timers.emplace(deadline, std::make_pair(id, std::move(fn)));
    }
    impl_->wake();
    return id;
}

uint64_t EventLoop::add_timer_after(std::chrono::milliseconds delay,
                                    std::function<void()> fn) {
    return add_timer(Clock::now() + delay, std::move(fn));
}

void EventLoop::cancel_timer(uint64_t id) {
    std::lock_guard lock(impl_->mutex);
    for (auto it = impl_->timers.begin(); it != impl_->timers.end(); ++it) {
        if (it->second.first == id) {
            impl_->timers.erase(it);
            return;
        }
    }
}

void EventLoop::watch_fd(int fd, std::function<void()> on_readable,
                         std::function<void()> on_error) {
    {
        std::lock_guard lock(impl_->mutex);
        impl_->watched_fd = fd;
        impl_->fd_readable = std::move(on_readable);
        impl_->fd_error = std::move(on_error);
    }
    impl_->wake();
}

void EventLoop::unwatch_fd() {
    std::lock_guard lock(impl_->mutex);
    impl_->watched_fd = -1;
    impl_->fd_readable = nullptr;
    impl_->fd_writable = nullptr;
    impl_->fd_error = nullptr;
    impl_->fd_want_write = false;
}

void EventLoop::set_fd_writable(std::function<void()> on_writable) {
    std::lock_guard lock(impl_->mutex);
    impl_->fd_writable = std::move(on_writable);
}

void EventLoop::set_fd_write_interest(bool want) {
    {
        std::lock_guard lock(impl_->mutex);
        impl_->fd_want_write = want;
    }
    impl_->wake();
}

bool EventLoop::busy() const { return impl_->busy.load(); }

bool EventLoop::wait_idle(std::chrono::milliseconds timeout) {
    std::unique_lock lock(impl_->mutex);
    return impl_->idle_cv.wait_for(lock, timeout, [&] {
        return !impl_->busy.load() || impl_->exited.load();
    });
}

}  // namespace commkit
