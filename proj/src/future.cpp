#include "commkit/future.hpp"

#include <condition_variable>
#include <mutex>
#include <vector>

namespace commkit {

const char* to_string(FutureState state) {
    switch (state) {
        case FutureState::Pending: return "pending";
        case FutureState::Resolved: return "resolved";
        case FutureState::Failed: return "failed";
        case FutureState::Cancelled: return "cancelled";
    }
    return "unknown";
}

struct Future::Shared {
    mutable std::mutex mutex;
    mutable std::condition_variable cv;
    FutureState state = FutureState::Pending;
    Value value;
    ErrorInfo error{ErrorCategory::Cancelled, ""};
    std::vector<std::function<void(Future&)>> callbacks;
};

Future::Future() : state_(std::make_shared<Shared>()) {}

FutureState Future::state() const {
    std::lock_guard lock(state_->mutex);
    return state_->state;
}

bool Future::done() const { return state() != FutureState::Pending; }

// Transition under the lock, then notify and run callbacks outside it.
// Returns false when the future was already terminal.
bool Future::transition(FutureState to, Value value, ErrorInfo info) {
    std::vector<std::function<void(Future&)>> callbacks;
    {
        std::lock_guard lock(state_->mutex);
        if (state_->state != FutureState::Pending) {
            return false;
        }
        state_->state = to;
        state_->value = std::move(value);
        state_->error = std::move(info);
        callbacks.swap(state_->callbacks);
    }
    state_->cv.notify_all();
    for (auto& fn : callbacks) {
        fn(*this);
    }
    return true;
}

void Future::set_result(Value value) {
    if (!try_set_result(std::move(value))) {
        throw AlreadyResolvedError("future already " +
                                   std::string(to_string(state())));
    }
}

void Future::set_error(ErrorInfo info) {
    if (!try_set_error(std::move(info))) {
        throw AlreadyResolvedError("future already " +
                                   std::string(to_string(state())));
    }
}

bool Future::try_set_result(Value value) {
    return transition(FutureState::Resolved, std::move(value),
                      ErrorInfo{ErrorCategory::Cancelled, ""});
}

bool Future::try_set_error(ErrorInfo info) {
    return transition(FutureState::Failed, Value(), std::move(info));
}

bool Future::cancel() {
    return transition(FutureState::Cancelled, Value(),
                      ErrorInfo{ErrorCategory::Cancelled, "future was cancelled"});
}

Value Future::await(std::optional<std::chrono::milliseconds> timeout) const {
    std::unique_lock lock(state_->mutex);
    auto terminal = [this] { return state_->state != FutureState::Pending; };
    if (timeout) {
        if (!state_->cv.wait_for(lock, *timeout, terminal)) {
            throw TimeoutError("future not resolved within timeout");
        }
    } else {
        state_->cv.wait(lock, terminal);
    }
    switch (state_->state) {
        case FutureState::Resolved:
            return state_->value;
        case FutureState::Failed:
            throw OperationFailure(state_->error);
        case FutureState::Cancelled:
            throw CancelledError("future was cancelled");
        case FutureState::Pending:
            break;
    }
    throw Error("unreachable future state");
}

ErrorInfo Future::error() const {
    std::lock_guard lock(state_->mutex);
    return state_->error;
}

void Future::on_done(std::function<void(Future&)> fn) {
    {
        std::lock_guard lock(state_->mutex);
        if (state_->state == FutureState::Pending) {
            state_->callbacks.push_back(std::move(fn));
            return;
        }
    }
    fn(*this);
}

}  // namespace commkit
