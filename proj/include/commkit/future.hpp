#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <optional>

#include "commkit/errors.hpp"
#include "commkit/value.hpp"

namespace commkit {

enum class FutureState {
    Pending,
    Resolved,
    Failed,
    Cancelled,
};

const char* to_string(FutureState state);

/// Single-assignment deferred result, resolvable from any thread and
/// awaitable from any other. Terminal states are final: exactly one
/// assignment ever succeeds.
class Future {
public:
    Future();

    FutureState state() const;
    bool done() const;

    /// Transition Pending -> Resolved. Throws AlreadyResolvedError if the
    /// future is already terminal; the stored outcome is left unchanged.
    void set_result(Value value);

    /// Transition Pending -> Failed. Same single-assignment rules.
    void set_error(ErrorInfo info);

    /// Non-throwing variants; return false when the future was already
    /// terminal. Used on reply paths where late duplicates are ignored.
    bool try_set_result(Value value);
    bool try_set_error(ErrorInfo info);

    /// Returns true iff this call performed the Pending -> Cancelled
    /// transition.
    bool cancel();

    /// Blocks until terminal or until the timeout elapses.
    /// Returns the value when Resolved; throws OperationFailure when
    /// Failed, CancelledError when Cancelled, TimeoutError on timeout.
    Value await(std::optional<std::chrono::milliseconds> timeout = {}) const;

    /// Failure record; only meaningful in the Failed state.
    ErrorInfo error() const;

    /// Runs fn exactly once when the future turns terminal, on the thread
    /// that performs the transition (immediately if already terminal).
    void on_done(std::function<void(Future&)> fn);

    bool operator==(const Future& other) const { return state_ == other.state_; }

private:
    struct Shared;
    bool transition(FutureState to, Value value, ErrorInfo info);
    std::shared_ptr<Shared> state_;
};

}  // namespace commkit
