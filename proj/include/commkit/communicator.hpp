#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <variant>

#include "commkit/backend.hpp"
#include "commkit/broadcast_filter.hpp"
#include "commkit/envelope.hpp"
#include "commkit/future.hpp"
#include "commkit/value.hpp"

namespace commkit {

class Communicator;

/// Sentinel a handler returns to suppress its result: the caller's future
/// resolves to null right after delivery is confirmed.
extern const Value NO_RESPONSE;
bool is_no_response(const Value& value);

/// A task handler either returns a value directly or hands back a Future
/// it resolves later; acknowledgement and the reply to the submitter are
/// deferred until that future turns terminal.
using TaskResult = std::variant<Value, Future>;
using TaskHandler = std::function<TaskResult(Communicator&, const Value&)>;

using RpcHandler = std::function<Value(Communicator&, const Value&)>;

/// Invoked with (body, sender, subject, correlation_id).
using BroadcastHandler =
    std::function<void(const Value&, const std::optional<std::string>&,
                       const std::optional<std::string>&, const std::string&)>;

enum class SubscriberKind { Task, Rpc, Broadcast };

struct SubscriberToken {
    uint64_t id = 0;
    SubscriberKind kind = SubscriberKind::Task;
};

/// Messaging facade over one broker connection: task queues with
/// acknowledgement, RPC by recipient identifier, and filtered broadcasts.
/// Construct with connect(); a hidden communication thread runs all
/// subscriber callbacks, while the public API is callable from any thread.
///
/// Copyable handle; copies share the connection.
class Communicator {
public:
    Communicator() = default;

    /// One-call setup: parses the URI ("local://...", "amqp://...",
    /// "amqps://..."), starts the communication thread, and for wire
    /// backends connects and declares topology.
    /// Throws UriError or ConnectionError.
    static Communicator connect(const std::string& uri, ConnectOptions opts = {});

    /// Enqueues a task. With no_reply=false the future resolves with the
    /// consumer's result once the task is acknowledged; with no_reply=true
    /// it resolves to null on enqueue confirmation.
    Future task_send(Value payload, bool no_reply = false);
    SubscriberToken add_task_subscriber(TaskHandler handler);
    /// The handler receives nothing further; a task it is executing right
    /// now still completes and its acknowledgement still applies.
    void remove_task_subscriber(const SubscriberToken& token);

    /// Sends an RPC request to the process registered under recipient_id.
    /// The future fails UNROUTABLE when nobody serves that identifier,
    /// TIMEOUT when the optional per-call timeout expires first, or
    /// REMOTE_EXCEPTION when the handler raised.
    Future rpc_send(const std::string& recipient_id, Value payload,
                    std::optional<std::chrono::milliseconds> timeout = {});
    /// Claims an identifier; at most one subscriber per identifier may
    /// exist on a broker (DuplicateIdentifierError otherwise).
    void add_rpc_subscriber(const std::string& identifier, RpcHandler handler);
    void remove_rpc_subscriber(const std::string& identifier);

    /// Fire-and-forget fan-out to every matching subscriber. Returns true
    /// on publish confirmation; delivering to zero subscribers is still
    /// success.
    bool broadcast_send(Value body, std::optional<std::string> sender = {},
                        std::optional<std::string> subject = {},
                        std::optional<std::string> correlation_id = {});
    SubscriberToken add_broadcast_subscriber(BroadcastFilter filter, BroadcastHandler handler);
    void remove_broadcast_subscriber(const SubscriberToken& token);

    /// Graceful shutdown: stops accepting sends, waits up to `grace` for
    /// the handler currently running, returns everything still
    /// unacknowledged to the broker for requeue, and joins the
    /// communication thread. Idempotent; no callback ever runs after it
    /// returns.
    void close(std::chrono::milliseconds grace = std::chrono::milliseconds{5'000});

    /// Abrupt teardown, as if the process died: no grace, unacknowledged
    /// deliveries go straight back to the broker. For fault testing.
    void kill();

    bool is_open() const;
    const std::string& uri() const;
    const ConnectOptions& options() const;

    explicit operator bool() const { return impl_ != nullptr; }

    struct Impl;

private:
    explicit Communicator(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
    Impl& impl() const;

    std::shared_ptr<Impl> impl_;
};

/// Free-function spelling of Communicator::connect.
Communicator connect(const std::string& uri, ConnectOptions opts = {});

}  // namespace commkit
