#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "commkit/broadcast_filter.hpp"
#include "commkit/envelope.hpp"
#include "commkit/errors.hpp"
#include "commkit/task_queue.hpp"

namespace commkit {

/// Connection parameters shared by both transports.
struct ConnectOptions {
    /// Liveness probe interval for wire connections; also the unit the
    /// optional watchdog uses to flag handlers that hog the
    /// communication thread.
    std::chrono::milliseconds heartbeat{60'000};

    /// Prefix for every queue and exchange name this communicator
    /// declares (RPC queues, reply queues, the broadcast exchange).
    std::string namespace_prefix = "commkit";

    /// Full task-queue name. Empty selects "<namespace_prefix>.tasks",
    /// i.e. "commkit.tasks" with default options.
    std::string task_queue;

    /// Max unacknowledged deliveries per task subscriber.
    int prefetch = 1;

    /// Debug aid: warn on stderr when a handler occupies the
    /// communication thread for longer than one heartbeat interval.
    bool watchdog = false;

    std::chrono::milliseconds connect_timeout{10'000};

    /// Sends buffered while a wire connection is down before senders
    /// start failing with CONNECTION_LOST.
    std::size_t send_buffer_limit = 10'000;
};

std::string effective_task_queue(const ConnectOptions& opts);

/// How a transport hands inbound traffic to the communicator. Callbacks
/// may fire on any thread; the communicator posts them onto its
/// communication thread. They must not call back into the backend
/// synchronously.
struct BackendCallbacks {
    std::function<void(Assignment)> on_task;
    /// RPC request plus the requester's reply address.
    std::function<void(Envelope, std::string)> on_rpc;
    /// Matched broadcast, tagged with the binding it matched.
    std::function<void(uint64_t, Envelope)> on_broadcast;
    std::function<void(Envelope)> on_reply;
    /// The connection died and cannot deliver buffered traffic.
    std::function<void(ErrorInfo)> on_connection_lost;
};

using PublishConfirm = std::function<void(bool ok, const ErrorInfo& info)>;

/// Transport abstraction under the Communicator facade. The facade owns
/// all messaging semantics (futures, correlation ids, ack-on-return);
/// implementations move envelopes and enforce broker-side rules.
class Backend {
public:
    virtual ~Backend() = default;

    /// Establishes the transport (wire backends connect and declare
    /// topology here). Blocking; throws ConnectionError on failure.
    virtual void open() = 0;

    /// Releases every transport resource still held. Idempotent.
    virtual void close() = 0;

    // -- tasks ---------------------------------------------------------

    virtual void publish_task(const Envelope& env, PublishConfirm confirm) = 0;
    virtual std::string add_task_consumer(int prefetch) = 0;
    /// Graceful: no new assignments, in-flight deliveries stay ackable.
    virtual void remove_task_consumer(const std::string& consumer_id) = 0;
    /// Abrupt: unacknowledged deliveries go back to the broker for
    /// requeue. Used by close(grace) for handlers that never returned.
    virtual void drop_task_consumer(const std::string& consumer_id) = 0;
    virtual void ack(const std::string& consumer_id, uint64_t tag) = 0;
    virtual void reject(const std::string& consumer_id, uint64_t tag, bool requeue) = 0;

    // -- RPC -------------------------------------------------------------

    /// Routes to the recipient's RPC queue. When nobody serves it, an
    /// UNROUTABLE error reply arrives through on_reply.
    virtual void publish_rpc(const std::string& recipient_id, const Envelope& env) = 0;
    /// Blocking declaration; throws DuplicateIdentifierError when the
    /// identifier is already claimed on this broker.
    virtual void add_rpc_queue(const std::string& identifier) = 0;
    virtual void remove_rpc_queue(const std::string& identifier) = 0;

    // -- broadcast -------------------------------------------------------

    virtual void publish_broadcast(const Envelope& env, PublishConfirm confirm) = 0;
    virtual uint64_t add_broadcast_binding(const BroadcastFilter& filter) = 0;
    virtual void remove_broadcast_binding(uint64_t binding_id) = 0;

    // -- replies ---------------------------------------------------------

    virtual void publish_reply(const std::string& reply_to, const Envelope& env) = 0;
    /// This communicator's own reply address, stable for its lifetime.
    virtual const std::string& reply_address() const = 0;
};

}  // namespace commkit
