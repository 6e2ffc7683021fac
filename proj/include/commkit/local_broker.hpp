#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "commkit/broadcast_filter.hpp"
#include "commkit/envelope.hpp"
#include "commkit/task_queue.hpp"
#include "commkit/trace.hpp"

namespace commkit {

/// Delivery callbacks. All of them run while the broker mutex is held, so
/// they must hand the message off (typically by posting to an event loop)
/// and must never call back into the broker synchronously.
using TaskDeliveryFn = std::function<void(const Assignment&)>;
using RpcDeliveryFn = std::function<void(const Envelope&, const std::string& reply_to)>;
using BroadcastDeliveryFn = std::function<void(uint64_t binding_id, const Envelope&)>;
using EnvelopeFn = std::function<void(const Envelope&)>;

/// In-process message broker. One mutex serializes every operation, which
/// is what gives the local transport its ordered-event-sequence semantics:
/// publishes, acks and consumer changes are applied atomically in the order
/// the calling threads arrive.
class LocalBroker {
public:
    LocalBroker() = default;
    LocalBroker(const LocalBroker&) = delete;
    LocalBroker& operator=(const LocalBroker&) = delete;

    /// Process-wide broker registry, keyed by the name part of a
    /// local:// URI. Brokers live for the rest of the process so that
    /// queue state survives individual communicators.
    static std::shared_ptr<LocalBroker> named(const std::string& name);

    // -- task queues ---------------------------------------------------

    uint64_t publish_task(const std::string& queue, Envelope env, std::string reply_to);
    std::string add_consumer(const std::string& queue, int prefetch, TaskDeliveryFn fn);
    /// Stops new assignments; the consumer record disappears once its
    /// in-flight deliveries are settled.
    void deactivate_consumer(const std::string& queue, const std::string& consumer);
    /// Abrupt removal: everything unacked goes back to the head of the
    /// queue. Returns how many deliveries were requeued.
    std::size_t drop_consumer(const std::string& queue, const std::string& consumer,
                              const std::string& reason = "consumer_died");
    void ack(const std::string& queue, const std::string& consumer, uint64_t tag);
    void reject(const std::string& queue, const std::string& consumer, uint64_t tag,
                bool requeue);

    std::size_t queue_depth(const std::string& queue);
    std::size_t unacked_total(const std::string& queue);
    std::vector<DeadLetter> dead_letters(const std::string& queue);

    /// Routes transition events for one queue to `sink` (replacing any
    /// previous sink). Events are emitted under the broker mutex, in order.
    void set_trace_sink(const std::string& queue, TraceSink sink);

    // -- RPC -----------------------------------------------------------

    /// Registers the exclusive handler for an RPC queue name; a second
    /// registration for the same name throws DuplicateIdentifierError.
    void register_rpc(const std::string& name, RpcDeliveryFn fn);
    bool unregister_rpc(const std::string& name);
    /// Delivers the request, or synthesizes an unroutable error reply to
    /// `reply_to` when nobody serves the name. Returns whether it routed.
    bool route_rpc(const std::string& name, Envelope env, const std::string& reply_to);

    // -- broadcast -----------------------------------------------------

    uint64_t bind_broadcast(const std::string& exchange, BroadcastFilter filter,
                            BroadcastDeliveryFn fn);
    void unbind_broadcast(const std::string& exchange, uint64_t binding_id);
    /// Returns the number of bindings the message matched.
    std::size_t publish_broadcast(const std::string& exchange, const Envelope& env);

    // -- reply inboxes ---------------------------------------------------

    void register_inbox(const std::string& name, EnvelopeFn fn);
    void unregister_inbox(const std::string& name);
    /// Returns false when the inbox no longer exists (reply dropped).
    bool publish_reply(const std::string& reply_to, const Envelope& env);

private:
    struct Binding {
        uint64_t id;
        BroadcastFilter filter;
        BroadcastDeliveryFn fn;
    };

    TaskQueue& queue_locked(const std::string& name);
    void drain_outbox_locked(const std::string& name, TaskQueue& queue);

    std::mutex mutex_;
    std::map<std::string, std::unique_ptr<TaskQueue>> queues_;
    std::map<std::string, TaskDeliveryFn> task_consumers_;  // "<queue>/<consumer>"
    std::map<std::string, TraceSink> sinks_;
    std::map<std::string, RpcDeliveryFn> rpc_handlers_;
    std::map<std::string, std::vector<Binding>> exchanges_;
    std::map<std::string, EnvelopeFn> inboxes_;
    uint64_t next_binding_id_ = 1;
};

}  // namespace commkit
