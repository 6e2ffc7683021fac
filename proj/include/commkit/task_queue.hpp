#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "commkit/envelope.hpp"
#include "commkit/trace.hpp"

namespace commkit {

/// A delivery handed to a consumer: the envelope plus transport metadata.
struct Assignment {
    std::string consumer;
    uint64_t tag = 0;
    Envelope env;
    std::string reply_to;
};

struct DeadLetter {
    Envelope env;
    std::string reason;
};

/// Deterministic FIFO task queue with manual acknowledgement.
///
/// Single-threaded by design: callers serialize access (the in-process
/// broker wraps it in a mutex, the fault harness drives it directly).
/// Every mutation attempts dispatch and emits trace events; newly made
/// assignments accumulate in an outbox drained via take_assignments().
///
/// Delivery tags identify queue entries: assigned once at enqueue,
/// strictly increasing, never reused, and kept across requeues.
class TaskQueue {
public:
    explicit TaskQueue(TraceSink sink = {});

    /// Appends to the pending tail and attempts dispatch.
    uint64_t enqueue(Envelope env, std::string reply_to = {});

    /// Registers a consumer (round-robin position = registration order).
    /// Returns the broker-assigned consumer id ("c1", "c2", ...).
    std::string register_consumer(int prefetch = 1);

    /// Stops assignments to the consumer but keeps its unacked deliveries
    /// ackable; the record is dropped once they drain.
    void deactivate_consumer(const std::string& consumer);

    /// Consumer death: requeues its unacked deliveries to the head of
    /// pending (original assignment order, redelivered set) and removes
    /// the record. Returns the number requeued.
    size_t drop_consumer(const std::string& consumer,
                         const std::string& reason = "consumer_died");

    /// Removes the delivery permanently. UnknownDeliveryError if the tag
    /// is not held by that consumer.
    void acknowledge(const std::string& consumer, uint64_t tag);

    /// requeue=true returns the delivery to the head of pending with
    /// redelivered set; requeue=false moves it to the dead-letter store.
    void reject(const std::string& consumer, uint64_t tag, bool requeue);

    /// Moves head-of-pending entries to free consumer slots in round-robin
    /// registration order; returns the assignments made by this call.
    std::vector<Assignment> dispatch();

    /// Drains assignments accumulated by any mutation since the last call.
    std::vector<Assignment> take_assignments();

    bool has_consumer(const std::string& consumer) const;
    size_t pending_depth() const { return pending_.size(); }
    size_t unacked_count(const std::string& consumer) const;
    size_t unacked_total() const;
    size_t consumer_count() const { return consumers_.size(); }
    uint64_t enqueued_total() const { return enqueued_total_; }
    uint64_t acked_total() const { return acked_total_; }
    const std::vector<DeadLetter>& dead_letters() const { return dead_; }

    /// Tags currently pending, head first. Test and audit hook.
    std::vector<uint64_t> pending_tags() const;
    std::vector<uint64_t> unacked_tags(const std::string& consumer) const;

private:
    struct Entry {
        uint64_t tag;
        Envelope env;
        std::string reply_to;
        int64_t serial;
    };
    struct Consumer {
        std::string id;
        int prefetch;
        bool active = true;
        std::vector<Entry> unacked;  // assignment order
    };

    Consumer* find_consumer(const std::string& id);
    const Consumer* find_consumer(const std::string& id) const;
    Entry take_unacked(Consumer& consumer, uint64_t tag);
    void drop_record(Consumer& consumer, size_t requeued,
                     const std::string& reason);
    bool assign_one();
    void run_dispatch();
    void emit(TraceKind kind, uint64_t tag, const std::string& consumer,
              const std::string& reason, int64_t serial, bool redelivered);

    std::deque<Entry> pending_;
    std::vector<Consumer> consumers_;
    std::vector<DeadLetter> dead_;
    std::vector<Assignment> outbox_;
    TraceSink sink_;
    size_t cursor_ = 0;
    uint64_t next_tag_ = 1;
    uint64_t consumer_seq_ = 0;
    uint64_t trace_seq_ = 0;
    uint64_t enqueued_total_ = 0;
    uint64_t acked_total_ = 0;
};

/// Serial embedded in a payload body ({"serial": n}), or -1.
int64_t payload_serial(const Value& body);

}  // namespace commkit
