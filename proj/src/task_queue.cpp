#include "commkit/task_queue.hpp"

#include <algorithm>

#include "commkit/errors.hpp"

namespace commkit {

int64_t payload_serial(const Value& body) {
    if (body.is_object() && body.contains("serial") &&
        body["serial"].is_number_integer()) {
        return body["serial"].get<int64_t>();
    }
    return -1;
}

TaskQueue::TaskQueue(TraceSink sink) : sink_(std::move(sink)) {}

void TaskQueue::emit(TraceKind kind, uint64_t tag, const std::string& consumer,
                     const std::string& reason, int64_t serial,
                     bool redelivered) {
    if (!sink_) {
        return;
    }
    TraceEvent ev;
    ev.seq = trace_seq_++;
    ev.kind = kind;
    ev.tag = tag;
    ev.consumer = consumer;
    ev.reason = reason;
    ev.serial = serial;
    ev.redelivered = redelivered;
    ev.pending_depth = pending_.size();
    ev.unacked_total = unacked_total();
    sink_(ev);
}

uint64_t TaskQueue::enqueue(Envelope env, std::string reply_to) {
    Entry entry{next_tag_++, std::move(env), std::move(reply_to), 0};
    entry.serial = payload_serial(entry.env.body);
    uint64_t tag = entry.tag;
    int64_t serial = entry.serial;
    pending_.push_back(std::move(entry));
    ++enqueued_total_;
    emit(TraceKind::Enqueue, tag, {}, {}, serial, false);
    run_dispatch();
    return tag;
}

std::string TaskQueue::register_consumer(int prefetch) {
    if (prefetch < 1) {
        throw Error("prefetch must be positive");
    }
    Consumer c;
    c.id = "c" + std::to_string(++consumer_seq_);
    c.prefetch = prefetch;
    consumers_.push_back(std::move(c));
    emit(TraceKind::ConsumerRegister, 0, consumers_.back().id,
         "prefetch=" + std::to_string(prefetch), -1, false);
    run_dispatch();
    return consumers_.back().id;
}

TaskQueue::Consumer* TaskQueue::find_consumer(const std::string& id) {
    auto it = std::find_if(consumers_.begin(), consumers_.end(),
                           [&](const Consumer& c) { return c.id == id; });
    return it == consumers_.end() ? nullptr : &*it;
}

const TaskQueue::Consumer* TaskQueue::find_consumer(
    const std::string& id) const {
    auto it = std::find_if(consumers_.begin(), consumers_.end(),
                           [&](const Consumer& c) { return c.id == id; });
    return it == consumers_.end() ? nullptr : &*it;
}

bool TaskQueue::has_consumer(const std::string& consumer) const {
    return find_consumer(consumer) != nullptr;
}

void TaskQueue::deactivate_consumer(const std::string& consumer) {
    Consumer* c = find_consumer(consumer);
    if (!c) {
        throw UnknownConsumerError("no consumer " + consumer);
    }
    c->active = false;
    emit(TraceKind::ConsumerDeactivate, 0, consumer, {}, -1, false);
    if (c->unacked.empty()) {
        drop_record(*c, 0, "drained");
    }
}

void TaskQueue::drop_record(Consumer& consumer, size_t requeued,
                            const std::string& reason) {
    std::string id = consumer.id;
    size_t index = static_cast<size_t>(&consumer - consumers_.data());
    consumers_.erase(consumers_.begin() + static_cast<ptrdiff_t>(index));
    if (cursor_ > index) {
        --cursor_;
    }
    if (!consumers_.empty()) {
        cursor_ %= consumers_.size();
    } else {
        cursor_ = 0;
    }
    emit(TraceKind::ConsumerDrop, requeued, id, reason, -1, false);
}

size_t TaskQueue::drop_consumer(const std::string& consumer,
                                const std::string& reason) {
    Consumer* c = find_consumer(consumer);
    if (!c) {
        throw UnknownConsumerError("no consumer " + consumer);
    }
    size_t requeued = c->unacked.size();
    std::vector<Entry> held;
    held.swap(c->unacked);
    // Head insertion as a block keeps the original assignment order.
    for (auto it = held.rbegin(); it != held.rend(); ++it) {
        it->env.redelivered = true;
        uint64_t tag = it->tag;
        int64_t serial = it->serial;
        pending_.push_front(std::move(*it));
        emit(TraceKind::Requeue, tag, consumer, reason, serial, true);
    }
    drop_record(*c, requeued, reason);
    run_dispatch();
    return requeued;
}

TaskQueue::Entry TaskQueue::take_unacked(Consumer& consumer, uint64_t tag) {
    auto it = std::find_if(consumer.unacked.begin(), consumer.unacked.end(),
                           [&](const Entry& e) { return e.tag == tag; });
    if (it == consumer.unacked.end()) {
        throw UnknownDeliveryError("consumer " + consumer.id +
                                   " does not hold tag " +
                                   std::to_string(tag));
    }
    Entry entry = std::move(*it);
    consumer.unacked.erase(it);
    return entry;
}

void TaskQueue::acknowledge(const std::string& consumer, uint64_t tag) {
    Consumer* c = find_consumer(consumer);
    if (!c) {
        throw UnknownDeliveryError("no consumer " + consumer);
    }
    Entry entry = take_unacked(*c, tag);
    ++acked_total_;
    emit(TraceKind::Ack, tag, consumer, {}, entry.serial, false);
    if (!c->active && c->unacked.empty()) {
        drop_record(*c, 0, "drained");
    }
    run_dispatch();
}

void TaskQueue::reject(const std::string& consumer, uint64_t tag,
                       bool requeue) {
    Consumer* c = find_consumer(consumer);
    if (!c) {
        throw UnknownDeliveryError("no consumer " + consumer);
    }
    Entry entry = take_unacked(*c, tag);
    if (requeue) {
        entry.env.redelivered = true;
        int64_t serial = entry.serial;
        pending_.push_front(std::move(entry));
        emit(TraceKind::Requeue, tag, consumer, "rejected", serial, true);
    } else {
        emit(TraceKind::DeadLetter, tag, consumer, "rejected", entry.serial,
             false);
        dead_.push_back({std::move(entry.env), "rejected"});
    }
    if (!c->active && c->unacked.empty()) {
        drop_record(*c, 0, "drained");
    }
    run_dispatch();
}

bool TaskQueue::assign_one() {
    if (pending_.empty() || consumers_.empty()) {
        return false;
    }
    size_t n = consumers_.size();
    for (size_t k = 0; k < n; ++k) {
        size_t idx = (cursor_ + k) % n;
        Consumer& c = consumers_[idx];
        if (!c.active ||
            c.unacked.size() >= static_cast<size_t>(c.prefetch)) {
            continue;
        }
        Entry entry = std::move(pending_.front());
        pending_.pop_front();
        uint64_t tag = entry.tag;
        int64_t serial = entry.serial;
        bool redelivered = entry.env.redelivered;
        outbox_.push_back({c.id, tag, entry.env, entry.reply_to});
        c.unacked.push_back(std::move(entry));
        cursor_ = (idx + 1) % n;
        emit(TraceKind::Assign, tag, c.id, {}, serial, redelivered);
        return true;
    }
    return false;
}

void TaskQueue::run_dispatch() {
    while (assign_one()) {
    }
}

std::vector<Assignment> TaskQueue::dispatch() {
    size_t before = outbox_.size();
    run_dispatch();
    std::vector<Assignment> made(outbox_.begin() +
                                     static_cast<ptrdiff_t>(before),
                                 outbox_.end());
    return made;
}

std::vector<Assignment> TaskQueue::take_assignments() {
    std::vector<Assignment> out;
    out.swap(outbox_);
    return out;
}

size_t TaskQueue::unacked_count(const std::string& consumer) const {
    const Consumer* c = find_consumer(consumer);
    return c ? c->unacked.size() : 0;
}

size_t TaskQueue::unacked_total() const {
    size_t total = 0;
    for (const auto& c : consumers_) {
        total += c.unacked.size();
    }
    return total;
}

std::vector<uint64_t> TaskQueue::pending_tags() const {
    std::vector<uint64_t> tags;
    tags.reserve(pending_.size());
    for (const auto& e : pending_) {
        tags.push_back(e.tag);
    }
    return tags;
}

std::vector<uint64_t> TaskQueue::unacked_tags(
    const std::string& consumer) const {
    std::vector<uint64_t> tags;
    if (const Consumer* c = find_consumer(consumer)) {
        tags.reserve(c->unacked.size());
        for (const auto& e : c->unacked) {
            tags.push_back(e.tag);
        }
    }
    return tags;
}

}  // namespace commkit
