#include "local_session.hpp"

#include "commkit/errors.hpp"

namespace commkit {

namespace {

/// Both transports ship JSON text, so the local one validates and copies
/// envelopes through the same encoding. Catches unencodable payloads at
/// the send site and guarantees the consumer sees a faithful decode.
Envelope wire_round_trip(const Envelope& env) {
    return decode_envelope(encode_envelope(env));
}

}  // namespace

LocalSession::LocalSession(std::shared_ptr<LocalBroker> broker, const ConnectOptions& opts,
                           BackendCallbacks callbacks)
    : broker_(std::move(broker)),
      callbacks_(std::move(callbacks)),
      namespace_prefix_(opts.namespace_prefix),
      task_queue_(effective_task_queue(opts)),
      exchange_(opts.namespace_prefix + ".broadcast"),
      reply_address_(opts.namespace_prefix + ".reply." + new_correlation_id()) {}

void LocalSession::open() {
    broker_->register_inbox(reply_address_, [this](const Envelope& env) {
        callbacks_.on_reply(env);
    });
}

void LocalSession::close() {
    std::set<std::string> consumers, rpc_queues;
    std::set<uint64_t> bindings;
    {
        std::lock_guard lock(mutex_);
        if (closed_) {
            return;
        }
        closed_ = true;
        consumers.swap(consumers_);
        rpc_queues.swap(rpc_queues_);
        bindings.swap(bindings_);
    }
    for (const auto& id : consumers) {
        broker_->drop_consumer(task_queue_, id, "session_closed");
    }
    for (const auto& name : rpc_queues) {
        broker_->unregister_rpc(name);
    }
    for (uint64_t id : bindings) {
        broker_->unbind_broadcast(exchange_, id);
    }
    broker_->unregister_inbox(reply_address_);
}

void LocalSession::publish_task(const Envelope& env, PublishConfirm confirm) {
    broker_->publish_task(task_queue_, wire_round_trip(env), reply_address_);
    if (confirm) {
        confirm(true, {});
    }
}

std::string LocalSession::add_task_consumer(int prefetch) {
    std::string id = broker_->add_consumer(task_queue_, prefetch,
                                           [this](const Assignment& assignment) {
                                               callbacks_.on_task(assignment);
                                           });
    std::lock_guard lock(mutex_);
    consumers_.insert(id);
    return id;
}

void LocalSession::remove_task_consumer(const std::string& consumer_id) {
    broker_->deactivate_consumer(task_queue_, consumer_id);
}

void LocalSession::drop_task_consumer(const std::string& consumer_id) {
    broker_->drop_consumer(task_queue_, consumer_id);
    std::lock_guard lock(mutex_);
    consumers_.erase(consumer_id);
}

void LocalSession::ack(const std::string& consumer_id, uint64_t tag) {
    broker_->ack(task_queue_, consumer_id, tag);
}

void LocalSession::reject(const std::string& consumer_id, uint64_t tag, bool requeue) {
    broker_->reject(task_queue_, consumer_id, tag, requeue);
}

std::string LocalSession::rpc_queue_name(const std::string& identifier) const {
    return namespace_prefix_ + ".rpc." + identifier;
}

void LocalSession::publish_rpc(const std::string& recipient_id, const Envelope& env) {
    broker_->route_rpc(rpc_queue_name(recipient_id), wire_round_trip(env), reply_address_);
}

void LocalSession::add_rpc_queue(const std::string& identifier) {
    std::string name = rpc_queue_name(identifier);
    broker_->register_rpc(name, [this](const Envelope& env, const std::string& reply_to) {
        callbacks_.on_rpc(env, reply_to);
    });
    std::lock_guard lock(mutex_);
    rpc_queues_.insert(name);
}

void LocalSession::remove_rpc_queue(const std::string& identifier) {
    std::string name = rpc_queue_name(identifier);
    broker_->unregister_rpc(name);
    std::lock_guard lock(mutex_);
    rpc_queues_.erase(name);
}

void LocalSession::publish_broadcast(const Envelope& env, PublishConfirm confirm) {
    broker_->publish_broadcast(exchange_, wire_round_trip(env));
    if (confirm) {
        confirm(true, {});
    }
}

uint64_t LocalSession::add_broadcast_binding(const BroadcastFilter& filter) {
    uint64_t id = broker_->bind_broadcast(
        exchange_, filter, [this](uint64_t binding_id, const Envelope& env) {
            callbacks_.on_broadcast(binding_id, env);
        });
    std::lock_guard lock(mutex_);
    bindings_.insert(id);
    return id;
}

void LocalSession::remove_broadcast_binding(uint64_t binding_id) {
    broker_->unbind_broadcast(exchange_, binding_id);
    std::lock_guard lock(mutex_);
    bindings_.erase(binding_id);
}

void LocalSession::publish_reply(const std::string& reply_to, const Envelope& env) {
    broker_->publish_reply(reply_to, wire_round_trip(env));
}

}  // namespace commkit
