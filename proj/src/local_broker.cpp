#include "commkit/local_broker.hpp"

#include "commkit/errors.hpp"
#include "commkit/reply.hpp"

namespace commkit {

std::shared_ptr<LocalBroker> LocalBroker::named(const std::string& name) {
    static std::mutex registry_mutex;
    static std::map<std::string, std::shared_ptr<LocalBroker>> registry;
    std::lock_guard lock(registry_mutex);
    auto& slot = registry[name];
    if (!slot) {
        slot = std::make_shared<LocalBroker>();
    }
    return slot;
}

TaskQueue& LocalBroker::queue_locked(const std::string& name) {
    auto& slot = queues_[name];
    if (!slot) {
        // The trampoline lets set_trace_sink() swap sinks after creation.
        slot = std::make_unique<TaskQueue>([this, name](const TraceEvent& ev) {
            auto it = sinks_.find(name);
            if (it != sinks_.end() && it->second) {
                it->second(ev);
            }
        });
    }
    return *slot;
}

void LocalBroker::drain_outbox_locked(const std::string& name, TaskQueue& queue) {
    for (const Assignment& assignment : queue.take_assignments()) {
        auto it = task_consumers_.find(name + "/" + assignment.consumer);
        if (it != task_consumers_.end()) {
            it->second(assignment);
        }
    }
}

uint64_t LocalBroker::publish_task(const std::string& queue, Envelope env,
                                   std::string reply_to) {
    std::lock_guard lock(mutex_);
    TaskQueue& q = queue_locked(queue);
    uint64_t tag = q.enqueue(std::move(env), std::move(reply_to));
    drain_outbox_locked(queue, q);
    return tag;
}

std::string LocalBroker::add_consumer(const std::string& queue, int prefetch,
                                      TaskDeliveryFn fn) {
    std::lock_guard lock(mutex_);
    TaskQueue& q = queue_locked(queue);
    std::string id = q.register_consumer(prefetch);
    task_consumers_[queue + "/" + id] = std::move(fn);
    drain_outbox_locked(queue, q);
    return id;
}

void LocalBroker::deactivate_consumer(const std::string& queue, const std::string& consumer) {
    std::lock_guard lock(mutex_);
    TaskQueue& q = queue_locked(queue);
    q.deactivate_consumer(consumer);
    if (!q.has_consumer(consumer)) {
        task_consumers_.erase(queue + "/" + consumer);
    }
}

std::size_t LocalBroker::drop_consumer(const std::string& queue, const std::string& consumer,
                                       const std::string& reason) {
    std::lock_guard lock(mutex_);
    TaskQueue& q = queue_locked(queue);
    std::size_t requeued = q.drop_consumer(consumer, reason);
    task_consumers_.erase(queue + "/" + consumer);
    drain_outbox_locked(queue, q);
    return requeued;
}

void LocalBroker::ack(const std::string& queue, const std::string& consumer, uint64_t tag) {
    std::lock_guard lock(mutex_);
    TaskQueue& q = queue_locked(queue);
    q.acknowledge(consumer, tag);
    if (!q.has_consumer(consumer)) {
        task_consumers_.erase(queue + "/" + consumer);  // drained after deactivate
    }
    drain_outbox_locked(queue, q);
}

void LocalBroker::reject(const std::string& queue, const std::string& consumer, uint64_t tag,
                         bool requeue) {
    std::lock_guard lock(mutex_);
    TaskQueue& q = queue_locked(queue);
    q.reject(consumer, tag, requeue);
    if (!q.has_consumer(consumer)) {
        task_consumers_.erase(queue + "/" + consumer);
    }
    drain_outbox_locked(queue, q);
}

std::size_t LocalBroker::queue_depth(const std::string& queue) {
    std::lock_guard lock(mutex_);
    return queue_locked(queue).pending_depth();
}

std::size_t LocalBroker::unacked_total(const std::string& queue) {
    std::lock_guard lock(mutex_);
    return queue_locked(queue).unacked_total();
}

std::vector<DeadLetter> LocalBroker::dead_letters(const std::string& queue) {
    std::lock_guard lock(mutex_);
    return queue_locked(queue).dead_letters();
}

void LocalBroker::set_trace_sink(const std::string& queue, TraceSink sink) {
    std::lock_guard lock(mutex_);
    sinks_[queue] = std::move(sink);
}

void LocalBroker::register_rpc(const std::string& name, RpcDeliveryFn fn) {
    std::lock_guard lock(mutex_);
    auto [it, inserted] = rpc_handlers_.emplace(name, std::move(fn));
    if (!inserted) {
        throw DuplicateIdentifierError("RPC queue '" + name + "' already has a subscriber");
    }
}

bool LocalBroker::unregister_rpc(const std::string& name) {
    std::lock_guard lock(mutex_);
    return rpc_handlers_.erase(name) > 0;
}

bool LocalBroker::route_rpc(const std::string& name, Envelope env,
                            const std::string& reply_to) {
    std::lock_guard lock(mutex_);
    auto it = rpc_handlers_.find(name);
    if (it != rpc_handlers_.end()) {
        it->second(env, reply_to);
        return true;
    }
    if (!reply_to.empty()) {
        Envelope reply;
        reply.kind = MessageKind::RpcReply;
        reply.correlation_id = env.correlation_id;
        reply.body = make_error_reply(
            {ErrorCategory::Unroutable, "no subscriber for RPC queue '" + name + "'"});
        auto inbox = inboxes_.find(reply_to);
        if (inbox != inboxes_.end()) {
            inbox->second(reply);
        }
    }
    return false;
}

uint64_t LocalBroker::bind_broadcast(const std::string& exchange, BroadcastFilter filter,
                                     BroadcastDeliveryFn fn) {
    std::lock_guard lock(mutex_);
    uint64_t id = next_binding_id_++;
    exchanges_[exchange].push_back(Binding{id, std::move(filter), std::move(fn)});
    return id;
}

void LocalBroker::unbind_broadcast(const std::string& exchange, uint64_t binding_id) {
    std::lock_guard lock(mutex_);
    auto it = exchanges_.find(exchange);
    if (it == exchanges_.end()) {
        return;
    }
    auto& bindings = it->second;
    for (auto b = bindings.begin(); b != bindings.end(); ++b) {
        if (b->id == binding_id) {
            bindings.erase(b);
            break;
        }
    }
    if (bindings.empty()) {
        exchanges_.erase(it);
    }
}

std::size_t LocalBroker::publish_broadcast(const std::string& exchange, const Envelope& env) {
    std::lock_guard lock(mutex_);
    auto it = exchanges_.find(exchange);
    if (it == exchanges_.end()) {
        return 0;
    }
    std::size_t delivered = 0;
    for (const Binding& binding : it->second) {
        if (filter_matches(binding.filter, env.sender, env.subject)) {
            binding.fn(binding.id, env);
            ++delivered;
        }
    }
    return delivered;
}

void LocalBroker::register_inbox(const std::string& name, EnvelopeFn fn) {
    std::lock_guard lock(mutex_);
    inboxes_[name] = std::move(fn);
}

void LocalBroker::unregister_inbox(const std::string& name) {
    std::lock_guard lock(mutex_);
    inboxes_.erase(name);
}

bool LocalBroker::publish_reply(const std::string& reply_to, const Envelope& env) {
    std::lock_guard lock(mutex_);
    auto it = inboxes_.find(reply_to);
    if (it == inboxes_.end()) {
        return false;
    }
    it->second(env);
    return true;
}

}  // namespace commkit
