#include "commkit/communicator.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdio>
#include <map>
#include <mutex>
#include <set>
#include <thread>
#include <vector>

#include "backend_factory.hpp"
#include "commkit/event_loop.hpp"
#include "commkit/local_broker.hpp"
#include "commkit/reply.hpp"
#include "commkit/uri.hpp"
#include "local_session.hpp"

namespace commkit {

const Value NO_RESPONSE = Value{{"__no_response__", true}};

bool is_no_response(const Value& value) {
    return value.is_object() && value.size() == 1 &&
           value.value("__no_response__", false);
}

std::string effective_task_queue(const ConnectOptions& opts) {
    // Every queue lives under the namespace prefix; a custom task-queue
    // name selects a sibling under "<ns>.tasks.".
    return opts.task_queue.empty()
               ? opts.namespace_prefix + ".tasks"
               : opts.namespace_prefix + ".tasks." + opts.task_queue;
}

namespace {

int64_t steady_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

struct Communicator::Impl : std::enable_shared_from_this<Communicator::Impl> {
    enum class State { Open, Closing, Closed };

    std::string uri_text;
    ConnectOptions opts;
    EventLoop loop;
    std::unique_ptr<Backend> backend;
    std::atomic<State> state{State::Open};

    // Guards every registry below. Never held across blocking backend
    // calls: the wire backend completes those on the loop thread, which
    // itself takes this mutex in the delivery path.
    std::mutex mutex;
    struct TaskSub {
        uint64_t token;
        TaskHandler handler;
    };
    std::map<std::string, TaskSub> task_subs;  // consumer id -> handler
    std::set<std::string> retired_consumers;
    std::map<std::string, RpcHandler> rpc_handlers;  // identifier -> handler
    struct BroadcastSub {
        uint64_t token;
        BroadcastHandler handler;
    };
    std::map<uint64_t, BroadcastSub> broadcast_subs;  // binding id -> handler
    std::set<uint64_t> retired_bindings;
    std::map<std::string, Future> pending_replies;  // correlation id -> future
    uint64_t next_token = 1;

    // Handlers currently executing or awaiting a deferred future; close()
    // grants them the grace period before requeueing their deliveries.
    std::atomic<int> outstanding{0};

    // Watchdog: start time (steady ms) of the handler occupying the
    // communication thread, 0 while idle.
    std::atomic<int64_t> handler_started_ms{0};
    std::thread watchdog;
    std::mutex watchdog_mutex;
    std::condition_variable watchdog_cv;
    bool watchdog_stop = false;

    ~Impl() {
        teardown(std::chrono::milliseconds{0}, ErrorInfo{ErrorCategory::Cancelled,
                                                         "communicator destroyed"});
    }

    void ensure_open() const {
        if (state.load() != State::Open) {
            throw ClosedError("communicator is closed");
        }
    }

    Communicator self() { return Communicator(shared_from_this()); }

    // ---- inbound deliveries (communication thread) ---------------------

    void handle_task(Assignment assignment) {
        if (state.load() != State::Open) {
            return;  // close() requeues everything undelivered
        }
        TaskHandler handler;
        bool known = false;
        bool retired = false;
        {
            std::lock_guard lock(mutex);
            auto it = task_subs.find(assignment.consumer);
            if (it != task_subs.end()) {
                handler = it->second.handler;
                known = true;
            } else {
                retired = retired_consumers.count(assignment.consumer) > 0;
            }
        }
        if (!known) {
            if (retired) {
                // Delivery raced the subscriber's removal: give it back.
                try {
                    backend->reject(assignment.consumer, assignment.tag, true);
                } catch (const Error&) {
                }
            } else {
                // Registration still completing on the caller's thread;
                // retry shortly.
                auto weak = weak_from_this();
                loop.add_timer_after(std::chrono::milliseconds{1},
                                     [weak, assignment = std::move(assignment)]() mutable {
                                         if (auto impl = weak.lock()) {
                                             impl->handle_task(std::move(assignment));
                                         }
                                     });
            }
            return;
        }

        outstanding.fetch_add(1);
        TaskResult result;
        handler_started_ms.store(steady_ms());
        try {
            Communicator comm = self();
            result = handler(comm, assignment.env.body);
        } catch (const std::exception& e) {
            handler_started_ms.store(0);
            settle_task_error(assignment,
                              ErrorInfo{ErrorCategory::RemoteException, e.what()});
            outstanding.fetch_sub(1);
            return;
        } catch (...) {
            handler_started_ms.store(0);
            settle_task_error(assignment, ErrorInfo{ErrorCategory::RemoteException,
                                                    "task handler raised a non-standard exception"});
            outstanding.fetch_sub(1);
            return;
        }
        handler_started_ms.store(0);

        if (auto* value = std::get_if<Value>(&result)) {
            settle_task_ok(assignment, std::move(*value));
            outstanding.fetch_sub(1);
            return;
        }
        // Deferred completion: acknowledgement and the reply wait for the
        // handler's future, back on the communication thread.
        Future deferred = std::get<Future>(result);
        auto weak = weak_from_this();
        deferred.on_done([weak, assignment](Future& done) {
            if (auto impl = weak.lock()) {
                Future settled = done;
                impl->loop.post([weak, assignment, settled]() mutable {
                    if (auto impl2 = weak.lock()) {
                        impl2->settle_deferred(assignment, settled);
                    }
                });
            }
        });
    }

    void settle_deferred(const Assignment& assignment, Future& done) {
        if (state.load() == State::Closed) {
            outstanding.fetch_sub(1);
            return;  // transport gone; the broker already requeued
        }
        switch (done.state()) {
            case FutureState::Resolved:
                settle_task_ok(assignment, done.await());
                break;
            case FutureState::Failed:
                settle_task_error(assignment, done.error());
                break;
            case FutureState::Cancelled:
                settle_task_error(assignment, ErrorInfo{ErrorCategory::Cancelled,
                                                        "task handler cancelled the task"});
                break;
            case FutureState::Pending:
                break;  // unreachable: on_done fires only on terminal states
        }
        outstanding.fetch_sub(1);
    }

    void settle_task_ok(const Assignment& assignment, Value result) {
        try {
            backend->ack(assignment.consumer, assignment.tag);
        } catch (const Error&) {
            return;  // consumer dropped while closing: delivery was requeued
        }
        if (!assignment.env.no_reply && !assignment.reply_to.empty()) {
            Envelope reply;
            reply.kind = MessageKind::TaskReply;
            reply.correlation_id = assignment.env.correlation_id;
            reply.body =
                make_ok_reply(is_no_response(result) ? Value(nullptr) : std::move(result));
            send_reply(assignment.reply_to, reply);
        }
    }

    void settle_task_error(const Assignment& assignment, const ErrorInfo& info) {
        try {
            backend->reject(assignment.consumer, assignment.tag, /*requeue=*/false);
        } catch (const Error&) {
            return;
        }
        if (!assignment.env.no_reply && !assignment.reply_to.empty()) {
            Envelope reply;
            reply.kind = MessageKind::TaskReply;
            reply.correlation_id = assignment.env.correlation_id;
            reply.body = make_error_reply(info);
            send_reply(assignment.reply_to, reply);
        }
    }

    void send_reply(const std::string& reply_to, const Envelope& reply) {
        try {
            backend->publish_reply(reply_to, reply);
        } catch (const Error& e) {
            std::fprintf(stderr, "[commkit] failed to send reply: %s\n", e.what());
        }
    }

    void handle_rpc(Envelope env, std::string reply_to) {
        if (state.load() != State::Open) {
            return;
        }
        std::string identifier = env.recipient_id.value_or("");
        RpcHandler handler;
        {
            std::lock_guard lock(mutex);
            auto it = rpc_handlers.find(identifier);
            if (it != rpc_handlers.end()) {
                handler = it->second;
            }
        }
        bool want_reply = !env.no_reply && !reply_to.empty();
        if (!handler) {
            // Raced an unsubscribe after broker routing.
            if (want_reply) {
                Envelope reply;
                reply.kind = MessageKind::RpcReply;
                reply.correlation_id = env.correlation_id;
                reply.body = make_error_reply(
                    {ErrorCategory::Unroutable, "no subscriber for identifier '" + identifier + "'"});
                send_reply(reply_to, reply);
            }
            return;
        }
        outstanding.fetch_add(1);
        handler_started_ms.store(steady_ms());
        Value result;
        bool failed = false;
        ErrorInfo failure;
        try {
            Communicator comm = self();
            result = handler(comm, env.body);
        } catch (const std::exception& e) {
            failed = true;
            failure = {ErrorCategory::RemoteException, e.what()};
        } catch (...) {
            failed = true;
            failure = {ErrorCategory::RemoteException, "RPC handler raised a non-standard exception"};
        }
        handler_started_ms.store(0);
        outstanding.fetch_sub(1);
        if (!want_reply) {
            return;
        }
        Envelope reply;
        reply.kind = MessageKind::RpcReply;
        reply.correlation_id = env.correlation_id;
        reply.body = failed ? make_error_reply(failure)
                            : make_ok_reply(is_no_response(result) ? Value(nullptr)
                                                                   : std::move(result));
        send_reply(reply_to, reply);
    }

    void handle_broadcast(uint64_t binding_id, Envelope env) {
        if (state.load() != State::Open) {
            return;
        }
        BroadcastHandler handler;
        bool retired = false;
        {
            std::lock_guard lock(mutex);
            auto it = broadcast_subs.find(binding_id);
            if (it != broadcast_subs.end()) {
                handler = it->second.handler;
            } else {
                retired = retired_bindings.count(binding_id) > 0;
            }
        }
        if (!handler) {
            if (!retired) {
                auto weak = weak_from_this();
                loop.add_timer_after(std::chrono::milliseconds{1},
                                     [weak, binding_id, env = std::move(env)]() mutable {
                                         if (auto impl = weak.lock()) {
                                             impl->handle_broadcast(binding_id, std::move(env));
                                         }
                                     });
            }
            return;
        }
        handler_started_ms.store(steady_ms());
        try {
            handler(env.body, env.sender, env.subject, env.correlation_id);
        } catch (const std::exception& e) {
            // Fire-and-forget: a throwing subscriber cannot fail the sender.
            std::fprintf(stderr, "[commkit] broadcast handler raised: %s\n", e.what());
        } catch (...) {
            std::fprintf(stderr, "[commkit] broadcast handler raised\n");
        }
        handler_started_ms.store(0);
    }

    void handle_reply(Envelope env) {
        Future fut;
        {
            std::lock_guard lock(mutex);
            auto it = pending_replies.find(env.correlation_id);
            if (it == pending_replies.end()) {
                return;  // duplicate, timed out, or cancelled: drop
            }
            fut = it->second;
            pending_replies.erase(it);
        }
        try {
            auto outcome = parse_reply(env.body);
            if (auto* value = std::get_if<Value>(&outcome)) {
                fut.try_set_result(std::move(*value));
            } else {
                fut.try_set_error(std::get<ErrorInfo>(outcome));
            }
        } catch (const DecodeError& e) {
            fut.try_set_error({ErrorCategory::RemoteException, e.what()});
        }
    }

    void fail_pending(const ErrorInfo& info) {
        std::map<std::string, Future> doomed;
        {
            std::lock_guard lock(mutex);
            doomed.swap(pending_replies);
        }
        for (auto& [corr, fut] : doomed) {
            fut.try_set_error(info);
        }
    }

    BackendCallbacks make_callbacks() {
        auto weak = weak_from_this();
        BackendCallbacks cb;
        cb.on_task = [weak](Assignment assignment) {
            if (auto impl = weak.lock()) {
                impl->loop.post([weak, assignment = std::move(assignment)]() mutable {
                    if (auto impl2 = weak.lock()) {
                        impl2->handle_task(std::move(assignment));
                    }
                });
            }
        };
        cb.on_rpc = [weak](Envelope env, std::string reply_to) {
            if (auto impl = weak.lock()) {
                impl->loop.post(
                    [weak, env = std::move(env), reply_to = std::move(reply_to)]() mutable {
                        if (auto impl2 = weak.lock()) {
                            impl2->handle_rpc(std::move(env), std::move(reply_to));
                        }
                    });
            }
        };
        cb.on_broadcast = [weak](uint64_t binding_id, Envelope env) {
            if (auto impl = weak.lock()) {
                impl->loop.post([weak, binding_id, env = std::move(env)]() mutable {
                    if (auto impl2 = weak.lock()) {
                        impl2->handle_broadcast(binding_id, std::move(env));
                    }
                });
            }
        };
        cb.on_reply = [weak](Envelope env) {
            if (auto impl = weak.lock()) {
                impl->loop.post([weak, env = std::move(env)]() mutable {
                    if (auto impl2 = weak.lock()) {
                        impl2->handle_reply(std::move(env));
                    }
                });
            }
        };
        cb.on_connection_lost = [weak](ErrorInfo info) {
            if (auto impl = weak.lock()) {
                impl->fail_pending(info);
            }
        };
        return cb;
    }

    // ---- outbound operations (any user thread) --------------------------

    Future task_send(Value payload, bool no_reply) {
        ensure_open();
        Envelope env;
        env.kind = MessageKind::Task;
        env.correlation_id = new_correlation_id();
        env.body = std::move(payload);
        env.no_reply = no_reply;

        Future fut;
        if (!no_reply) {
            std::lock_guard lock(mutex);
            pending_replies.emplace(env.correlation_id, fut);
        }
        auto weak = weak_from_this();
        std::string corr = env.correlation_id;
        try {
            backend->publish_task(
                env, [weak, corr, no_reply, fut](bool ok, const ErrorInfo& info) mutable {
                    if (ok) {
                        if (no_reply) {
                            fut.try_set_result(Value(nullptr));
                        }
                        return;
                    }
                    if (auto impl = weak.lock()) {
                        std::lock_guard lock(impl->mutex);
                        impl->pending_replies.erase(corr);
                    }
                    fut.try_set_error(info);
                });
        } catch (...) {
            if (!no_reply) {
                std::lock_guard lock(mutex);
                pending_replies.erase(corr);
            }
            throw;
        }
        return fut;
    }

    SubscriberToken add_task_subscriber(TaskHandler handler) {
        ensure_open();
        std::string consumer = backend->add_task_consumer(opts.prefetch);
        std::lock_guard lock(mutex);
        uint64_t token = next_token++;
        task_subs.emplace(consumer, TaskSub{token, std::move(handler)});
        return {token, SubscriberKind::Task};
    }

    void remove_task_subscriber(const SubscriberToken& token) {
        if (token.kind != SubscriberKind::Task) {
            throw UnknownSubscriberError("token does not identify a task subscriber");
        }
        std::string consumer;
        {
            std::lock_guard lock(mutex);
            for (auto it = task_subs.begin(); it != task_subs.end(); ++it) {
                if (it->second.token == token.id) {
                    consumer = it->first;
                    task_subs.erase(it);
                    break;
                }
            }
            if (consumer.empty()) {
                throw UnknownSubscriberError("task subscriber token is unknown or already removed");
            }
            retired_consumers.insert(consumer);
        }
        backend->remove_task_consumer(consumer);
    }

    Future rpc_send(const std::string& recipient_id, Value payload,
                    std::optional<std::chrono::milliseconds> timeout) {
        ensure_open();
        if (recipient_id.empty()) {
            throw Error("rpc recipient_id must be non-empty");
        }
        Envelope env;
        env.kind = MessageKind::RpcRequest;
        env.correlation_id = new_correlation_id();
        env.recipient_id = recipient_id;
        env.body = std::move(payload);

        Future fut;
        std::string corr = env.correlation_id;
        {
            std::lock_guard lock(mutex);
            pending_replies.emplace(corr, fut);
        }
        try {
            backend->publish_rpc(recipient_id, env);
        } catch (...) {
            std::lock_guard lock(mutex);
            pending_replies.erase(corr);
            throw;
        }
        if (timeout) {
            auto weak = weak_from_this();
            loop.add_timer_after(*timeout, [weak, corr] {
                if (auto impl = weak.lock()) {
                    Future doomed;
                    bool found = false;
                    {
                        std::lock_guard lock(impl->mutex);
                        auto it = impl->pending_replies.find(corr);
                        if (it != impl->pending_replies.end()) {
                            doomed = it->second;
                            impl->pending_replies.erase(it);
                            found = true;
                        }
                    }
                    if (found) {
                        doomed.try_set_error(
                            {ErrorCategory::Timeout, "no RPC reply within the requested timeout"});
                    }
                }
            });
        }
        return fut;
    }

    void add_rpc_subscriber(const std::string& identifier, RpcHandler handler) {
        ensure_open();
        if (identifier.empty()) {
            throw Error("rpc identifier must be non-empty");
        }
        {
            std::lock_guard lock(mutex);
            auto [it, inserted] = rpc_handlers.emplace(identifier, std::move(handler));
            if (!inserted) {
                throw DuplicateIdentifierError("identifier '" + identifier +
                                               "' already registered on this communicator");
            }
        }
        try {
            backend->add_rpc_queue(identifier);
        } catch (...) {
            std::lock_guard lock(mutex);
            rpc_handlers.erase(identifier);
            throw;
        }
    }

    void remove_rpc_subscriber(const std::string& identifier) {
        {
            std::lock_guard lock(mutex);
            if (rpc_handlers.erase(identifier) == 0) {
                throw UnknownSubscriberError("identifier '" + identifier +
                                             "' is not registered on this communicator");
            }
        }
        backend->remove_rpc_queue(identifier);
    }

    bool broadcast_send(Value body, std::optional<std::string> sender,
                        std::optional<std::string> subject,
                        std::optional<std::string> correlation_id) {
        ensure_open();
        Envelope env;
        env.kind = MessageKind::Broadcast;
        env.correlation_id =
            correlation_id && !correlation_id->empty() ? *correlation_id : new_correlation_id();
        env.sender = std::move(sender);
        env.subject = std::move(subject);
        env.body = std::move(body);
        env.no_reply = true;  // fire-and-forget: no reply path exists

        Future confirmed;
        backend->publish_broadcast(env, [confirmed](bool ok, const ErrorInfo& info) mutable {
            if (ok) {
                confirmed.try_set_result(true);
            } else {
                confirmed.try_set_error(info);
            }
        });
        return confirmed.await().get<bool>();
    }

    SubscriberToken add_broadcast_subscriber(BroadcastFilter filter, BroadcastHandler handler) {
        ensure_open();
        uint64_t binding = backend->add_broadcast_binding(filter);
        std::lock_guard lock(mutex);
        uint64_t token = next_token++;
        broadcast_subs.emplace(binding, BroadcastSub{token, std::move(handler)});
        return {token, SubscriberKind::Broadcast};
    }

    void remove_broadcast_subscriber(const SubscriberToken& token) {
        if (token.kind != SubscriberKind::Broadcast) {
            throw UnknownSubscriberError("token does not identify a broadcast subscriber");
        }
        uint64_t binding = 0;
        {
            std::lock_guard lock(mutex);
            bool found = false;
            for (auto it = broadcast_subs.begin(); it != broadcast_subs.end(); ++it) {
                if (it->second.token == token.id) {
                    binding = it->first;
                    broadcast_subs.erase(it);
                    found = true;
                    break;
                }
            }
            if (!found) {
                throw UnknownSubscriberError(
                    "broadcast subscriber token is unknown or already removed");
            }
            retired_bindings.insert(binding);
        }
        backend->remove_broadcast_binding(binding);
    }

    // ---- shutdown --------------------------------------------------------

    void start_watchdog() {
        if (!opts.watchdog) {
            return;
        }
        watchdog = std::thread([this] {
            auto interval = std::chrono::milliseconds(
                std::max<int64_t>(opts.heartbeat.count() / 2, 10));
            int64_t warned_for = 0;
            std::unique_lock lock(watchdog_mutex);
            while (!watchdog_cv.wait_for(lock, interval, [this] { return watchdog_stop; })) {
                int64_t started = handler_started_ms.load();
                if (started != 0 && started != warned_for &&
                    steady_ms() - started >= opts.heartbeat.count()) {
                    std::fprintf(stderr,
                                 "[commkit] warning: a handler has blocked the communication "
                                 "thread for over one heartbeat interval (%lld ms); move long "
                                 "work onto another thread\n",
                                 static_cast<long long>(opts.heartbeat.count()));
                    warned_for = started;
                }
            }
        });
    }

    void stop_watchdog() {
        {
            std::lock_guard lock(watchdog_mutex);
            watchdog_stop = true;
        }
        watchdog_cv.notify_all();
        if (watchdog.joinable()) {
            watchdog.join();
        }
    }

    /// Shared by close(), kill() and the destructor. `grace` = 0 means
    /// abrupt: no waiting, unacked deliveries go straight back.
    void teardown(std::chrono::milliseconds grace, const ErrorInfo& pending_error) {
        State expected = State::Open;
        if (!state.compare_exchange_strong(expected, State::Closing)) {
            return;
        }
        stop_watchdog();

        std::vector<std::string> consumers;
        std::vector<std::string> rpc_ids;
        std::vector<uint64_t> bindings;
        {
            std::lock_guard lock(mutex);
            for (auto& [consumer, sub] : task_subs) {
                consumers.push_back(consumer);
            }
            for (auto& [identifier, handler] : rpc_handlers) {
                rpc_ids.push_back(identifier);
            }
            for (auto& [binding, sub] : broadcast_subs) {
                bindings.push_back(binding);
            }
        }
        // Stop inbound traffic: no new routes, no new assignments.
        for (const auto& identifier : rpc_ids) {
            try {
                backend->remove_rpc_queue(identifier);
            } catch (const Error&) {
            }
        }
        for (uint64_t binding : bindings) {
            try {
                backend->remove_broadcast_binding(binding);
            } catch (const Error&) {
            }
        }
        for (const auto& consumer : consumers) {
            try {
                backend->remove_task_consumer(consumer);
            } catch (const Error&) {
            }
        }
        // Let running handlers (including deferred completions) finish.
        // When a handler itself calls close() we are already on the loop
        // thread; waiting for ourselves would stall for the whole grace.
        bool on_comm_thread = loop.on_loop_thread();
        if (!on_comm_thread) {
            auto deadline = std::chrono::steady_clock::now() + grace;
            while (std::chrono::steady_clock::now() < deadline &&
                   (loop.busy() || outstanding.load() > 0)) {
                std::this_thread::sleep_for(std::chrono::milliseconds{1});
            }
        }
        // Whatever is still unacknowledged goes back for requeue.
        for (const auto& consumer : consumers) {
            try {
                backend->drop_task_consumer(consumer);
            } catch (const Error&) {
            }
        }
        {
            std::lock_guard lock(mutex);
            task_subs.clear();
            rpc_handlers.clear();
            broadcast_subs.clear();
            for (const auto& consumer : consumers) {
                retired_consumers.insert(consumer);
            }
            for (uint64_t binding : bindings) {
                retired_bindings.insert(binding);
            }
        }
        fail_pending(pending_error);
        try {
            backend->close();
        } catch (const Error&) {
        }
        state.store(State::Closed);
        loop.request_stop();
        // A handler stuck past the grace keeps the loop thread hostage;
        // the loop detaches it on destruction.
        if (!on_comm_thread) {
            loop.join_for(std::chrono::milliseconds{2'000});
        }
    }
};

Communicator::Impl& Communicator::impl() const {
    if (!impl_) {
        throw Error("communicator is not connected");
    }
    return *impl_;
}

Communicator Communicator::connect(const std::string& uri, ConnectOptions opts) {
    BrokerUri parsed = parse_broker_uri(uri);
    if (opts.prefetch < 1) {
        throw Error("prefetch must be at least 1");
    }
    if (opts.heartbeat.count() <= 0) {
        throw Error("heartbeat interval must be positive");
    }
    auto impl = std::make_shared<Impl>();
    impl->uri_text = uri;
    impl->opts = opts;
    BackendCallbacks callbacks = impl->make_callbacks();
    if (parsed.scheme == "local") {
        impl->backend = std::make_unique<LocalSession>(LocalBroker::named(parsed.name),
                                                       opts, std::move(callbacks));
    } else {
        impl->backend = make_amqp_backend(parsed, opts, impl->loop, std::move(callbacks));
    }
    impl->loop.start();
    try {
        impl->backend->open();
    } catch (...) {
        impl->state.store(Impl::State::Closed);
        impl->loop.request_stop();
        impl->loop.join_for(std::chrono::milliseconds{1'000});
        throw;
    }
    impl->start_watchdog();
    return Communicator(std::move(impl));
}

Future Communicator::task_send(Value payload, bool no_reply) {
    return impl().task_send(std::move(payload), no_reply);
}

SubscriberToken Communicator::add_task_subscriber(TaskHandler handler) {
    return impl().add_task_subscriber(std::move(handler));
}

void Communicator::remove_task_subscriber(const SubscriberToken& token) {
    impl().remove_task_subscriber(token);
}

Future Communicator::rpc_send(const std::string& recipient_id, Value payload,
                              std::optional<std::chrono::milliseconds> timeout) {
    return impl().rpc_send(recipient_id, std::move(payload), timeout);
}

void Communicator::add_rpc_subscriber(const std::string& identifier, RpcHandler handler) {
    impl().add_rpc_subscriber(identifier, std::move(handler));
}

void Communicator::remove_rpc_subscriber(const std::string& identifier) {
    impl().remove_rpc_subscriber(identifier);
}

bool Communicator::broadcast_send(Value body, std::optional<std::string> sender,
                                  std::optional<std::string> subject,
                                  std::optional<std::string> correlation_id) {
    return impl().broadcast_send(std::move(body), std::move(sender), std::move(subject),
                                 std::move(correlation_id));
}

SubscriberToken Communicator::add_broadcast_subscriber(BroadcastFilter filter,
                                                       BroadcastHandler handler) {
    return impl().add_broadcast_subscriber(std::move(filter), std::move(handler));
}

void Communicator::remove_broadcast_subscriber(const SubscriberToken& token) {
    impl().remove_broadcast_subscriber(token);
}

void Communicator::close(std::chrono::milliseconds grace) {
    if (impl_) {
        impl_->teardown(grace, ErrorInfo{ErrorCategory::Cancelled, "communicator closed"});
    }
}

void Communicator::kill() {
    if (impl_) {
        impl_->teardown(std::chrono::milliseconds{0},
                        ErrorInfo{ErrorCategory::ConnectionLost, "communicator killed"});
    }
}

bool Communicator::is_open() const {
    return impl_ && impl_->state.load() == Impl::State::Open;
}

const std::string& Communicator::uri() const { return impl().uri_text; }

const ConnectOptions& Communicator::options() const { return impl().opts; }

Communicator connect(const std::string& uri, ConnectOptions opts) {
    return Communicator::connect(uri, std::move(opts));
}

}  // namespace commkit
