#pragma once

#include <memory>
#include <mutex>
#include <set>
#include <string>

#include "commkit/backend.hpp"
#include "commkit/local_broker.hpp"

namespace commkit {

/// In-process transport: one communicator's session against a LocalBroker.
/// Tracks what it registered so close() can tear everything down, and
/// round-trips every published envelope through the wire encoding so both
/// transports accept exactly the same payloads.
class LocalSession : public Backend {
public:
    LocalSession(std::shared_ptr<LocalBroker> broker, const ConnectOptions& opts,
                 BackendCallbacks callbacks);

    void open() override;
    void close() override;

    void publish_task(const Envelope& env, PublishConfirm confirm) override;
    std::string add_task_consumer(int prefetch) override;
    void remove_task_consumer(const std::string& consumer_id) override;
    void drop_task_consumer(const std::string& consumer_id) override;
    void ack(const std::string& consumer_id, uint64_t tag) override;
    void reject(const std::string& consumer_id, uint64_t tag, bool requeue) override;

    void publish_rpc(const std::string& recipient_id, const Envelope& env) override;
    void add_rpc_queue(const std::string& identifier) override;
    void remove_rpc_queue(const std::string& identifier) override;

    void publish_broadcast(const Envelope& env, PublishConfirm confirm) override;
    uint64_t add_broadcast_binding(const BroadcastFilter& filter) override;
    void remove_broadcast_binding(uint64_t binding_id) override;

    void publish_reply(const std::string& reply_to, const Envelope& env) override;
    const std::string& reply_address() const override { return reply_address_; }

    const std::string& task_queue_name() const { return task_queue_; }
    LocalBroker& broker() { return *broker_; }

private:
    std::string rpc_queue_name(const std::string& identifier) const;

    std::shared_ptr<LocalBroker> broker_;
    BackendCallbacks callbacks_;
    std::string namespace_prefix_;
    std::string task_queue_;
    std::string exchange_;
    std::string reply_address_;

    // Registrations owned by this session, for teardown.
    std::mutex mutex_;
    std::set<std::string> consumers_;
    std::set<std::string> rpc_queues_;
    std::set<uint64_t> bindings_;
    bool closed_ = false;
};

}  // namespace commkit
