#include "fake_amqp_server.hpp"

#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <thread>
#include <variant>
#include <vector>

#include "amqp/protocol.hpp"

namespace amqp = commkit::amqp;

namespace {

/// AMQP topic match: '.'-separated words, '*' = exactly one word,
/// '#' = zero or more words. Independent of the client's binding logic.
bool topic_match_words(const std::vector<std::string>& pattern, size_t pi,
                       const std::vector<std::string>& words, size_t wi) {
    if (pi == pattern.size()) {
        return wi == words.size();
    }
    if (pattern[pi] == "#") {
        for (size_t skip = wi; skip <= words.size(); ++skip) {
            if (topic_match_words(pattern, pi + 1, words, skip)) {
                return true;
            }
        }
        return false;
    }
    if (wi == words.size()) {
        return false;
    }
    if (pattern[pi] != "*" && pattern[pi] != words[wi]) {
        return false;
    }
    return topic_match_words(pattern, pi + 1, words, wi + 1);
}

std::vector<std::string> split_words(const std::string& key) {
    std::vector<std::string> words;
    size_t start = 0;
    while (true) {
        size_t dot = key.find('.', start);
        if (dot == std::string::npos) {
            words.push_back(key.substr(start));
            return words;
        }
        words.push_back(key.substr(start, dot - start));
        start = dot + 1;
    }
}

bool topic_match(const std::string& pattern, const std::string& key) {
    return topic_match_words(split_words(pattern), 0, split_words(key), 0);
}

int64_t steady_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

struct FakeAmqpServer::Impl {
    // ---- broker data model -------------------------------------------------

    struct Message {
        std::string body;
        amqp::BasicProperties props;
        std::string exchange;
        std::string routing_key;
        bool redelivered = false;
    };

    struct Consumer {
        int conn = -1;
        uint16_t channel = 0;
        std::string tag;
        bool no_ack = false;
    };

    struct Queue {
        bool durable = false;
        bool exclusive = false;
        bool auto_delete = false;
        int owner = -1;  // connection id for exclusive queues
        bool ever_consumed = false;
        std::deque<Message> messages;
        std::vector<Consumer> consumers;
        size_t rr = 0;  // round-robin cursor
    };

    struct Binding {
        std::string queue;
        std::string exchange;
        std::string pattern;
    };

    struct Unacked {
        Message msg;
        std::string queue;
    };

    struct ChannelState {
        bool open = false;
        bool confirm = false;
        uint64_t publish_seq = 0;  // inbound publishes, for confirms
        uint64_t deliver_seq = 0;  // outbound delivery tags
        uint16_t prefetch = 0;     // 0 = unlimited
        bool in_content = false;
        amqp::BasicPublish publish;
        amqp::ContentHeader header;
        std::string body;
        std::map<uint64_t, Unacked> unacked;
    };

    enum class Stage { WaitHeader, WaitStartOk, WaitTuneOk, WaitOpen, Ready };

    struct Conn {
        int fd = -1;
        int id = 0;
        Stage stage = Stage::WaitHeader;
        std::string in;
        std::string out;
        bool dead = false;
        std::map<uint16_t, ChannelState> channels;
    };

    // ---- lifecycle --------------------------------------------------------

    explicit Impl(Config config) : cfg(std::move(config)) {
        listen_fd = ::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
        if (listen_fd < 0) {
            throw std::runtime_error("fake broker: socket failed");
        }
        int one = 1;
        ::setsockopt(listen_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        addr.sin_port = 0;
        if (::bind(listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
            ::listen(listen_fd, 16) != 0) {
            ::close(listen_fd);
            throw std::runtime_error("fake broker: bind/listen failed");
        }
        socklen_t len = sizeof(addr);
        ::getsockname(listen_fd, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
        if (::pipe2(wake, O_NONBLOCK | O_CLOEXEC) != 0) {
            ::close(listen_fd);
            throw std::runtime_error("fake broker: pipe failed");
        }
        heartbeat_send_ms = cfg.heartbeat_send_ms;
        thread = std::thread([this] { run(); });
    }

    ~Impl() {
        stop();
        ::close(listen_fd);
        ::close(wake[0]);
        ::close(wake[1]);
    }

    void stop() {
        bool expected = false;
        if (!stopping.compare_exchange_strong(expected, true)) {
            if (thread.joinable()) {
                thread.join();
            }
            return;
        }
        poke();
        if (thread.joinable()) {
            thread.join();
        }
    }

    void poke() const {
        char b = 'w';
        [[maybe_unused]] ssize_t rc = ::write(wake[1], &b, 1);
    }

    void post(std::function<void()> fn) {
        {
            std::lock_guard lock(mutex);
            commands.push_back(std::move(fn));
        }
        poke();
    }

    // ---- event loop --------------------------------------------------------

    void run() {
        int64_t next_heartbeat = steady_ms() + heartbeat_ms();
        while (!stopping.load()) {
            std::vector<pollfd> fds;
            fds.push_back({listen_fd, POLLIN, 0});
            fds.push_back({wake[0], POLLIN, 0});
            {
                std::lock_guard lock(mutex);
                for (auto& [id, conn] : conns) {
                    short events = POLLIN;
                    if (!conn.out.empty()) {
                        events |= POLLOUT;
                    }
                    fds.push_back({conn.fd, events, 0});
                }
            }
            int timeout = 10;
            ::poll(fds.data(), fds.size(), timeout);

            if (fds[1].revents & POLLIN) {
                char buf[64];
                while (::read(wake[0], buf, sizeof(buf)) > 0) {
                }
            }

            std::lock_guard lock(mutex);
            std::deque<std::function<void()>> pending;
            pending.swap(commands);
            for (auto& fn : pending) {
                fn();
            }

            if (fds[0].revents & POLLIN) {
                accept_clients();
            }

            size_t idx = 2;
            std::vector<int> order;
            for (auto& [id, conn] : conns) {
                order.push_back(id);
            }
            // fds[2..] were built from the same iteration order.
            for (int id : order) {
                if (idx >= fds.size()) {
                    break;
                }
                pollfd& pfd = fds[idx++];
                auto it = conns.find(id);
                if (it == conns.end() || it->second.fd != pfd.fd) {
                    continue;  // replaced during command processing
                }
                Conn& conn = it->second;
                if (pfd.revents & (POLLERR | POLLNVAL | POLLHUP)) {
                    conn.dead = true;
                }
                if (!conn.dead && (pfd.revents & POLLIN)) {
                    read_from(conn);
                }
                if (!conn.dead && (pfd.revents & POLLOUT)) {
                    flush(conn);
                }
            }
            reap_dead();

            int64_t now = steady_ms();
            if (now >= next_heartbeat) {
                next_heartbeat = now + heartbeat_ms();
                if (heartbeat_send_ms > 0) {
                    amqp::Frame hb;
                    hb.type = amqp::kFrameHeartbeat;
                    for (auto& [id, conn] : conns) {
                        if (conn.stage == Stage::Ready) {
                            conn.out += amqp::encode_frame(hb);
                            flush(conn);
                        }
                    }
                }
            }
            reap_dead();
        }
        std::lock_guard lock(mutex);
        for (auto& [id, conn] : conns) {
            ::close(conn.fd);
        }
        conns.clear();
    }

    int heartbeat_ms() const {
        return heartbeat_send_ms > 0 ? heartbeat_send_ms : 50;
    }

    void accept_clients() {
        while (true) {
            int fd = ::accept4(listen_fd, nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
            if (fd < 0) {
                return;
            }
            int one = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
            Conn conn;
            conn.fd = fd;
            conn.id = ++conn_serial;
            total_conns++;
            conns.emplace(conn.id, std::move(conn));
        }
    }

    void read_from(Conn& conn) {
        char buf[65536];
        while (true) {
            ssize_t rc = ::recv(conn.fd, buf, sizeof(buf), 0);
            if (rc > 0) {
                conn.in.append(buf, static_cast<size_t>(rc));
                continue;
            }
            if (rc == 0) {
                conn.dead = true;
                return;
            }
            if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) {
                break;
            }
            conn.dead = true;
            return;
        }
        try {
            process(conn);
        } catch (const std::exception&) {
            conn.dead = true;  // protocol garbage: cut the peer loose
        }
    }

    void process(Conn& conn) {
        if (conn.stage == Stage::WaitHeader) {
            if (conn.in.size() < amqp::kProtocolHeader.size()) {
                return;
            }
            if (conn.in.compare(0, amqp::kProtocolHeader.size(),
                                amqp::kProtocolHeader) != 0) {
                conn.dead = true;
                return;
            }
            conn.in.erase(0, amqp::kProtocolHeader.size());
            amqp::ConnectionStart start;
            start.server_properties["product"] = "fake-broker";
            send(conn, 0, start);
            conn.stage = Stage::WaitStartOk;
        }
        while (!conn.dead) {
            auto frame = amqp::try_parse_frame(conn.in);
            if (!frame) {
                return;
            }
            handle_frame(conn, *frame);
        }
    }

    void handle_frame(Conn& conn, const amqp::Frame& frame) {
        if (frame.type == amqp::kFrameHeartbeat) {
            return;
        }
        if (frame.type == amqp::kFrameHeader) {
            auto& ch = conn.channels[frame.channel];
            if (!ch.in_content) {
                conn.dead = true;
                return;
            }
            ch.header = amqp::decode_content_header(frame.payload);
            if (ch.header.body_size == 0) {
                finish_publish(conn, frame.channel);
            }
            return;
        }
        if (frame.type == amqp::kFrameBody) {
            auto& ch = conn.channels[frame.channel];
            if (!ch.in_content) {
                conn.dead = true;
                return;
            }
            ch.body += frame.payload;
            if (ch.body.size() >= ch.header.body_size) {
                finish_publish(conn, frame.channel);
            }
            return;
        }
        amqp::Method m = amqp::decode_method(frame.payload);
        handle_method(conn, frame.channel, m);
    }

    void handle_method(Conn& conn, uint16_t channel, const amqp::Method& m) {
        using namespace amqp;
        switch (conn.stage) {
            case Stage::WaitStartOk: {
                const auto* ok = std::get_if<ConnectionStartOk>(&m);
                if (!ok) {
                    conn.dead = true;
                    return;
                }
                std::string expected = plain_auth_response(cfg.username, cfg.password);
                if (ok->mechanism != "PLAIN" || ok->response != expected) {
                    send(conn, 0,
                         ConnectionClose{403, "ACCESS_REFUSED - login refused", 10, 11});
                    conn.stage = Stage::Ready;  // await close-ok / EOF
                    return;
                }
                ConnectionTune tune;
                tune.channel_max = 2047;
                tune.frame_max = cfg.frame_max;
                tune.heartbeat = cfg.tune_heartbeat;
                send(conn, 0, tune);
                conn.stage = Stage::WaitTuneOk;
                return;
            }
            case Stage::WaitTuneOk: {
                if (!std::holds_alternative<ConnectionTuneOk>(m)) {
                    conn.dead = true;
                    return;
                }
                conn.stage = Stage::WaitOpen;
                return;
            }
            case Stage::WaitOpen: {
                if (!std::holds_alternative<ConnectionOpen>(m)) {
                    conn.dead = true;
                    return;
                }
                send(conn, 0, ConnectionOpenOk{});
                conn.stage = Stage::Ready;
                return;
            }
            case Stage::WaitHeader:
                conn.dead = true;
                return;
            case Stage::Ready:
                break;
        }

        if (const auto* open = std::get_if<ChannelOpen>(&m)) {
            (void)open;
            conn.channels[channel].open = true;
            send(conn, channel, ChannelOpenOk{});
            return;
        }
        if (std::holds_alternative<ChannelCloseOk>(m)) {
            conn.channels.erase(channel);  // we closed it earlier
            return;
        }
        if (const auto* close = std::get_if<ChannelClose>(&m)) {
            (void)close;
            release_channel(conn, channel);
            conn.channels.erase(channel);
            send(conn, channel, ChannelCloseOk{});
            return;
        }
        if (const auto* close = std::get_if<ConnectionClose>(&m)) {
            (void)close;
            send(conn, 0, ConnectionCloseOk{});
            flush(conn);
            conn.dead = true;
            return;
        }
        if (std::holds_alternative<ConnectionCloseOk>(m)) {
            conn.dead = true;
            return;
        }
        if (std::holds_alternative<ConfirmSelect>(m)) {
            conn.channels[channel].confirm = true;
            send(conn, channel, ConfirmSelectOk{});
            return;
        }
        if (const auto* declare = std::get_if<ExchangeDeclare>(&m)) {
            exchanges[declare->exchange] = declare->type;
            send(conn, channel, ExchangeDeclareOk{});
            return;
        }
        if (const auto* declare = std::get_if<QueueDeclare>(&m)) {
            auto it = queues.find(declare->queue);
            if (it != queues.end() && it->second.exclusive &&
                it->second.owner != conn.id) {
                channel_error(conn, channel, 405,
                              "RESOURCE_LOCKED - cannot obtain exclusive access to "
                              "locked queue '" + declare->queue + "'",
                              50, 10);
                return;
            }
            if (it == queues.end()) {
                Queue q;
                q.durable = declare->durable;
                q.exclusive = declare->exclusive;
                q.auto_delete = declare->auto_delete;
                q.owner = declare->exclusive ? conn.id : -1;
                it = queues.emplace(declare->queue, std::move(q)).first;
            }
            QueueDeclareOk ok;
            ok.queue = declare->queue;
            ok.message_count = static_cast<uint32_t>(it->second.messages.size());
            ok.consumer_count = static_cast<uint32_t>(it->second.consumers.size());
            send(conn, channel, ok);
            return;
        }
        if (const auto* bind = std::get_if<QueueBind>(&m)) {
            if (queues.count(bind->queue) == 0) {
                channel_error(conn, channel, 404,
                              "NOT_FOUND - no queue '" + bind->queue + "'", 50, 20);
                return;
            }
            bindings.push_back({bind->queue, bind->exchange, bind->routing_key});
            send(conn, channel, QueueBindOk{});
            return;
        }
        if (const auto* unbind = std::get_if<QueueUnbind>(&m)) {
            for (auto it = bindings.begin(); it != bindings.end(); ++it) {
                if (it->queue == unbind->queue && it->exchange == unbind->exchange &&
                    it->pattern == unbind->routing_key) {
                    bindings.erase(it);
                    break;
                }
            }
            send(conn, channel, QueueUnbindOk{});
            return;
        }
        if (const auto* qos = std::get_if<BasicQos>(&m)) {
            conn.channels[channel].prefetch = qos->prefetch_count;
            send(conn, channel, BasicQosOk{});
            return;
        }
        if (const auto* consume = std::get_if<BasicConsume>(&m)) {
            auto it = queues.find(consume->queue);
            if (it == queues.end()) {
                channel_error(conn, channel, 404,
                              "NOT_FOUND - no queue '" + consume->queue + "'", 60, 20);
                return;
            }
            if (it->second.exclusive && it->second.owner != conn.id) {
                channel_error(conn, channel, 405,
                              "RESOURCE_LOCKED - cannot obtain exclusive access to "
                              "locked queue '" + consume->queue + "'",
                              60, 20);
                return;
            }
            Consumer consumer;
            consumer.conn = conn.id;
            consumer.channel = channel;
            consumer.tag = consume->consumer_tag;
            consumer.no_ack = consume->no_ack;
            it->second.consumers.push_back(consumer);
            it->second.ever_consumed = true;
            send(conn, channel, BasicConsumeOk{consume->consumer_tag});
            dispatch(it->first);
            return;
        }
        if (const auto* cancel = std::get_if<BasicCancel>(&m)) {
            for (auto& [name, queue] : queues) {
                auto& cs = queue.consumers;
                for (auto it = cs.begin(); it != cs.end(); ++it) {
                    if (it->conn == conn.id && it->tag == cancel->consumer_tag) {
                        cs.erase(it);
                        break;
                    }
                }
            }
            send(conn, channel, BasicCancelOk{cancel->consumer_tag});
            reap_auto_delete();
            return;
        }
        if (const auto* publish = std::get_if<BasicPublish>(&m)) {
            auto& ch = conn.channels[channel];
            ch.in_content = true;
            ch.publish = *publish;
            ch.body.clear();
            ch.header = {};
            return;
        }
        if (const auto* ack = std::get_if<BasicAck>(&m)) {
            settle(conn, channel, ack->delivery_tag, ack->multiple, false, false);
            return;
        }
        if (const auto* reject = std::get_if<BasicReject>(&m)) {
            settle(conn, channel, reject->delivery_tag, false, true, reject->requeue);
            return;
        }
        if (const auto* nack = std::get_if<BasicNack>(&m)) {
            settle(conn, channel, nack->delivery_tag, nack->multiple, true, nack->requeue);
            return;
        }
        // Anything else is a client bug for this test double.
        conn.dead = true;
    }

    void finish_publish(Conn& conn, uint16_t channel) {
        auto& ch = conn.channels[channel];
        ch.in_content = false;
        Message msg;
        msg.body = std::move(ch.body);
        ch.body.clear();
        msg.props = ch.header.properties;
        msg.exchange = ch.publish.exchange;
        msg.routing_key = ch.publish.routing_key;
        uint64_t seq = ++ch.publish_seq;

        std::vector<std::string> touched = route(msg);
        if (touched.empty() && ch.publish.mandatory) {
            amqp::BasicReturn ret;
            ret.exchange = msg.exchange;
            ret.routing_key = msg.routing_key;
            send(conn, channel, ret);
            send_content(conn, channel, msg);
        }
        if (ch.confirm) {
            send(conn, channel, amqp::BasicAck{seq, false});
        }
        for (const auto& name : touched) {
            dispatch(name);
        }
    }

    std::vector<std::string> route(const Message& msg) {
        std::vector<std::string> touched;
        if (msg.exchange.empty()) {
            auto it = queues.find(msg.routing_key);
            if (it != queues.end()) {
                it->second.messages.push_back(msg);
                touched.push_back(it->first);
            }
            return touched;
        }
        for (const auto& binding : bindings) {
            if (binding.exchange != msg.exchange) {
                continue;
            }
            if (!topic_match(binding.pattern, msg.routing_key)) {
                continue;
            }
            auto it = queues.find(binding.queue);
            if (it == queues.end()) {
                continue;
            }
            it->second.messages.push_back(msg);
            touched.push_back(it->first);
        }
        return touched;
    }

    void dispatch(const std::string& name) {
        auto it = queues.find(name);
        if (it == queues.end()) {
            return;
        }
        Queue& queue = it->second;
        while (!queue.messages.empty() && !queue.consumers.empty()) {
            bool delivered = false;
            for (size_t probe = 0; probe < queue.consumers.size(); ++probe) {
                size_t slot = (queue.rr + probe) % queue.consumers.size();
                Consumer& consumer = queue.consumers[slot];
                auto conn_it = conns.find(consumer.conn);
                if (conn_it == conns.end() || conn_it->second.dead) {
                    continue;
                }
                Conn& conn = conn_it->second;
                ChannelState& ch = conn.channels[consumer.channel];
                if (!consumer.no_ack && ch.prefetch != 0 &&
                    ch.unacked.size() >= ch.prefetch) {
                    continue;
                }
                Message msg = std::move(queue.messages.front());
                queue.messages.pop_front();
                uint64_t tag = ++ch.deliver_seq;
                amqp::BasicDeliver deliver;
                deliver.consumer_tag = consumer.tag;
                deliver.delivery_tag = tag;
                deliver.redelivered = msg.redelivered;
                deliver.exchange = msg.exchange;
                deliver.routing_key = msg.routing_key;
                send(conn, consumer.channel, deliver);
                send_content(conn, consumer.channel, msg);
                if (!consumer.no_ack) {
                    ch.unacked.emplace(tag, Unacked{std::move(msg), name});
                }
                queue.rr = (slot + 1) % queue.consumers.size();
                delivered = true;
                break;
            }
            if (!delivered) {
                return;  // everyone at capacity or dead
            }
        }
    }

    void dispatch_all() {
        std::vector<std::string> names;
        for (auto& [name, queue] : queues) {
            names.push_back(name);
        }
        for (const auto& name : names) {
            dispatch(name);
        }
    }

    void settle(Conn& conn, uint16_t channel, uint64_t tag, bool multiple,
                bool negative, bool requeue) {
        auto& ch = conn.channels[channel];
        std::vector<uint64_t> tags;
        if (multiple) {
            for (auto& [t, u] : ch.unacked) {
                if (t <= tag) {
                    tags.push_back(t);
                }
            }
        } else if (ch.unacked.count(tag) != 0) {
            tags.push_back(tag);
        }
        bool requeued = false;
        for (uint64_t t : tags) {
            auto node = ch.unacked.extract(t);
            if (!negative) {
                continue;
            }
            Unacked& u = node.mapped();
            if (requeue) {
                auto it = queues.find(u.queue);
                if (it != queues.end()) {
                    u.msg.redelivered = true;
                    it->second.messages.push_front(std::move(u.msg));
                    requeued = true;
                }
            } else {
                dead_letter_count++;
            }
        }
        if (requeued || !tags.empty()) {
            dispatch_all();
        }
    }

    /// Requeues a channel's unacked deliveries (original order at the
    /// queue head) and removes its consumers.
    void release_channel(Conn& conn, uint16_t channel) {
        auto it = conn.channels.find(channel);
        if (it == conn.channels.end()) {
            return;
        }
        ChannelState& ch = it->second;
        for (auto rit = ch.unacked.rbegin(); rit != ch.unacked.rend(); ++rit) {
            auto queue = queues.find(rit->second.queue);
            if (queue != queues.end()) {
                rit->second.msg.redelivered = true;
                queue->second.messages.push_front(std::move(rit->second.msg));
            }
        }
        ch.unacked.clear();
        for (auto& [name, queue] : queues) {
            auto& cs = queue.consumers;
            cs.erase(std::remove_if(cs.begin(), cs.end(),
                                    [&](const Consumer& c) {
                                        return c.conn == conn.id &&
                                               c.channel == channel;
                                    }),
                     cs.end());
            queue.rr = cs.empty() ? 0 : queue.rr % cs.size();
        }
        reap_auto_delete();
        dispatch_all();
    }

    void channel_error(Conn& conn, uint16_t channel, uint16_t code,
                       const std::string& text, uint16_t cls, uint16_t mth) {
        release_channel(conn, channel);
        // Keep the entry until the peer's close-ok so content frames in
        // flight have somewhere to land; mark it closed for dispatch.
        conn.channels[channel].open = false;
        send(conn, channel, amqp::ChannelClose{code, text, cls, mth});
    }

    void drop_connection(Conn& conn) {
        std::vector<uint16_t> channels;
        for (auto& [id, ch] : conn.channels) {
            channels.push_back(id);
        }
        for (uint16_t ch : channels) {
            release_channel(conn, ch);
        }
        // Exclusive queues die with their owning connection.
        std::vector<std::string> doomed;
        for (auto& [name, queue] : queues) {
            if (queue.exclusive && queue.owner == conn.id) {
                doomed.push_back(name);
            }
        }
        for (const auto& name : doomed) {
            erase_queue(name);
        }
        ::close(conn.fd);
        last_disconnect = steady_ms();
        dispatch_all();
    }

    void erase_queue(const std::string& name) {
        queues.erase(name);
        bindings.erase(std::remove_if(bindings.begin(), bindings.end(),
                                      [&](const Binding& b) { return b.queue == name; }),
                       bindings.end());
    }

    void reap_auto_delete() {
        std::vector<std::string> doomed;
        for (auto& [name, queue] : queues) {
            if (queue.auto_delete && queue.ever_consumed && queue.consumers.empty()) {
                doomed.push_back(name);
            }
        }
        for (const auto& name : doomed) {
            erase_queue(name);
        }
    }

    void reap_dead() {
        std::vector<int> dead;
        for (auto& [id, conn] : conns) {
            if (conn.dead) {
                dead.push_back(id);
            }
        }
        for (int id : dead) {
            auto it = conns.find(id);
            if (it != conns.end()) {
                drop_connection(it->second);
                conns.erase(it);
            }
        }
    }

    // ---- frame output -----------------------------------------------------

    void send(Conn& conn, uint16_t channel, const amqp::Method& m) {
        amqp::Frame frame;
        frame.type = amqp::kFrameMethod;
        frame.channel = channel;
        frame.payload = amqp::encode_method(m);
        conn.out += amqp::encode_frame(frame);
        flush(conn);
    }

    void send_content(Conn& conn, uint16_t channel, const Message& msg) {
        amqp::ContentHeader header;
        header.body_size = msg.body.size();
        header.properties = msg.props;
        amqp::Frame hf;
        hf.type = amqp::kFrameHeader;
        hf.channel = channel;
        hf.payload = amqp::encode_content_header(header);
        conn.out += amqp::encode_frame(hf);
        const size_t chunk = 65536;
        for (size_t off = 0; off < msg.body.size(); off += chunk) {
            amqp::Frame bf;
            bf.type = amqp::kFrameBody;
            bf.channel = channel;
            bf.payload = msg.body.substr(off, chunk);
            conn.out += amqp::encode_frame(bf);
        }
        flush(conn);
    }

    void flush(Conn& conn) {
        while (!conn.out.empty()) {
            ssize_t rc = ::send(conn.fd, conn.out.data(), conn.out.size(), MSG_NOSIGNAL);
            if (rc > 0) {
                conn.out.erase(0, static_cast<size_t>(rc));
                continue;
            }
            if (rc < 0 && (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR)) {
                return;
            }
            conn.dead = true;
            return;
        }
    }

    // ---- shared state -------------------------------------------------------

    Config cfg;
    int listen_fd = -1;
    uint16_t port_ = 0;
    int wake[2] = {-1, -1};
    std::thread thread;
    std::atomic<bool> stopping{false};

    mutable std::mutex mutex;
    std::deque<std::function<void()>> commands;
    std::map<int, Conn> conns;
    int conn_serial = 0;
    int total_conns = 0;
    int heartbeat_send_ms = 50;
    int64_t last_disconnect = 0;
    size_t dead_letter_count = 0;

    std::map<std::string, Queue> queues;
    std::map<std::string, std::string> exchanges;
    std::vector<Binding> bindings;
};

FakeAmqpServer::FakeAmqpServer() : FakeAmqpServer(Config()) {}

FakeAmqpServer::FakeAmqpServer(Config config)
    : impl_(std::make_unique<Impl>(std::move(config))) {}

FakeAmqpServer::~FakeAmqpServer() { impl_->stop(); }

uint16_t FakeAmqpServer::port() const { return impl_->port_; }

std::string FakeAmqpServer::uri(const std::string& query) const {
    return "amqp://" + impl_->cfg.username + ":" + impl_->cfg.password + "@127.0.0.1:" +
           std::to_string(impl_->port_) + "/" + query;
}

void FakeAmqpServer::stop() { impl_->stop(); }

void FakeAmqpServer::drop_connections() {
    impl_->post([impl = impl_.get()] {
        for (auto& [id, conn] : impl->conns) {
            conn.dead = true;
        }
        impl->reap_dead();
    });
}

void FakeAmqpServer::set_heartbeat_send_ms(int ms) {
    impl_->post([impl = impl_.get(), ms] { impl->heartbeat_send_ms = ms; });
}

int FakeAmqpServer::live_connections() const {
    std::lock_guard lock(impl_->mutex);
    return static_cast<int>(impl_->conns.size());
}

int FakeAmqpServer::total_connections() const {
    std::lock_guard lock(impl_->mutex);
    return impl_->total_conns;
}

bool FakeAmqpServer::has_queue(const std::string& name) const {
    std::lock_guard lock(impl_->mutex);
    return impl_->queues.count(name) != 0;
}

bool FakeAmqpServer::has_exchange(const std::string& name) const {
    std::lock_guard lock(impl_->mutex);
    return impl_->exchanges.count(name) != 0;
}

size_t FakeAmqpServer::queue_depth(const std::string& name) const {
    std::lock_guard lock(impl_->mutex);
    auto it = impl_->queues.find(name);
    return it == impl_->queues.end() ? 0 : it->second.messages.size();
}

size_t FakeAmqpServer::dead_letters() const {
    std::lock_guard lock(impl_->mutex);
    return impl_->dead_letter_count;
}
