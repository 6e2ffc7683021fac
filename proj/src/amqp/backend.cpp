#include "backend_factory.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <variant>
#include <vector>

#include "amqp/protocol.hpp"
#include "amqp/rules.hpp"
#include "commkit/errors.hpp"
#include "commkit/reply.hpp"

#ifdef COMMKIT_HAVE_OPENSSL
#include <openssl/err.h>
#include <openssl/ssl.h>
#endif

namespace commkit {

namespace {

using namespace amqp;

int64_t now_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::string errno_text(const char* what) {
    return std::string(what) + ": " + std::strerror(errno);
}

/// Non-blocking TCP stream, optionally wrapped in TLS. Pure byte
/// shoveling; framing and protocol live in the owner.
class SocketStream {
  public:
    enum class Io { Ok, WantRead, WantWrite, Eof, Fail };

    ~SocketStream() { shutdown(); }

    bool begin_connect(const std::string& host, uint16_t port, std::string& err) {
        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo* res = nullptr;
        std::string service = std::to_string(port);
        int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res);
        if (rc != 0 || res == nullptr) {
            err = "cannot resolve '" + host + "': " + gai_strerror(rc);
            return false;
        }
        fd_ = ::socket(res->ai_family, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC,
                       res->ai_protocol);
        if (fd_ < 0) {
            err = errno_text("socket");
            ::freeaddrinfo(res);
            return false;
        }
        int one = 1;
        ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
        rc = ::connect(fd_, res->ai_addr, res->ai_addrlen);
        ::freeaddrinfo(res);
        if (rc == 0) {
            connected_ = true;
        } else if (errno != EINPROGRESS) {
            err = errno_text("connect");
            return false;
        }
        return true;
    }

    bool connect_done() const { return connected_; }

    /// After POLLOUT on a pending connect: 0 on success, errno otherwise.
    int finish_connect() {
        int soerr = 0;
        socklen_t len = sizeof(soerr);
        if (::getsockopt(fd_, SOL_SOCKET, SO_ERROR, &soerr, &len) != 0) {
            return errno;
        }
        if (soerr == 0) {
            connected_ = true;
        }
        return soerr;
    }

#ifdef COMMKIT_HAVE_OPENSSL
    bool start_tls(const std::string& host, std::string& err) {
        ctx_ = SSL_CTX_new(TLS_client_method());
        if (!ctx_) {
            err = "SSL_CTX_new failed";
            return false;
        }
        // Sandboxed/lab brokers mostly run self-signed certificates, so the
        // stream encrypts but does not authenticate the peer.
        SSL_CTX_set_verify(ctx_, SSL_VERIFY_NONE, nullptr);
        ssl_ = SSL_new(ctx_);
        if (!ssl_) {
            err = "SSL_new failed";
            return false;
        }
        SSL_set_tlsext_host_name(ssl_, host.c_str());
        SSL_set_fd(ssl_, fd_);
        SSL_set_connect_state(ssl_);
        return true;
    }

    Io continue_tls(std::string& err) {
        int rc = SSL_do_handshake(ssl_);
        if (rc == 1) {
            tls_ready_ = true;
            return Io::Ok;
        }
        return map_ssl_error(rc, err);
    }
#else
    bool start_tls(const std::string&, std::string& err) {
        err = "TLS requested but the library was built without OpenSSL";
        return false;
    }
    Io continue_tls(std::string& err) {
        err = "TLS not built";
        return Io::Fail;
    }
#endif

    bool tls_active() const {
#ifdef COMMKIT_HAVE_OPENSSL
        return ssl_ != nullptr;
#else
        return false;
#endif
    }

    Io read_some(std::string& into, std::string& err) {
        char buf[65536];
#ifdef COMMKIT_HAVE_OPENSSL
        if (ssl_) {
            int rc = SSL_read(ssl_, buf, sizeof(buf));
            if (rc > 0) {
                into.append(buf, static_cast<size_t>(rc));
                return Io::Ok;
            }
            return map_ssl_error(rc, err);
        }
#endif
        ssize_t rc = ::recv(fd_, buf, sizeof(buf), 0);
        if (rc > 0) {
            into.append(buf, static_cast<size_t>(rc));
            return Io::Ok;
        }
        if (rc == 0) {
            return Io::Eof;
        }
        if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) {
            return Io::WantRead;
        }
        err = errno_text("recv");
        return Io::Fail;
    }

    Io write_some(std::string_view data, size_t& wrote, std::string& err) {
        wrote = 0;
#ifdef COMMKIT_HAVE_OPENSSL
        if (ssl_) {
            int rc = SSL_write(ssl_, data.data(), static_cast<int>(data.size()));
            if (rc > 0) {
                wrote = static_cast<size_t>(rc);
                return Io::Ok;
            }
            return map_ssl_error(rc, err);
        }
#endif
        ssize_t rc = ::send(fd_, data.data(), data.size(), MSG_NOSIGNAL);
        if (rc >= 0) {
            wrote = static_cast<size_t>(rc);
            return Io::Ok;
        }
        if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) {
            return Io::WantWrite;
        }
        err = errno_text("send");
        return Io::Fail;
    }

    int fd() const { return fd_; }

    void shutdown() {
#ifdef COMMKIT_HAVE_OPENSSL
        if (ssl_) {
            SSL_free(ssl_);
            ssl_ = nullptr;
        }
        if (ctx_) {
            SSL_CTX_free(ctx_);
            ctx_ = nullptr;
        }
#endif
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
    }

  private:
#ifdef COMMKIT_HAVE_OPENSSL
    Io map_ssl_error(int rc, std::string& err) {
        int code = SSL_get_error(ssl_, rc);
        switch (code) {
            case SSL_ERROR_WANT_READ:
                return Io::WantRead;
            case SSL_ERROR_WANT_WRITE:
                return Io::WantWrite;
            case SSL_ERROR_ZERO_RETURN:
                return Io::Eof;
            case SSL_ERROR_SYSCALL:
                if (rc == 0) {
                    return Io::Eof;
                }
                err = errno_text("TLS syscall");
                return Io::Fail;
            default: {
                unsigned long e = ERR_get_error();
                char text[256] = "TLS failure";
                if (e != 0) {
                    ERR_error_string_n(e, text, sizeof(text));
                }
                err = text;
                return Io::Fail;
            }
        }
    }

    SSL_CTX* ctx_ = nullptr;
    SSL* ssl_ = nullptr;
#endif
    int fd_ = -1;
    bool connected_ = false;
    bool tls_ready_ = false;
};

/// Completion token for operations that block the calling thread until
/// the protocol round-trip finishes on the loop thread.
struct SyncWait {
    std::mutex m;
    std::condition_variable cv;
    bool done = false;
    std::exception_ptr error;

    void finish(std::exception_ptr e = nullptr) {
        {
            std::lock_guard lock(m);
            if (done) {
                return;
            }
            done = true;
            error = e;
        }
        cv.notify_all();
    }
};

/// In-flight inbound content: a deliver/return method waiting for its
/// header and body frames.
struct IncomingContent {
    bool active = false;
    Method method;
    ContentHeader header;
    std::string body;
};

enum class ChannelKind { Publish, Shared, Task, Scratch };

struct ChannelState {
    ChannelKind kind = ChannelKind::Scratch;
    std::string owner;   // task consumer id for ChannelKind::Task
    bool closing = false;  // we sent channel.close; only close-ok may follow
    /// FIFO of synchronous-method continuations, matched to responses
    /// in order. Called with exactly one of (method, error).
    std::deque<std::function<void(const Method*, std::exception_ptr)>> waiters;
    IncomingContent content;
};

struct OutboundPublish {
    std::string exchange;
    std::string routing_key;
    bool mandatory = false;
    BasicProperties props;
    std::string body;
    PublishConfirm confirm;                      // optional
    std::function<void(ErrorInfo)> on_dropped;   // optional, for RPC sends
};

struct TaskConsumer {
    int prefetch = 1;
    uint16_t channel = 0;     // 0 while disconnected
    uint64_t epoch = 0;       // bumped whenever the channel is replaced
    size_t unacked = 0;       // deliveries outstanding on the current channel
    bool cancelled = false;   // graceful remove requested
    bool consuming = false;
};

struct RpcRegistration {
    std::shared_ptr<SyncWait> pending;  // resolved once consuming
    bool consuming = false;
};

struct BroadcastSub {
    BroadcastFilter filter;
    std::string queue;
    std::shared_ptr<SyncWait> pending;
    bool consuming = false;
};

// Delivery tags handed to the communicator carry the consumer-channel
// epoch in the high bits so acknowledgements for deliveries that died
// with an old channel are dropped instead of poisoning the new one.
constexpr int kEpochShift = 48;
constexpr uint64_t kTagMask = (uint64_t{1} << kEpochShift) - 1;

class AmqpBackend final : public Backend {
  public:
    AmqpBackend(BrokerUri uri, ConnectOptions opts, EventLoop& loop,
                BackendCallbacks callbacks)
        : uri_(std::move(uri)),
          opts_(std::move(opts)),
          loop_(loop),
          cb_(std::move(callbacks)),
          topo_(make_topology(opts_)),
          reply_address_(topo_.reply_queue_prefix + new_correlation_id().substr(0, 12)),
          backoff_(std::random_device{}()) {}

    ~AmqpBackend() override {
        try {
            close();
        } catch (...) {
        }
    }

    // ---- lifecycle -----------------------------------------------------

    void open() override {
        auto wait = std::make_shared<SyncWait>();
        run_on_loop([this, wait] {
            if (state_ != LinkState::Idle) {
                wait->finish(std::make_exception_ptr(
                    ConnectionError("connection already opened")));
                return;
            }
            open_wait_ = wait;
            start_connect();
        });
        wait_on(wait, opts_.connect_timeout, "connect to " + endpoint_text());
    }

    void close() override {
        if (user_closed_.exchange(true)) {
            return;
        }
        if (!loop_.running()) {
            return;  // loop gone; sockets close with the stream
        }
        auto wait = std::make_shared<SyncWait>();
        auto begin_close = [this, wait] {
            close_wait_ = wait;
            cancel_timer(reconnect_timer_);
            cancel_timer(hb_timer_);
            cancel_timer(connect_timer_);
            if (state_ == LinkState::Open) {
                state_ = LinkState::Closing;
                send_method(0, ConnectionClose{200, "client closed", 0, 0});
                flush_out();
                expect(0, "connection.close-ok",
                       [this](const Method*, std::exception_ptr e) {
                           if (!e) {
                               teardown_to_closed();
                           }
                       });
                // Failsafe: a stuck peer must not wedge close().
                close_timer_ = loop_.add_timer_after(
                    std::chrono::milliseconds{1'000},
                    [this] { teardown_to_closed(); });
            } else {
                teardown_to_closed();
            }
        };
        if (loop_.on_loop_thread()) {
            begin_close();
            // Inline close cannot pump for close-ok; the failsafe timer
            // or socket teardown finishes the job.
            return;
        }
        loop_.post(begin_close);
        std::unique_lock lock(wait->m);
        wait->cv.wait_for(lock, std::chrono::milliseconds{2'000},
                          [&] { return wait->done; });
    }

    // ---- tasks -----------------------------------------------------------

    void publish_task(const Envelope& env, PublishConfirm confirm) override {
        OutboundPublish p;
        p.exchange = "";
        p.routing_key = topo_.task_queue;
        p.props = publish_props(env, /*persistent=*/true, reply_address_);
        p.body = encode_envelope(env);
        p.confirm = std::move(confirm);
        enqueue_publish(std::move(p));
    }

    std::string add_task_consumer(int prefetch) override {
        std::string id = "c" + std::to_string(consumer_serial_.fetch_add(1) + 1);
        run_on_loop([this, id, prefetch] {
            TaskConsumer consumer;
            consumer.prefetch = prefetch;
            task_consumers_[id] = consumer;
            if (state_ == LinkState::Open) {
                setup_task_consumer(id);
            }
        });
        return id;
    }

    void remove_task_consumer(const std::string& consumer_id) override {
        run_on_loop([this, consumer_id] {
            auto it = task_consumers_.find(consumer_id);
            if (it == task_consumers_.end() || it->second.cancelled) {
                return;
            }
            TaskConsumer& c = it->second;
            c.cancelled = true;
            if (c.channel != 0 && c.consuming) {
                send_method(c.channel, BasicCancel{"t:" + consumer_id, false});
                expect(c.channel, "basic.cancel-ok",
                       [](const Method*, std::exception_ptr) {});
                flush_out();
                c.consuming = false;
            }
            reap_if_drained(consumer_id);
        });
    }

    void drop_task_consumer(const std::string& consumer_id) override {
        run_on_loop([this, consumer_id] {
            auto it = task_consumers_.find(consumer_id);
            if (it == task_consumers_.end()) {
                return;
            }
            // Abrupt: closing the channel makes the broker requeue every
            // unacknowledged delivery this consumer held.
            close_task_channel(it->second);
            task_consumers_.erase(it);
        });
    }

    void ack(const std::string& consumer_id, uint64_t tag) override {
        settle(consumer_id, tag, true, false);
    }

    void reject(const std::string& consumer_id, uint64_t tag, bool requeue) override {
        settle(consumer_id, tag, false, requeue);
    }

    // ---- RPC -------------------------------------------------------------

    void publish_rpc(const std::string& recipient_id, const Envelope& env) override {
        OutboundPublish p;
        p.exchange = "";
        p.routing_key = topo_.rpc_queue(recipient_id);
        p.mandatory = true;
        p.props = publish_props(env, /*persistent=*/false, reply_address_);
        p.body = encode_envelope(env);
        std::string queue = p.routing_key;
        std::string correlation = env.correlation_id;
        p.on_dropped = [this, queue, correlation](const ErrorInfo& info) {
            synthesize_error_reply(correlation, info);
        };
        enqueue_publish(std::move(p));
    }

    void add_rpc_queue(const std::string& identifier) override {
        auto wait = std::make_shared<SyncWait>();
        run_on_loop([this, identifier, wait] {
            if (rpc_queues_.count(identifier) != 0) {
                wait->finish(std::make_exception_ptr(DuplicateIdentifierError(
                    "RPC queue '" + topo_.rpc_queue(identifier) +
                    "' already has a subscriber")));
                return;
            }
            RpcRegistration reg;
            reg.pending = wait;
            rpc_queues_[identifier] = std::move(reg);
            if (state_ == LinkState::Open) {
                setup_rpc_queue(identifier);
            }
        });
        try {
            wait_on(wait, opts_.connect_timeout,
                    "declare RPC queue '" + identifier + "'");
        } catch (...) {
            run_on_loop([this, identifier, wait] {
                auto it = rpc_queues_.find(identifier);
                if (it != rpc_queues_.end() && it->second.pending == wait) {
                    rpc_queues_.erase(it);
                }
            });
            throw;
        }
    }

    void remove_rpc_queue(const std::string& identifier) override {
        run_on_loop([this, identifier] {
            auto it = rpc_queues_.find(identifier);
            if (it == rpc_queues_.end()) {
                return;
            }
            if (state_ == LinkState::Open && it->second.consuming) {
                // Cancelling the sole consumer lets the auto-delete queue
                // disappear with it.
                send_method(2, BasicCancel{"q:" + topo_.rpc_queue(identifier), false});
                expect(2, "basic.cancel-ok", [](const Method*, std::exception_ptr) {});
                flush_out();
            }
            rpc_queues_.erase(it);
        });
    }

    // ---- broadcast ------------------------------------------------------

    void publish_broadcast(const Envelope& env, PublishConfirm confirm) override {
        OutboundPublish p;
        p.exchange = topo_.broadcast_exchange;
        p.routing_key = broadcast_routing_key(env.sender, env.subject);
        p.props = publish_props(env, /*persistent=*/false, {});
        p.body = encode_envelope(env);
        p.confirm = std::move(confirm);
        enqueue_publish(std::move(p));
    }

    uint64_t add_broadcast_binding(const BroadcastFilter& filter) override {
        uint64_t id = binding_serial_.fetch_add(1) + 1;
        auto wait = std::make_shared<SyncWait>();
        run_on_loop([this, id, filter, wait] {
            BroadcastSub sub;
            sub.filter = filter;
            sub.queue = topo_.broadcast_queue_prefix + new_correlation_id().substr(0, 12);
            sub.pending = wait;
            bcast_subs_[id] = std::move(sub);
            if (state_ == LinkState::Open) {
                setup_broadcast_sub(id);
            } else {
                // Deferred to reconnect; the subscription exists either way.
                wait->finish();
            }
        });
        // Block until the binding is live so a subsequent broadcast from
        // any connection routes to it.
        wait_on(wait, opts_.connect_timeout, "bind broadcast subscription");
        return id;
    }

    void remove_broadcast_binding(uint64_t binding_id) override {
        run_on_loop([this, binding_id] {
            auto it = bcast_subs_.find(binding_id);
            if (it == bcast_subs_.end()) {
                return;
            }
            if (state_ == LinkState::Open && it->second.consuming) {
                send_method(2, BasicCancel{"b:" + std::to_string(binding_id), false});
                expect(2, "basic.cancel-ok", [](const Method*, std::exception_ptr) {});
                flush_out();
            }
            bcast_subs_.erase(it);
        });
    }

    // ---- replies ----------------------------------------------------------

    void publish_reply(const std::string& reply_to, const Envelope& env) override {
        OutboundPublish p;
        p.exchange = "";
        p.routing_key = reply_to;
        p.props = publish_props(env, /*persistent=*/false, {});
        p.body = encode_envelope(env);
        enqueue_publish(std::move(p));
    }

    const std::string& reply_address() const override { return reply_address_; }

  private:
    enum class LinkState {
        Idle,
        Connecting,
        TlsHandshake,
        Handshake,
        Open,
        Backoff,
        Closing,
        Closed,
    };

    std::string endpoint_text() const {
        return uri_.host + ":" + std::to_string(uri_.port);
    }

    // ---- thread plumbing --------------------------------------------------

    void run_on_loop(std::function<void()> fn) {
        if (loop_.on_loop_thread()) {
            fn();
        } else {
            loop_.post(std::move(fn));
        }
    }

    void wait_on(const std::shared_ptr<SyncWait>& wait,
                 std::chrono::milliseconds timeout, const std::string& what) {
        if (loop_.on_loop_thread()) {
            pump_until(wait, timeout, what);
        } else {
            std::unique_lock lock(wait->m);
            if (!wait->cv.wait_for(lock, timeout, [&] { return wait->done; })) {
                throw ConnectionError("timed out waiting to " + what);
            }
            if (wait->error) {
                std::rethrow_exception(wait->error);
            }
        }
    }

    /// Nested I/O pump for blocking calls made from the loop thread
    /// itself (e.g. a handler registering a subscriber). Drives only this
    /// backend's socket; posted work and timers wait until we return.
    void pump_until(const std::shared_ptr<SyncWait>& wait,
                    std::chrono::milliseconds timeout, const std::string& what) {
        auto deadline = std::chrono::steady_clock::now() + timeout;
        while (true) {
            {
                std::lock_guard lock(wait->m);
                if (wait->done) {
                    if (wait->error) {
                        std::rethrow_exception(wait->error);
                    }
                    return;
                }
            }
            if (std::chrono::steady_clock::now() >= deadline) {
                throw ConnectionError("timed out waiting to " + what);
            }
            if (!sock_ || sock_->fd() < 0) {
                throw ConnectionError("connection lost while waiting to " + what);
            }
            pollfd pfd{};
            pfd.fd = sock_->fd();
            pfd.events = POLLIN | (out_buf_.empty() ? 0 : POLLOUT);
            int rc = ::poll(&pfd, 1, 10);
            if (rc < 0 && errno != EINTR) {
                throw ConnectionError(errno_text("poll"));
            }
            if (rc > 0) {
                if (pfd.revents & (POLLERR | POLLNVAL)) {
                    connection_lost("socket error");
                    continue;
                }
                if (pfd.revents & POLLOUT) {
                    on_writable();
                }
                if (pfd.revents & (POLLIN | POLLHUP)) {
                    on_readable();
                }
            }
        }
    }

    void cancel_timer(uint64_t& id) {
        if (id != 0) {
            loop_.cancel_timer(id);
            id = 0;
        }
    }

    // ---- connection machinery ---------------------------------------------

    void start_connect() {
        state_ = LinkState::Connecting;
        in_buf_.clear();
        out_buf_.clear();
        channels_.clear();
        sock_ = std::make_unique<SocketStream>();
        std::string err;
        if (!sock_->begin_connect(uri_.host, uri_.port, err)) {
            attempt_failed(err);
            return;
        }
        loop_.watch_fd(
            sock_->fd(), [this] { on_readable(); },
            [this] { connection_lost("socket error"); });
        loop_.set_fd_writable([this] { on_writable(); });
        connect_timer_ = loop_.add_timer_after(opts_.connect_timeout, [this] {
            if (state_ == LinkState::Connecting || state_ == LinkState::TlsHandshake ||
                state_ == LinkState::Handshake) {
                connection_lost("connect timed out");
            }
        });
        if (sock_->connect_done()) {
            tcp_connected();
        } else {
            loop_.set_fd_write_interest(true);
        }
    }

    void tcp_connected() {
        if (uri_.scheme == "amqps") {
            std::string err;
            if (!sock_->start_tls(uri_.host, err)) {
                attempt_failed(err);
                return;
            }
            state_ = LinkState::TlsHandshake;
            drive_tls();
        } else {
            begin_protocol();
        }
    }

    void drive_tls() {
        std::string err;
        switch (sock_->continue_tls(err)) {
            case SocketStream::Io::Ok:
                begin_protocol();
                return;
            case SocketStream::Io::WantRead:
                loop_.set_fd_write_interest(false);
                return;
            case SocketStream::Io::WantWrite:
                loop_.set_fd_write_interest(true);
                return;
            default:
                attempt_failed(err.empty() ? "TLS handshake failed" : err);
                return;
        }
    }

    void begin_protocol() {
        state_ = LinkState::Handshake;
        liveness_.record_activity(now_ms());
        out_buf_.append(kProtocolHeader);
        flush_out();
        expect(0, "connection.start", [this](const Method* m, std::exception_ptr e) {
            if (e) {
                return;
            }
            const auto* start = std::get_if<ConnectionStart>(m);
            if (!start) {
                connection_lost("expected connection.start, got " + std::string(method_name(*m)));
                return;
            }
            if (start->mechanisms.find("PLAIN") == std::string::npos) {
                connection_lost("server offers no PLAIN authentication");
                return;
            }
            ConnectionStartOk ok;
            ok.client_properties["product"] = "commkit";
            ok.client_properties["capabilities"] = Value::object();
            ok.client_properties["capabilities"]["publisher_confirms"] = true;
            ok.client_properties["capabilities"]["basic.nack"] = true;
            ok.response = plain_auth_response(uri_.username, uri_.password);
            send_method(0, ok);
            flush_out();
            await_tune();
        });
    }

    void await_tune() {
        expect(0, "connection.tune", [this](const Method* m, std::exception_ptr e) {
            if (e) {
                return;
            }
            const auto* tune = std::get_if<ConnectionTune>(m);
            if (!tune) {
                connection_lost("expected connection.tune");
                return;
            }
            if (tune->frame_max != 0) {
                frame_max_ = std::min<uint32_t>(131072, tune->frame_max);
            }
            heartbeat_ms_ = negotiated_heartbeat_ms(opts_.heartbeat.count(), tune->heartbeat);
            liveness_.heartbeat_interval_ms = heartbeat_ms_;
            liveness_.record_activity(now_ms());
            ConnectionTuneOk tune_ok;
            tune_ok.channel_max = tune->channel_max;
            tune_ok.frame_max = frame_max_;
            tune_ok.heartbeat = heartbeat_wire_seconds(heartbeat_ms_);
            send_method(0, tune_ok);
            send_method(0, ConnectionOpen{uri_.vhost});
            flush_out();
            start_heartbeats();
            expect(0, "connection.open-ok", [this](const Method* m2, std::exception_ptr e2) {
                if (e2) {
                    return;
                }
                if (!std::holds_alternative<ConnectionOpenOk>(*m2)) {
                    connection_lost("expected connection.open-ok");
                    return;
                }
                open_channels();
            });
        });
    }

    void open_channels() {
        // Everything below pipelines into one write burst; the waiters
        // consume the acknowledgements in order and the last one flips
        // the link to Open.
        channels_[1].kind = ChannelKind::Publish;
        send_method(1, ChannelOpen{});
        expect(1, "channel.open-ok", [](const Method*, std::exception_ptr) {});
        send_method(1, ConfirmSelect{false});
        expect(1, "confirm.select-ok", [this](const Method*, std::exception_ptr e) {
            if (!e) {
                publish_seq_ = 0;
            }
        });

        channels_[2].kind = ChannelKind::Shared;
        send_method(2, ChannelOpen{});
        expect(2, "channel.open-ok", [](const Method*, std::exception_ptr) {});

        ExchangeDeclare exchange;
        exchange.exchange = topo_.broadcast_exchange;
        exchange.type = "topic";
        exchange.durable = true;
        send_method(2, exchange);
        expect(2, "exchange.declare-ok", [](const Method*, std::exception_ptr) {});

        QueueDeclare tasks;
        tasks.queue = topo_.task_queue;
        tasks.durable = true;
        send_method(2, tasks);
        expect(2, "queue.declare-ok", [](const Method*, std::exception_ptr) {});

        QueueDeclare reply;
        reply.queue = reply_address_;
        reply.exclusive = true;
        reply.auto_delete = true;
        send_method(2, reply);
        expect(2, "queue.declare-ok", [](const Method*, std::exception_ptr) {});

        BasicConsume consume;
        consume.queue = reply_address_;
        consume.consumer_tag = "r:0";
        consume.no_ack = true;
        send_method(2, consume);
        expect(2, "basic.consume-ok", [this](const Method*, std::exception_ptr e) {
            if (e) {
                return;
            }
            link_opened();
        });
        flush_out();
    }

    void link_opened() {
        state_ = LinkState::Open;
        ever_open_ = true;
        backoff_.reset();
        cancel_timer(connect_timer_);

        // Re-establish every registration that predates this connection.
        for (auto& [identifier, reg] : rpc_queues_) {
            reg.consuming = false;
            setup_rpc_queue(identifier);
        }
        for (auto& [id, sub] : bcast_subs_) {
            sub.consuming = false;
            setup_broadcast_sub(id);
        }
        std::vector<std::string> drained;
        for (auto& [id, consumer] : task_consumers_) {
            if (consumer.cancelled) {
                // Its in-flight deliveries died with the old connection
                // and were requeued broker-side; nothing left to drain.
                drained.push_back(id);
                continue;
            }
            setup_task_consumer(id);
        }
        for (const auto& id : drained) {
            task_consumers_.erase(id);
        }

        // Unconfirmed publishes from the previous connection go out
        // again ahead of anything queued while we were down.
        std::deque<OutboundPublish> backlog;
        for (auto& [seq, publish] : awaiting_confirm_) {
            backlog.push_back(std::move(publish));
        }
        awaiting_confirm_.clear();
        for (auto& publish : queued_publishes_) {
            backlog.push_back(std::move(publish));
        }
        queued_publishes_.clear();
        for (auto& publish : backlog) {
            write_publish(std::move(publish));
        }
        flush_out();

        if (open_wait_) {
            open_wait_->finish();
            open_wait_.reset();
        }
    }

    void start_heartbeats() {
        if (heartbeat_ms_ <= 0) {
            return;
        }
        cancel_timer(hb_timer_);
        auto period = std::chrono::milliseconds(std::max<int64_t>(1, heartbeat_ms_ / 2));
        hb_timer_ = loop_.add_timer_after(period, [this] { on_heartbeat_tick(); });
    }

    void on_heartbeat_tick() {
        hb_timer_ = 0;
        if (state_ != LinkState::Open && state_ != LinkState::Handshake) {
            return;
        }
        if (liveness_.check(now_ms()) == Liveness::Dead) {
            connection_lost("heartbeat timeout: no traffic from " + endpoint_text() +
                            " for " + std::to_string(2 * heartbeat_ms_) + "ms");
            return;
        }
        Frame hb;
        hb.type = kFrameHeartbeat;
        hb.channel = 0;
        out_buf_ += encode_frame(hb);
        flush_out();
        start_heartbeats();
    }

    // ---- socket events ----------------------------------------------------

    void on_readable() {
        if (!sock_) {
            return;
        }
        bool got_any = false;
        while (true) {
            std::string err;
            auto rc = sock_->read_some(in_buf_, err);
            if (rc == SocketStream::Io::Ok) {
                got_any = true;
                continue;
            }
            if (rc == SocketStream::Io::WantRead) {
                break;
            }
            if (rc == SocketStream::Io::WantWrite) {
                loop_.set_fd_write_interest(true);
                break;
            }
            if (rc == SocketStream::Io::Eof) {
                connection_lost("connection closed by " + endpoint_text());
                return;
            }
            connection_lost(err);
            return;
        }
        if (state_ == LinkState::TlsHandshake) {
            drive_tls();
            return;
        }
        if (got_any) {
            liveness_.record_activity(now_ms());
            drain_frames();
        }
    }

    void on_writable() {
        if (!sock_) {
            return;
        }
        if (state_ == LinkState::Connecting) {
            int err = sock_->finish_connect();
            if (err != 0) {
                attempt_failed("connect to " + endpoint_text() + " failed: " +
                               std::strerror(err));
                return;
            }
            loop_.set_fd_write_interest(false);
            tcp_connected();
            return;
        }
        if (state_ == LinkState::TlsHandshake) {
            drive_tls();
            return;
        }
        flush_out();
    }

    void flush_out() {
        if (!sock_ || sock_->fd() < 0) {
            return;
        }
        while (!out_buf_.empty()) {
            size_t wrote = 0;
            std::string err;
            auto rc = sock_->write_some(out_buf_, wrote, err);
            if (rc == SocketStream::Io::Ok) {
                out_buf_.erase(0, wrote);
                continue;
            }
            if (rc == SocketStream::Io::WantWrite || rc == SocketStream::Io::WantRead) {
                break;
            }
            connection_lost(err.empty() ? "write failed" : err);
            return;
        }
        loop_.set_fd_write_interest(!out_buf_.empty());
    }

    void drain_frames() {
        while (true) {
            std::optional<Frame> frame;
            try {
                frame = try_parse_frame(in_buf_);
            } catch (const DecodeError& e) {
                connection_lost(std::string("protocol violation: ") + e.what());
                return;
            }
            if (!frame) {
                return;
            }
            handle_frame(*frame);
            if (state_ == LinkState::Closed || state_ == LinkState::Backoff ||
                state_ == LinkState::Connecting) {
                return;  // the handler tore the connection down
            }
        }
    }

    // ---- frame handling ---------------------------------------------------

    void handle_frame(const Frame& frame) {
        switch (frame.type) {
            case kFrameHeartbeat:
                return;  // activity was recorded at read time
            case kFrameMethod: {
                Method m;
                try {
                    m = decode_method(frame.payload);
                } catch (const DecodeError& e) {
                    connection_lost(std::string("bad method frame: ") + e.what());
                    return;
                }
                handle_method(frame.channel, m);
                return;
            }
            case kFrameHeader: {
                auto it = channels_.find(frame.channel);
                if (it == channels_.end() || !it->second.content.active) {
                    connection_lost("content header without a deliver");
                    return;
                }
                try {
                    it->second.content.header = decode_content_header(frame.payload);
                } catch (const DecodeError& e) {
                    connection_lost(std::string("bad content header: ") + e.what());
                    return;
                }
                if (it->second.content.header.body_size == 0) {
                    complete_content(frame.channel);
                }
                return;
            }
            case kFrameBody: {
                auto it = channels_.find(frame.channel);
                if (it == channels_.end() || !it->second.content.active) {
                    connection_lost("body frame without a deliver");
                    return;
                }
                it->second.content.body += frame.payload;
                if (it->second.content.body.size() >= it->second.content.header.body_size) {
                    complete_content(frame.channel);
                }
                return;
            }
            default:
                connection_lost("unknown frame type " + std::to_string(frame.type));
                return;
        }
    }

    void handle_method(uint16_t channel, const Method& m) {
        if (const auto* deliver = std::get_if<BasicDeliver>(&m)) {
            ChannelState& ch = channels_[channel];
            ch.content.active = true;
            ch.content.method = *deliver;
            ch.content.body.clear();
            return;
        }
        if (const auto* ret = std::get_if<BasicReturn>(&m)) {
            ChannelState& ch = channels_[channel];
            ch.content.active = true;
            ch.content.method = *ret;
            ch.content.body.clear();
            return;
        }
        if (const auto* ack = std::get_if<BasicAck>(&m)) {
            resolve_confirms(ack->delivery_tag, ack->multiple, true);
            return;
        }
        if (const auto* nack = std::get_if<BasicNack>(&m)) {
            resolve_confirms(nack->delivery_tag, nack->multiple, false);
            return;
        }
        if (const auto* close = std::get_if<ConnectionClose>(&m)) {
            send_method(0, ConnectionCloseOk{});
            flush_out();
            connection_lost("server closed the connection: " +
                            std::to_string(close->reply_code) + " " + close->reply_text);
            return;
        }
        if (const auto* close = std::get_if<ChannelClose>(&m)) {
            handle_channel_close(channel, *close);
            return;
        }
        // Everything else answers the oldest waiter on its channel.
        auto it = channels_.find(channel);
        if (it != channels_.end() && !it->second.waiters.empty()) {
            auto waiter = std::move(it->second.waiters.front());
            it->second.waiters.pop_front();
            waiter(&m, nullptr);
            return;
        }
        // Unsolicited and harmless (e.g. basic.cancel-ok after teardown).
    }

    void handle_channel_close(uint16_t channel, const ChannelClose& close) {
        send_method(channel, ChannelCloseOk{});
        flush_out();
        auto it = channels_.find(channel);
        if (it == channels_.end()) {
            return;
        }
        ChannelState state = std::move(it->second);
        channels_.erase(it);
        free_channels_.push_back(channel);

        std::exception_ptr err = channel_error(close);
        for (auto& waiter : state.waiters) {
            waiter(nullptr, err);
        }

        switch (state.kind) {
            case ChannelKind::Scratch:
                return;  // expected failure path for exclusive declares
            case ChannelKind::Task: {
                // The broker requeued this consumer's deliveries when the
                // channel died; rebuild it on a fresh channel.
                auto consumer = task_consumers_.find(state.owner);
                if (consumer != task_consumers_.end()) {
                    consumer->second.channel = 0;
                    consumer->second.consuming = false;
                    consumer->second.unacked = 0;
                    consumer->second.epoch++;
                    if (!consumer->second.cancelled && this->state_ == LinkState::Open) {
                        setup_task_consumer(consumer->first);
                    } else if (consumer->second.cancelled) {
                        task_consumers_.erase(consumer);
                    }
                }
                return;
            }
            case ChannelKind::Publish:
            case ChannelKind::Shared:
                // The link cannot work without these; start over.
                connection_lost("channel " + std::to_string(channel) +
                                " closed by server: " + std::to_string(close.reply_code) +
                                " " + close.reply_text);
                return;
        }
    }

    std::exception_ptr channel_error(const ChannelClose& close) {
        std::string text = std::to_string(close.reply_code) + " " + close.reply_text;
        if (close.reply_code == 405) {
            return std::make_exception_ptr(DuplicateIdentifierError(text));
        }
        return std::make_exception_ptr(ConnectionError("channel closed: " + text));
    }

    void complete_content(uint16_t channel) {
        auto it = channels_.find(channel);
        if (it == channels_.end()) {
            return;
        }
        IncomingContent content = std::move(it->second.content);
        it->second.content = {};

        if (const auto* ret = std::get_if<BasicReturn>(&content.method)) {
            handle_return(*ret, content);
            return;
        }
        const auto& deliver = std::get<BasicDeliver>(content.method);

        bool channel_closing = it->second.closing;
        Envelope env;
        try {
            env = decode_envelope(content.body);
        } catch (const Error& e) {
            // A payload that does not decode must not loop through
            // redelivery forever; park it with the dead letters.
            if (deliver.consumer_tag.rfind("t:", 0) == 0 && !channel_closing) {
                send_method(channel, BasicReject{deliver.delivery_tag, false});
                flush_out();
            }
            std::fprintf(stderr, "commkit: dropping undecodable message on '%s': %s\n",
                         deliver.consumer_tag.c_str(), e.what());
            return;
        }
        env.redelivered = env.redelivered || deliver.redelivered;
        const std::string& tag = deliver.consumer_tag;

        if (tag == "r:0") {
            if (cb_.on_reply) {
                cb_.on_reply(std::move(env));
            }
            return;
        }
        if (tag.rfind("q:", 0) == 0) {
            if (cb_.on_rpc) {
                std::string reply_to = content.header.properties.reply_to.value_or("");
                cb_.on_rpc(std::move(env), std::move(reply_to));
            }
            return;
        }
        if (tag.rfind("b:", 0) == 0) {
            uint64_t id = std::strtoull(tag.c_str() + 2, nullptr, 10);
            auto sub = bcast_subs_.find(id);
            if (sub == bcast_subs_.end()) {
                return;  // cancelled while the message was in flight
            }
            // The topic binding over-approximates; the filter decides.
            if (!filter_matches(sub->second.filter, env.sender, env.subject)) {
                return;
            }
            if (cb_.on_broadcast) {
                cb_.on_broadcast(id, std::move(env));
            }
            return;
        }
        if (tag.rfind("t:", 0) == 0) {
            std::string consumer_id = tag.substr(2);
            auto consumer = task_consumers_.find(consumer_id);
            if (consumer == task_consumers_.end() || consumer->second.channel != channel ||
                consumer->second.cancelled) {
                // Delivery raced a drop or a cancel; hand it back rather
                // than start work nobody will acknowledge.
                if (!channel_closing) {
                    send_method(channel, BasicReject{deliver.delivery_tag, true});
                    flush_out();
                }
                return;
            }
            consumer->second.unacked++;
            Assignment assignment;
            assignment.consumer = consumer_id;
            assignment.tag = (consumer->second.epoch << kEpochShift) |
                             (deliver.delivery_tag & kTagMask);
            assignment.env = std::move(env);
            assignment.reply_to = content.header.properties.reply_to.value_or("");
            if (cb_.on_task) {
                cb_.on_task(std::move(assignment));
            }
            return;
        }
    }

    void handle_return(const BasicReturn& ret, const IncomingContent& content) {
        // Only RPC publishes are mandatory, so a return means the
        // recipient's queue does not exist: answer the caller with the
        // same unroutable error the in-process broker produces.
        std::string correlation;
        try {
            Envelope env = decode_envelope(content.body);
            correlation = env.correlation_id;
        } catch (const Error&) {
            if (content.header.properties.correlation_id) {
                correlation = *content.header.properties.correlation_id;
            }
        }
        if (correlation.empty()) {
            return;
        }
        synthesize_error_reply(
            correlation,
            {ErrorCategory::Unroutable,
             "no subscriber for RPC queue '" + ret.routing_key + "'"});
    }

    void synthesize_error_reply(const std::string& correlation_id, const ErrorInfo& info) {
        Envelope reply;
        reply.kind = MessageKind::RpcReply;
        reply.correlation_id = correlation_id;
        reply.body = make_error_reply(info);
        if (cb_.on_reply) {
            cb_.on_reply(std::move(reply));
        }
    }

    // ---- publishes ----------------------------------------------------------

    BasicProperties publish_props(const Envelope& env, bool persistent,
                                  const std::string& reply_to) {
        BasicProperties p;
        p.content_type = "application/json";
        p.delivery_mode = persistent ? 2 : 1;
        p.correlation_id = env.correlation_id;
        if (!reply_to.empty()) {
            p.reply_to = reply_to;
        }
        return p;
    }

    void enqueue_publish(OutboundPublish publish) {
        run_on_loop([this, publish = std::move(publish)]() mutable {
            if (state_ == LinkState::Closed || state_ == LinkState::Closing ||
                user_closed_.load()) {
                fail_publish(publish, {ErrorCategory::Cancelled, "connection closed"});
                return;
            }
            if (state_ == LinkState::Open) {
                write_publish(std::move(publish));
                flush_out();
                return;
            }
            if (queued_publishes_.size() + awaiting_confirm_.size() >=
                opts_.send_buffer_limit) {
                fail_publish(publish,
                             {ErrorCategory::ConnectionLost,
                              "send buffer full (" +
                                  std::to_string(opts_.send_buffer_limit) +
                                  " messages) while disconnected from " +
                                  endpoint_text()});
                return;
            }
            queued_publishes_.push_back(std::move(publish));
        });
    }

    void fail_publish(OutboundPublish& publish, const ErrorInfo& info) {
        if (publish.confirm) {
            publish.confirm(false, info);
        } else if (publish.on_dropped) {
            publish.on_dropped(info);
        }
    }

    void write_publish(OutboundPublish publish) {
        uint64_t seq = ++publish_seq_;
        BasicPublish method;
        method.exchange = publish.exchange;
        method.routing_key = publish.routing_key;
        method.mandatory = publish.mandatory;
        send_method(1, method);

        ContentHeader header;
        header.body_size = publish.body.size();
        header.properties = publish.props;
        Frame hf;
        hf.type = kFrameHeader;
        hf.channel = 1;
        hf.payload = encode_content_header(header);
        out_buf_ += encode_frame(hf);

        size_t chunk = frame_max_ > 8 ? frame_max_ - 8 : 4096;
        for (size_t off = 0; off < publish.body.size(); off += chunk) {
            Frame bf;
            bf.type = kFrameBody;
            bf.channel = 1;
            bf.payload = publish.body.substr(off, chunk);
            out_buf_ += encode_frame(bf);
        }
        awaiting_confirm_.emplace(seq, std::move(publish));
    }

    void resolve_confirms(uint64_t tag, bool multiple, bool ok) {
        auto finish = [&](OutboundPublish& p) {
            if (p.confirm) {
                p.confirm(ok, ok ? ErrorInfo{}
                                 : ErrorInfo{ErrorCategory::ConnectionLost,
                                             "publish refused by broker"});
            } else if (!ok && p.on_dropped) {
                p.on_dropped({ErrorCategory::ConnectionLost, "publish refused by broker"});
            }
        };
        if (multiple) {
            auto it = awaiting_confirm_.begin();
            while (it != awaiting_confirm_.end() && it->first <= tag) {
                finish(it->second);
                it = awaiting_confirm_.erase(it);
            }
        } else {
            auto it = awaiting_confirm_.find(tag);
            if (it != awaiting_confirm_.end()) {
                finish(it->second);
                awaiting_confirm_.erase(it);
            }
        }
    }

    // ---- registrations -------------------------------------------------------

    uint16_t allocate_channel(ChannelKind kind, const std::string& owner = {}) {
        uint16_t id;
        if (!free_channels_.empty()) {
            id = free_channels_.back();
            free_channels_.pop_back();
        } else {
            id = next_channel_++;
        }
        ChannelState& ch = channels_[id];
        ch.kind = kind;
        ch.owner = owner;
        return id;
    }

    void setup_task_consumer(const std::string& id) {
        TaskConsumer& c = task_consumers_[id];
        uint16_t ch = allocate_channel(ChannelKind::Task, id);
        c.channel = ch;
        c.unacked = 0;
        send_method(ch, ChannelOpen{});
        expect(ch, "channel.open-ok", [](const Method*, std::exception_ptr) {});
        BasicQos qos;
        qos.prefetch_count = static_cast<uint16_t>(
            std::clamp(c.prefetch, 1, int{UINT16_MAX}));
        send_method(ch, qos);
        expect(ch, "basic.qos-ok", [](const Method*, std::exception_ptr) {});
        BasicConsume consume;
        consume.queue = topo_.task_queue;
        consume.consumer_tag = "t:" + id;
        send_method(ch, consume);
        expect(ch, "basic.consume-ok", [this, id](const Method*, std::exception_ptr e) {
            if (e) {
                return;
            }
            auto it = task_consumers_.find(id);
            if (it != task_consumers_.end()) {
                it->second.consuming = true;
            }
        });
        flush_out();
    }

    void close_task_channel(TaskConsumer& c) {
        if (c.channel == 0) {
            return;
        }
        uint16_t ch = c.channel;
        c.channel = 0;
        c.consuming = false;
        c.epoch++;
        auto it = channels_.find(ch);
        if (it == channels_.end()) {
            return;
        }
        it->second.closing = true;
        send_method(ch, ChannelClose{200, "consumer closed", 0, 0});
        flush_out();
        // The close-ok just frees the id for reuse.
        expect(ch, "channel.close-ok", [this, ch](const Method*, std::exception_ptr e) {
            if (!e) {
                channels_.erase(ch);
                free_channels_.push_back(ch);
            }
        });
    }

    void reap_if_drained(const std::string& id) {
        auto it = task_consumers_.find(id);
        if (it == task_consumers_.end() || !it->second.cancelled ||
            it->second.unacked != 0) {
            return;
        }
        close_task_channel(it->second);
        task_consumers_.erase(it);
    }

    void settle(const std::string& consumer_id, uint64_t tag, bool ack, bool requeue) {
        run_on_loop([this, consumer_id, tag, ack, requeue] {
            auto it = task_consumers_.find(consumer_id);
            if (it == task_consumers_.end()) {
                return;  // consumer already dropped; broker requeued
            }
            TaskConsumer& c = it->second;
            uint64_t epoch = tag >> kEpochShift;
            if (epoch != c.epoch || c.channel == 0) {
                // The delivery died with a previous channel; the broker
                // already requeued it, so there is nothing to settle.
                return;
            }
            uint64_t delivery_tag = tag & kTagMask;
            if (ack) {
                send_method(c.channel, BasicAck{delivery_tag, false});
            } else {
                send_method(c.channel, BasicReject{delivery_tag, requeue});
            }
            flush_out();
            if (c.unacked > 0) {
                c.unacked--;
            }
            reap_if_drained(consumer_id);
        });
    }

    void setup_rpc_queue(const std::string& identifier) {
        auto it = rpc_queues_.find(identifier);
        if (it == rpc_queues_.end()) {
            return;
        }
        std::string queue = topo_.rpc_queue(identifier);
        // The exclusive declare runs on a scratch channel so a
        // RESOURCE_LOCKED rejection only kills that channel, not the
        // shared consume channel.
        uint16_t scratch = allocate_channel(ChannelKind::Scratch);
        send_method(scratch, ChannelOpen{});
        expect(scratch, "channel.open-ok", [](const Method*, std::exception_ptr) {});
        QueueDeclare declare;
        declare.queue = queue;
        declare.exclusive = true;
        declare.auto_delete = true;
        send_method(scratch, declare);
        expect(scratch, "queue.declare-ok",
               [this, identifier, queue, scratch](const Method*, std::exception_ptr e) {
                   if (e) {
                       // RESOURCE_LOCKED means someone else owns the
                       // identifier: permanent, reported to the caller.
                       // Anything else is connection trouble; keep the
                       // registration and let the reconnect retry it.
                       bool duplicate = false;
                       try {
                           std::rethrow_exception(e);
                       } catch (const DuplicateIdentifierError&) {
                           duplicate = true;
                       } catch (...) {
                       }
                       if (duplicate) {
                           auto reg = rpc_queues_.find(identifier);
                           if (reg != rpc_queues_.end()) {
                               auto pending = reg->second.pending;
                               rpc_queues_.erase(reg);
                               if (pending) {
                                   pending->finish(std::make_exception_ptr(
                                       DuplicateIdentifierError(
                                           "RPC queue '" + queue +
                                           "' already has a subscriber")));
                               }
                           }
                       }
                       return;
                   }
                   auto scratch_it = channels_.find(scratch);
                   if (scratch_it != channels_.end()) {
                       scratch_it->second.closing = true;
                   }
                   send_method(scratch, ChannelClose{200, "declare done", 0, 0});
                   expect(scratch, "channel.close-ok",
                          [this, scratch](const Method*, std::exception_ptr e2) {
                              if (!e2) {
                                  channels_.erase(scratch);
                                  free_channels_.push_back(scratch);
                              }
                          });
                   BasicConsume consume;
                   consume.queue = queue;
                   consume.consumer_tag = "q:" + queue;
                   consume.no_ack = true;
                   send_method(2, consume);
                   expect(2, "basic.consume-ok",
                          [this, identifier](const Method*, std::exception_ptr e2) {
                              auto reg = rpc_queues_.find(identifier);
                              if (reg == rpc_queues_.end() || e2) {
                                  return;  // reconnect re-runs the setup
                              }
                              reg->second.consuming = true;
                              if (reg->second.pending) {
                                  reg->second.pending->finish();
                                  reg->second.pending.reset();
                              }
                          });
                   flush_out();
               });
        flush_out();
    }

    void setup_broadcast_sub(uint64_t id) {
        auto it = bcast_subs_.find(id);
        if (it == bcast_subs_.end()) {
            return;
        }
        BroadcastSub& sub = it->second;
        QueueDeclare declare;
        declare.queue = sub.queue;
        declare.exclusive = true;
        declare.auto_delete = true;
        send_method(2, declare);
        expect(2, "queue.declare-ok", [](const Method*, std::exception_ptr) {});
        QueueBind bind;
        bind.queue = sub.queue;
        bind.exchange = topo_.broadcast_exchange;
        bind.routing_key = binding_pattern(sub.filter);
        send_method(2, bind);
        expect(2, "queue.bind-ok", [](const Method*, std::exception_ptr) {});
        BasicConsume consume;
        consume.queue = sub.queue;
        consume.consumer_tag = "b:" + std::to_string(id);
        consume.no_ack = true;
        send_method(2, consume);
        expect(2, "basic.consume-ok", [this, id](const Method*, std::exception_ptr e) {
            auto sub2 = bcast_subs_.find(id);
            if (sub2 == bcast_subs_.end() || e) {
                return;  // reconnect re-runs the setup
            }
            sub2->second.consuming = true;
            if (sub2->second.pending) {
                sub2->second.pending->finish();
                sub2->second.pending.reset();
            }
        });
        flush_out();
    }

    // ---- failure paths ---------------------------------------------------

    /// Initial-connect failure: report through open(); no retry loop
    /// until the first successful open.
    void attempt_failed(const std::string& reason) {
        connection_lost(reason);
    }

    void connection_lost(const std::string& reason) {
        if (state_ == LinkState::Closed) {
            return;
        }
        bool closing = state_ == LinkState::Closing || user_closed_.load();
        teardown_socket(reason);
        if (closing) {
            teardown_to_closed();
            return;
        }
        if (!ever_open_) {
            state_ = LinkState::Closed;
            if (open_wait_) {
                open_wait_->finish(std::make_exception_ptr(
                    ConnectionError("cannot connect to " + endpoint_text() + ": " + reason)));
                open_wait_.reset();
            }
            return;
        }
        // Unconfirmed publishes go back to the head of the queue and ride
        // the next connection.
        for (auto it = awaiting_confirm_.rbegin(); it != awaiting_confirm_.rend(); ++it) {
            queued_publishes_.push_front(std::move(it->second));
        }
        awaiting_confirm_.clear();
        state_ = LinkState::Backoff;
        int64_t delay = backoff_.next_delay_ms();
        std::fprintf(stderr, "commkit: lost connection to %s (%s); retrying in %ldms\n",
                     endpoint_text().c_str(), reason.c_str(), static_cast<long>(delay));
        reconnect_timer_ = loop_.add_timer_after(std::chrono::milliseconds(delay),
                                                 [this] { start_connect(); });
    }

    void teardown_socket(const std::string& reason) {
        cancel_timer(hb_timer_);
        cancel_timer(connect_timer_);
        if (sock_) {
            loop_.unwatch_fd();
            sock_.reset();
        }
        in_buf_.clear();
        out_buf_.clear();
        auto err = std::make_exception_ptr(ConnectionError("connection lost: " + reason));
        auto channels = std::move(channels_);
        channels_.clear();
        for (auto& [id, ch] : channels) {
            for (auto& waiter : ch.waiters) {
                waiter(nullptr, err);
            }
        }
        free_channels_.clear();
        next_channel_ = 3;
        for (auto& [id, consumer] : task_consumers_) {
            consumer.channel = 0;
            consumer.consuming = false;
            consumer.unacked = 0;
            consumer.epoch++;
        }
        liveness_ = {};
    }

    void teardown_to_closed() {
        cancel_timer(reconnect_timer_);
        cancel_timer(close_timer_);
        if (state_ != LinkState::Closed) {
            teardown_socket("closed");
            state_ = LinkState::Closed;
        }
        auto cancelled = ErrorInfo{ErrorCategory::Cancelled, "connection closed"};
        for (auto& [seq, publish] : awaiting_confirm_) {
            fail_publish(publish, cancelled);
        }
        awaiting_confirm_.clear();
        for (auto& publish : queued_publishes_) {
            fail_publish(publish, cancelled);
        }
        queued_publishes_.clear();
        auto closed_err =
            std::make_exception_ptr(ConnectionError("connection closed"));
        for (auto& [identifier, reg] : rpc_queues_) {
            if (reg.pending) {
                reg.pending->finish(closed_err);
                reg.pending.reset();
            }
        }
        for (auto& [id, sub] : bcast_subs_) {
            if (sub.pending) {
                sub.pending->finish(closed_err);
                sub.pending.reset();
            }
        }
        if (open_wait_) {
            open_wait_->finish(
                std::make_exception_ptr(ConnectionError("connection closed")));
            open_wait_.reset();
        }
        if (close_wait_) {
            close_wait_->finish();
            close_wait_.reset();
        }
    }

    // ---- low-level send/expect ---------------------------------------------

    void send_method(uint16_t channel, const Method& m) {
        Frame frame;
        frame.type = kFrameMethod;
        frame.channel = channel;
        frame.payload = encode_method(m);
        out_buf_ += encode_frame(frame);
    }

    void expect(uint16_t channel, const char* /*what*/,
                std::function<void(const Method*, std::exception_ptr)> fn) {
        channels_[channel].waiters.push_back(std::move(fn));
    }

    // ---- members ---------------------------------------------------------

    BrokerUri uri_;
    ConnectOptions opts_;
    EventLoop& loop_;
    BackendCallbacks cb_;
    Topology topo_;
    std::string reply_address_;

    // Loop-thread state.
    LinkState state_ = LinkState::Idle;
    std::unique_ptr<SocketStream> sock_;
    std::string in_buf_;
    std::string out_buf_;
    std::map<uint16_t, ChannelState> channels_;
    uint16_t next_channel_ = 3;
    std::vector<uint16_t> free_channels_;
    uint32_t frame_max_ = 131072;
    int64_t heartbeat_ms_ = 0;
    LivenessState liveness_;
    BackoffPolicy backoff_;
    bool ever_open_ = false;
    uint64_t hb_timer_ = 0;
    uint64_t reconnect_timer_ = 0;
    uint64_t connect_timer_ = 0;
    uint64_t close_timer_ = 0;
    std::shared_ptr<SyncWait> open_wait_;
    std::shared_ptr<SyncWait> close_wait_;

    uint64_t publish_seq_ = 0;
    std::map<uint64_t, OutboundPublish> awaiting_confirm_;
    std::deque<OutboundPublish> queued_publishes_;

    std::map<std::string, TaskConsumer> task_consumers_;
    std::map<std::string, RpcRegistration> rpc_queues_;
    std::map<uint64_t, BroadcastSub> bcast_subs_;

    std::atomic<int> consumer_serial_{0};
    std::atomic<uint64_t> binding_serial_{0};
    std::atomic<bool> user_closed_{false};
};

}  // namespace

std::unique_ptr<Backend> make_amqp_backend(const BrokerUri& uri, const ConnectOptions& opts,
                                           EventLoop& loop, BackendCallbacks callbacks) {
    return std::make_unique<AmqpBackend>(uri, opts, loop, std::move(callbacks));
}

}  // namespace commkit
