#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>

#include "amqp/codec.hpp"
#include "commkit/value.hpp"

namespace commkit::amqp {

inline constexpr std::string_view kProtocolHeader{"AMQP\x00\x00\x09\x01", 8};

inline constexpr uint8_t kFrameMethod = 1;
inline constexpr uint8_t kFrameHeader = 2;
inline constexpr uint8_t kFrameBody = 3;
inline constexpr uint8_t kFrameHeartbeat = 8;
inline constexpr uint8_t kFrameEnd = 0xCE;

/// Upper bound accepted from the peer before we declare the stream corrupt.
inline constexpr uint32_t kMaxFrameSize = 16u * 1024 * 1024;

struct Frame {
    uint8_t type = kFrameMethod;
    uint16_t channel = 0;
    std::string payload;

    bool operator==(const Frame&) const = default;
};

std::string encode_frame(const Frame& frame);

/// Consumes one complete frame from the front of `buffer`, or returns
/// nullopt when more bytes are needed. Throws DecodeError on a corrupt
/// stream (bad end octet, oversized frame).
std::optional<Frame> try_parse_frame(std::string& buffer);

// --- content header ------------------------------------------------------

struct BasicProperties {
    std::optional<std::string> content_type;
    std::optional<std::string> content_encoding;
    std::optional<Value> headers;
    std::optional<uint8_t> delivery_mode;
    std::optional<uint8_t> priority;
    std::optional<std::string> correlation_id;
    std::optional<std::string> reply_to;
    std::optional<std::string> expiration;
    std::optional<std::string> message_id;
    std::optional<uint64_t> timestamp;
    std::optional<std::string> type;
    std::optional<std::string> user_id;
    std::optional<std::string> app_id;
    std::optional<std::string> cluster_id;

    bool operator==(const BasicProperties&) const = default;
};

struct ContentHeader {
    uint16_t class_id = 60;
    uint64_t body_size = 0;
    BasicProperties properties;

    bool operator==(const ContentHeader&) const = default;
};

std::string encode_content_header(const ContentHeader& header);
ContentHeader decode_content_header(std::string_view payload);

// --- methods --------------------------------------------------------------

struct ConnectionStart {
    uint8_t version_major = 0;
    uint8_t version_minor = 9;
    Value server_properties = Value::object();
    std::string mechanisms = "PLAIN";
    std::string locales = "en_US";
    bool operator==(const ConnectionStart&) const = default;
};

struct ConnectionStartOk {
    Value client_properties = Value::object();
    std::string mechanism = "PLAIN";
    std::string response;
    std::string locale = "en_US";
    bool operator==(const ConnectionStartOk&) const = default;
};

struct ConnectionTune {
    uint16_t channel_max = 0;
    uint32_t frame_max = 131072;
    uint16_t heartbeat = 60;
    bool operator==(const ConnectionTune&) const = default;
};

struct ConnectionTuneOk {
    uint16_t channel_max = 0;
    uint32_t frame_max = 131072;
    uint16_t heartbeat = 60;
    bool operator==(const ConnectionTuneOk&) const = default;
};

struct ConnectionOpen {
    std::string vhost = "/";
    bool operator==(const ConnectionOpen&) const = default;
};

struct ConnectionOpenOk {
    bool operator==(const ConnectionOpenOk&) const = default;
};

struct ConnectionClose {
    uint16_t reply_code = 200;
    std::string reply_text;
    uint16_t class_id = 0;
    uint16_t method_id = 0;
    bool operator==(const ConnectionClose&) const = default;
};

struct ConnectionCloseOk {
    bool operator==(const ConnectionCloseOk&) const = default;
};

struct ChannelOpen {
    bool operator==(const ChannelOpen&) const = default;
};

struct ChannelOpenOk {
    bool operator==(const ChannelOpenOk&) const = default;
};

struct ChannelClose {
    uint16_t reply_code = 200;
    std::string reply_text;
    uint16_t class_id = 0;
    uint16_t method_id = 0;
    bool operator==(const ChannelClose&) const = default;
};

struct ChannelCloseOk {
    bool operator==(const ChannelCloseOk&) const = default;
};

struct ExchangeDeclare {
    std::string exchange;
    std::string type = "topic";
    bool passive = false;
    bool durable = false;
    bool auto_delete = false;
    bool internal = false;
    bool no_wait = false;
    Value arguments = Value::object();
    bool operator==(const ExchangeDeclare&) const = default;
};

struct ExchangeDeclareOk {
    bool operator==(const ExchangeDeclareOk&) const = default;
};

struct QueueDeclare {
    std::string queue;
    bool passive = false;
    bool durable = false;
    bool exclusive = false;
    bool auto_delete = false;
    bool no_wait = false;
    Value arguments = Value::object();
    bool operator==(const QueueDeclare&) const = default;
};

struct QueueDeclareOk {
    std::string queue;
    uint32_t message_count = 0;
    uint32_t consumer_count = 0;
    bool operator==(const QueueDeclareOk&) const = default;
};

struct QueueBind {
    std::string queue;
    std::string exchange;
    std::string routing_key;
    bool no_wait = false;
    Value arguments = Value::object();
    bool operator==(const QueueBind&) const = default;
};

struct QueueBindOk {
    bool operator==(const QueueBindOk&) const = default;
};

struct QueueUnbind {
    std::string queue;
    std::string exchange;
    std::string routing_key;
    Value arguments = Value::object();
    bool operator==(const QueueUnbind&) const = default;
};

struct QueueUnbindOk {
    bool operator==(const QueueUnbindOk&) const = default;
};

struct BasicQos {
    uint32_t prefetch_size = 0;
    uint16_t prefetch_count = 0;
    bool global = false;
    bool operator==(const BasicQos&) const = default;
};

struct BasicQosOk {
    bool operator==(const BasicQosOk&) const = default;
};

struct BasicConsume {
    std::string queue;
    std::string consumer_tag;
    bool no_local = false;
    bool no_ack = false;
    bool exclusive = false;
    bool no_wait = false;
    Value arguments = Value::object();
    bool operator==(const BasicConsume&) const = default;
};

struct BasicConsumeOk {
    std::string consumer_tag;
    bool operator==(const BasicConsumeOk&) const = default;
};

struct BasicCancel {
    std::string consumer_tag;
    bool no_wait = false;
    bool operator==(const BasicCancel&) const = default;
};

struct BasicCancelOk {
    std::string consumer_tag;
    bool operator==(const BasicCancelOk&) const = default;
};

struct BasicPublish {
    std::string exchange;
    std::string routing_key;
    bool mandatory = false;
    bool immediate = false;
    bool operator==(const BasicPublish&) const = default;
};

struct BasicReturn {
    uint16_t reply_code = 312;
    std::string reply_text = "NO_ROUTE";
    std::string exchange;
    std::string routing_key;
    bool operator==(const BasicReturn&) const = default;
};

struct BasicDeliver {
    std::string consumer_tag;
    uint64_t delivery_tag = 0;
    bool redelivered = false;
    std::string exchange;
    std::string routing_key;
    bool operator==(const BasicDeliver&) const = default;
};

struct BasicAck {
    uint64_t delivery_tag = 0;
    bool multiple = false;
    bool operator==(const BasicAck&) const = default;
};

struct BasicReject {
    uint64_t delivery_tag = 0;
    bool requeue = false;
    bool operator==(const BasicReject&) const = default;
};

struct BasicNack {
    uint64_t delivery_tag = 0;
    bool multiple = false;
    bool requeue = false;
    bool operator==(const BasicNack&) const = default;
};

struct ConfirmSelect {
    bool no_wait = false;
    bool operator==(const ConfirmSelect&) const = default;
};

struct ConfirmSelectOk {
    bool operator==(const ConfirmSelectOk&) const = default;
};

using Method = std::variant<
    ConnectionStart, ConnectionStartOk, ConnectionTune, ConnectionTuneOk,
    ConnectionOpen, ConnectionOpenOk, ConnectionClose, ConnectionCloseOk,
    ChannelOpen, ChannelOpenOk, ChannelClose, ChannelCloseOk,
    ExchangeDeclare, ExchangeDeclareOk, QueueDeclare, QueueDeclareOk,
    QueueBind, QueueBindOk, QueueUnbind, QueueUnbindOk, BasicQos, BasicQosOk,
    BasicConsume, BasicConsumeOk, BasicCancel, BasicCancelOk, BasicPublish,
    BasicReturn, BasicDeliver, BasicAck, BasicReject, BasicNack,
    ConfirmSelect, ConfirmSelectOk>;

/// Method frame payload (class id, method id, arguments).
std::string encode_method(const Method& method);
Method decode_method(std::string_view payload);

/// "connection.close", "basic.deliver", ... for logs and errors.
const char* method_name(const Method& method);

/// PLAIN SASL response: NUL user NUL password.
std::string plain_auth_response(const std::string& user,
                                const std::string& password);

}  // namespace commkit::amqp
