#include "amqp/protocol.hpp"

#include "commkit/errors.hpp"

namespace commkit::amqp {

std::string encode_frame(const Frame& frame) {
    ByteWriter w;
    w.u8(frame.type);
    w.u16(frame.channel);
    w.u32(static_cast<uint32_t>(frame.payload.size()));
    w.bytes(frame.payload);
    w.u8(kFrameEnd);
    return w.take();
}

std::optional<Frame> try_parse_frame(std::string& buffer) {
    if (buffer.size() < 7) {
        return std::nullopt;
    }
    ByteReader r(buffer);
    Frame frame;
    frame.type = r.u8();
    frame.channel = r.u16();
    uint32_t size = r.u32();
    if (size > kMaxFrameSize) {
        throw DecodeError("frame size " + std::to_string(size) +
                          " exceeds limit");
    }
    if (buffer.size() < 7u + size + 1u) {
        return std::nullopt;
    }
    frame.payload = buffer.substr(7, size);
    uint8_t end = static_cast<uint8_t>(buffer[7 + size]);
    if (end != kFrameEnd) {
        throw DecodeError("bad frame end octet");
    }
    buffer.erase(0, 7u + size + 1u);
    return frame;
}

// --- content header -------------------------------------------------------

namespace {

// Property flag bits, MSB-first per the content header layout.
enum : uint16_t {
    kFlagContentType = 1u << 15,
    kFlagContentEncoding = 1u << 14,
    kFlagHeaders = 1u << 13,
    kFlagDeliveryMode = 1u << 12,
    kFlagPriority = 1u << 11,
    kFlagCorrelationId = 1u << 10,
    kFlagReplyTo = 1u << 9,
    kFlagExpiration = 1u << 8,
    kFlagMessageId = 1u << 7,
    kFlagTimestamp = 1u << 6,
    kFlagType = 1u << 5,
    kFlagUserId = 1u << 4,
    kFlagAppId = 1u << 3,
    kFlagClusterId = 1u << 2,
};

}  // namespace

std::string encode_content_header(const ContentHeader& header) {
    const BasicProperties& p = header.properties;
    uint16_t flags = 0;
    if (p.content_type) flags |= kFlagContentType;
    if (p.content_encoding) flags |= kFlagContentEncoding;
    if (p.headers) flags |= kFlagHeaders;
    if (p.delivery_mode) flags |= kFlagDeliveryMode;
    if (p.priority) flags |= kFlagPriority;
    if (p.correlation_id) flags |= kFlagCorrelationId;
    if (p.reply_to) flags |= kFlagReplyTo;
    if (p.expiration) flags |= kFlagExpiration;
    if (p.message_id) flags |= kFlagMessageId;
    if (p.timestamp) flags |= kFlagTimestamp;
    if (p.type) flags |= kFlagType;
    if (p.user_id) flags |= kFlagUserId;
    if (p.app_id) flags |= kFlagAppId;
    if (p.cluster_id) flags |= kFlagClusterId;

    ByteWriter w;
    w.u16(header.class_id);
    w.u16(0);  // weight
    w.u64(header.body_size);
    w.u16(flags);
    if (p.content_type) w.short_str(*p.content_type);
    if (p.content_encoding) w.short_str(*p.content_encoding);
    if (p.headers) w.table(*p.headers);
    if (p.delivery_mode) w.u8(*p.delivery_mode);
    if (p.priority) w.u8(*p.priority);
    if (p.correlation_id) w.short_str(*p.correlation_id);
    if (p.reply_to) w.short_str(*p.reply_to);
    if (p.expiration) w.short_str(*p.expiration);
    if (p.message_id) w.short_str(*p.message_id);
    if (p.timestamp) w.u64(*p.timestamp);
    if (p.type) w.short_str(*p.type);
    if (p.user_id) w.short_str(*p.user_id);
    if (p.app_id) w.short_str(*p.app_id);
    if (p.cluster_id) w.short_str(*p.cluster_id);
    return w.take();
}

ContentHeader decode_content_header(std::string_view payload) {
    ByteReader r(payload);
    ContentHeader header;
    header.class_id = r.u16();
    r.u16();  // weight
    header.body_size = r.u64();
    uint16_t flags = r.u16();
    BasicProperties& p = header.properties;
    if (flags & kFlagContentType) p.content_type = r.short_str();
    if (flags & kFlagContentEncoding) p.content_encoding = r.short_str();
    if (flags & kFlagHeaders) p.headers = r.table();
    if (flags & kFlagDeliveryMode) p.delivery_mode = r.u8();
    if (flags & kFlagPriority) p.priority = r.u8();
    if (flags & kFlagCorrelationId) p.correlation_id = r.short_str();
    if (flags & kFlagReplyTo) p.reply_to = r.short_str();
    if (flags & kFlagExpiration) p.expiration = r.short_str();
    if (flags & kFlagMessageId) p.message_id = r.short_str();
    if (flags & kFlagTimestamp) p.timestamp = r.u64();
    if (flags & kFlagType) p.type = r.short_str();
    if (flags & kFlagUserId) p.user_id = r.short_str();
    if (flags & kFlagAppId) p.app_id = r.short_str();
    if (flags & kFlagClusterId) p.cluster_id = r.short_str();
    return header;
}

// --- methods ----------------------------------------------------------------

namespace {

template <typename T>
struct MethodId;

#define COMMKIT_METHOD_ID(T, CLS, MTH, NAME)      \
    template <>                                   \
    struct MethodId<T> {                          \
        static constexpr uint16_t cls = CLS;      \
        static constexpr uint16_t mth = MTH;      \
        static constexpr const char* name = NAME; \
    }

COMMKIT_METHOD_ID(ConnectionStart, 10, 10, "connection.start");
COMMKIT_METHOD_ID(ConnectionStartOk, 10, 11, "connection.start-ok");
COMMKIT_METHOD_ID(ConnectionTune, 10, 30, "connection.tune");
COMMKIT_METHOD_ID(ConnectionTuneOk, 10, 31, "connection.tune-ok");
COMMKIT_METHOD_ID(ConnectionOpen, 10, 40, "connection.open");
COMMKIT_METHOD_ID(ConnectionOpenOk, 10, 41, "connection.open-ok");
COMMKIT_METHOD_ID(ConnectionClose, 10, 50, "connection.close");
COMMKIT_METHOD_ID(ConnectionCloseOk, 10, 51, "connection.close-ok");
COMMKIT_METHOD_ID(ChannelOpen, 20, 10, "channel.open");
COMMKIT_METHOD_ID(ChannelOpenOk, 20, 11, "channel.open-ok");
COMMKIT_METHOD_ID(ChannelClose, 20, 40, "channel.close");
COMMKIT_METHOD_ID(ChannelCloseOk, 20, 41, "channel.close-ok");
COMMKIT_METHOD_ID(ExchangeDeclare, 40, 10, "exchange.declare");
COMMKIT_METHOD_ID(ExchangeDeclareOk, 40, 11, "exchange.declare-ok");
COMMKIT_METHOD_ID(QueueDeclare, 50, 10, "queue.declare");
COMMKIT_METHOD_ID(QueueDeclareOk, 50, 11, "queue.declare-ok");
COMMKIT_METHOD_ID(QueueBind, 50, 20, "queue.bind");
COMMKIT_METHOD_ID(QueueBindOk, 50, 21, "queue.bind-ok");
COMMKIT_METHOD_ID(QueueUnbind, 50, 50, "queue.unbind");
COMMKIT_METHOD_ID(QueueUnbindOk, 50, 51, "queue.unbind-ok");
COMMKIT_METHOD_ID(BasicQos, 60, 10, "basic.qos");
COMMKIT_METHOD_ID(BasicQosOk, 60, 11, "basic.qos-ok");
COMMKIT_METHOD_ID(BasicConsume, 60, 20, "basic.consume");
COMMKIT_METHOD_ID(BasicConsumeOk, 60, 21, "basic.consume-ok");
COMMKIT_METHOD_ID(BasicCancel, 60, 30, "basic.cancel");
COMMKIT_METHOD_ID(BasicCancelOk, 60, 31, "basic.cancel-ok");
COMMKIT_METHOD_ID(BasicPublish, 60, 40, "basic.publish");
COMMKIT_METHOD_ID(BasicReturn, 60, 50, "basic.return");
COMMKIT_METHOD_ID(BasicDeliver, 60, 60, "basic.deliver");
COMMKIT_METHOD_ID(BasicAck, 60, 80, "basic.ack");
COMMKIT_METHOD_ID(BasicReject, 60, 90, "basic.reject");
COMMKIT_METHOD_ID(BasicNack, 60, 120, "basic.nack");
COMMKIT_METHOD_ID(ConfirmSelect, 85, 10, "confirm.select");
COMMKIT_METHOD_ID(ConfirmSelectOk, 85, 11, "confirm.select-ok");

#undef COMMKIT_METHOD_ID

uint8_t bits(std::initializer_list<bool> values) {
    uint8_t out = 0;
    int shift = 0;
    for (bool v : values) {
        if (v) {
            out |= static_cast<uint8_t>(1u << shift);
        }
        ++shift;
    }
    return out;
}

void write_args(ByteWriter& w, const ConnectionStart& m) {
    w.u8(m.version_major);
    w.u8(m.version_minor);
    w.table(m.server_properties);
    w.long_str(m.mechanisms);
    w.long_str(m.locales);
}

void write_args(ByteWriter& w, const ConnectionStartOk& m) {
    w.table(m.client_properties);
    w.short_str(m.mechanism);
    w.long_str(m.response);
    w.short_str(m.locale);
}

void write_args(ByteWriter& w, const ConnectionTune& m) {
    w.u16(m.channel_max);
    w.u32(m.frame_max);
    w.u16(m.heartbeat);
}

void write_args(ByteWriter& w, const ConnectionTuneOk& m) {
    w.u16(m.channel_max);
    w.u32(m.frame_max);
    w.u16(m.heartbeat);
}

void write_args(ByteWriter& w, const ConnectionOpen& m) {
    w.short_str(m.vhost);
    w.short_str("");  // reserved capabilities
    w.u8(0);          // reserved insist bit
}

void write_args(ByteWriter& w, const ConnectionOpenOk&) {
    w.short_str("");  // reserved known-hosts
}

void write_args(ByteWriter& w, const ConnectionClose& m) {
    w.u16(m.reply_code);
    w.short_str(m.reply_text);
    w.u16(m.class_id);
    w.u16(m.method_id);
}

void write_args(ByteWriter&, const ConnectionCloseOk&) {}

void write_args(ByteWriter& w, const ChannelOpen&) {
    w.short_str("");  // reserved out-of-band
}

void write_args(ByteWriter& w, const ChannelOpenOk&) {
    w.long_str("");  // reserved channel-id
}

void write_args(ByteWriter& w, const ChannelClose& m) {
    w.u16(m.reply_code);
    w.short_str(m.reply_text);
    w.u16(m.class_id);
    w.u16(m.method_id);
}

void write_args(ByteWriter&, const ChannelCloseOk&) {}

void write_args(ByteWriter& w, const ExchangeDeclare& m) {
    w.u16(0);  // reserved ticket
    w.short_str(m.exchange);
    w.short_str(m.type);
    w.u8(bits({m.passive, m.durable, m.auto_delete, m.internal, m.no_wait}));
    w.table(m.arguments);
}

void write_args(ByteWriter&, const ExchangeDeclareOk&) {}

void write_args(ByteWriter& w, const QueueDeclare& m) {
    w.u16(0);  // reserved ticket
    w.short_str(m.queue);
    w.u8(bits({m.passive, m.durable, m.exclusive, m.auto_delete, m.no_wait}));
    w.table(m.arguments);
}

void write_args(ByteWriter& w, const QueueDeclareOk& m) {
    w.short_str(m.queue);
    w.u32(m.message_count);
    w.u32(m.consumer_count);
}

void write_args(ByteWriter& w, const QueueBind& m) {
    w.u16(0);  // reserved ticket
    w.short_str(m.queue);
    w.short_str(m.exchange);
    w.short_str(m.routing_key);
    w.u8(bits({m.no_wait}));
    w.table(m.arguments);
}

void write_args(ByteWriter&, const QueueBindOk&) {}

void write_args(ByteWriter& w, const QueueUnbind& m) {
    w.u16(0);  // reserved ticket
    w.short_str(m.queue);
    w.short_str(m.exchange);
    w.short_str(m.routing_key);
    w.table(m.arguments);
}

void write_args(ByteWriter&, const QueueUnbindOk&) {}

void write_args(ByteWriter& w, const BasicQos& m) {
    w.u32(m.prefetch_size);
    w.u16(m.prefetch_count);
    w.u8(bits({m.global}));
}

void write_args(ByteWriter&, const BasicQosOk&) {}

void write_args(ByteWriter& w, const BasicConsume& m) {
    w.u16(0);  // reserved ticket
    w.short_str(m.queue);
    w.short_str(m.consumer_tag);
    w.u8(bits({m.no_local, m.no_ack, m.exclusive, m.no_wait}));
    w.table(m.arguments);
}

void write_args(ByteWriter& w, const BasicConsumeOk& m) {
    w.short_str(m.consumer_tag);
}

void write_args(ByteWriter& w, const BasicCancel& m) {
    w.short_str(m.consumer_tag);
    w.u8(bits({m.no_wait}));
}

void write_args(ByteWriter& w, const BasicCancelOk& m) {
    w.short_str(m.consumer_tag);
}

void write_args(ByteWriter& w, const BasicPublish& m) {
    w.u16(0);  // reserved ticket
    w.short_str(m.exchange);
    w.short_str(m.routing_key);
    w.u8(bits({m.mandatory, m.immediate}));
}

void write_args(ByteWriter& w, const BasicReturn& m) {
    w.u16(m.reply_code);
    w.short_str(m.reply_text);
    w.short_str(m.exchange);
    w.short_str(m.routing_key);
}

void write_args(ByteWriter& w, const BasicDeliver& m) {
    w.short_str(m.consumer_tag);
    w.u64(m.delivery_tag);
    w.u8(bits({m.redelivered}));
    w.short_str(m.exchange);
    w.short_str(m.routing_key);
}

void write_args(ByteWriter& w, const BasicAck& m) {
    w.u64(m.delivery_tag);
    w.u8(bits({m.multiple}));
}

void write_args(ByteWriter& w, const BasicReject& m) {
    w.u64(m.delivery_tag);
    w.u8(bits({m.requeue}));
}

void write_args(ByteWriter& w, const BasicNack& m) {
    w.u64(m.delivery_tag);
    w.u8(bits({m.multiple, m.requeue}));
}

void write_args(ByteWriter& w, const ConfirmSelect& m) {
    w.u8(bits({m.no_wait}));
}

void write_args(ByteWriter&, const ConfirmSelectOk&) {}

}  // namespace

std::string encode_method(const Method& method) {
    return std::visit(
        [](const auto& m) {
            using T = std::decay_t<decltype(m)>;
            ByteWriter w;
            w.u16(MethodId<T>::cls);
            w.u16(MethodId<T>::mth);
            write_args(w, m);
            return w.take();
        },
        method);
}

Method decode_method(std::string_view payload) {
    ByteReader r(payload);
    uint16_t cls = r.u16();
    uint16_t mth = r.u16();
    uint32_t key = static_cast<uint32_t>(cls) << 16 | mth;
    switch (key) {
        case 10u << 16 | 10: {
            ConnectionStart m;
            m.version_major = r.u8();
            m.version_minor = r.u8();
            m.server_properties = r.table();
            m.mechanisms = r.long_str();
            m.locales = r.long_str();
            return m;
        }
        case 10u << 16 | 11: {
            ConnectionStartOk m;
            m.client_properties = r.table();
            m.mechanism = r.short_str();
            m.response = r.long_str();
            m.locale = r.short_str();
            return m;
        }
        case 10u << 16 | 30: {
            ConnectionTune m;
            m.channel_max = r.u16();
            m.frame_max = r.u32();
            m.heartbeat = r.u16();
            return m;
        }
        case 10u << 16 | 31: {
            ConnectionTuneOk m;
            m.channel_max = r.u16();
            m.frame_max = r.u32();
            m.heartbeat = r.u16();
            return m;
        }
        case 10u << 16 | 40: {
            ConnectionOpen m;
            m.vhost = r.short_str();
            r.short_str();
            r.u8();
            return m;
        }
        case 10u << 16 | 41:
            r.short_str();
            return ConnectionOpenOk{};
        case 10u << 16 | 50: {
            ConnectionClose m;
            m.reply_code = r.u16();
            m.reply_text = r.short_str();
            m.class_id = r.u16();
            m.method_id = r.u16();
            return m;
        }
        case 10u << 16 | 51:
            return ConnectionCloseOk{};
        case 20u << 16 | 10:
            r.short_str();
            return ChannelOpen{};
        case 20u << 16 | 11:
            r.long_str();
            return ChannelOpenOk{};
        case 20u << 16 | 40: {
            ChannelClose m;
            m.reply_code = r.u16();
            m.reply_text = r.short_str();
            m.class_id = r.u16();
            m.method_id = r.u16();
            return m;
        }
        case 20u << 16 | 41:
            return ChannelCloseOk{};
        case 40u << 16 | 10: {
            ExchangeDeclare m;
            r.u16();
            m.exchange = r.short_str();
            m.type = r.short_str();
            uint8_t b = r.u8();
            m.passive = b & 1;
            m.durable = b & 2;
            m.auto_delete = b & 4;
            m.internal = b & 8;
            m.no_wait = b & 16;
            m.arguments = r.table();
            return m;
        }
        case 40u << 16 | 11:
            return ExchangeDeclareOk{};
        case 50u << 16 | 10: {
            QueueDeclare m;
            r.u16();
            m.queue = r.short_str();
            uint8_t b = r.u8();
            m.passive = b & 1;
            m.durable = b & 2;
            m.exclusive = b & 4;
            m.auto_delete = b & 8;
            m.no_wait = b & 16;
            m.arguments = r.table();
            return m;
        }
        case 50u << 16 | 11: {
            QueueDeclareOk m;
            m.queue = r.short_str();
            m.message_count = r.u32();
            m.consumer_count = r.u32();
            return m;
        }
        case 50u << 16 | 20: {
            QueueBind m;
            r.u16();
            m.queue = r.short_str();
            m.exchange = r.short_str();
            m.routing_key = r.short_str();
            m.no_wait = r.u8() & 1;
            m.arguments = r.table();
            return m;
        }
        case 50u << 16 | 21:
            return QueueBindOk{};
        case 50u << 16 | 50: {
            QueueUnbind m;
            r.u16();
            m.queue = r.short_str();
            m.exchange = r.short_str();
            m.routing_key = r.short_str();
            m.arguments = r.table();
            return m;
        }
        case 50u << 16 | 51:
            return QueueUnbindOk{};
        case 60u << 16 | 10: {
            BasicQos m;
            m.prefetch_size = r.u32();
            m.prefetch_count = r.u16();
            m.global = r.u8() & 1;
            return m;
        }
        case 60u << 16 | 11:
            return BasicQosOk{};
        case 60u << 16 | 20: {
            BasicConsume m;
            r.u16();
            m.queue = r.short_str();
            m.consumer_tag = r.short_str();
            uint8_t b = r.u8();
            m.no_local = b & 1;
            m.no_ack = b & 2;
            m.exclusive = b & 4;
            m.no_wait = b & 8;
            m.arguments = r.table();
            return m;
        }
        case 60u << 16 | 21: {
            BasicConsumeOk m;
            m.consumer_tag = r.short_str();
            return m;
        }
        case 60u << 16 | 30: {
            BasicCancel m;
            m.consumer_tag = r.short_str();
            m.no_wait = r.u8() & 1;
            return m;
        }
        case 60u << 16 | 31: {
            BasicCancelOk m;
            m.consumer_tag = r.short_str();
            return m;
        }
        case 60u << 16 | 40: {
            BasicPublish m;
            r.u16();
            m.exchange = r.short_str();
            m.routing_key = r.short_str();
            uint8_t b = r.u8();
            m.mandatory = b & 1;
            m.immediate = b & 2;
            return m;
        }
        case 60u << 16 | 50: {
            BasicReturn m;
            m.reply_code = r.u16();
            m.reply_text = r.short_str();
            m.exchange = r.short_str();
            m.routing_key = r.short_str();
            return m;
        }
        case 60u << 16 | 60: {
            BasicDeliver m;
            m.consumer_tag = r.short_str();
            m.delivery_tag = r.u64();
            m.redelivered = r.u8() & 1;
            m.exchange = r.short_str();
            m.routing_key = r.short_str();
            return m;
        }
        case 60u << 16 | 80: {
            BasicAck m;
            m.delivery_tag = r.u64();
            m.multiple = r.u8() & 1;
            return m;
        }
        case 60u << 16 | 90: {
            BasicReject m;
            m.delivery_tag = r.u64();
            m.requeue = r.u8() & 1;
            return m;
        }
        case 60u << 16 | 120: {
            BasicNack m;
            m.delivery_tag = r.u64();
            uint8_t b = r.u8();
            m.multiple = b & 1;
            m.requeue = b & 2;
            return m;
        }
        case 85u << 16 | 10: {
            ConfirmSelect m;
            m.no_wait = r.u8() & 1;
            return m;
        }
        case 85u << 16 | 11:
            return ConfirmSelectOk{};
        default:
            throw DecodeError("unsupported method " + std::to_string(cls) +
                              "." + std::to_string(mth));
    }
}

const char* method_name(const Method& method) {
    return std::visit(
        [](const auto& m) {
            using T = std::decay_t<decltype(m)>;
            (void)m;
            return MethodId<T>::name;
        },
        method);
}

std::string plain_auth_response(const std::string& user,
                                const std::string& password) {
    std::string out;
    out.push_back('\0');
    out += user;
    out.push_back('\0');
    out += password;
    return out;
}

}  // namespace commkit::amqp
