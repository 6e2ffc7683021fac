#include "amqp/codec.hpp"

#include <bit>
#include <cmath>

#include "commkit/errors.hpp"

namespace commkit::amqp {

void ByteWriter::u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }

void ByteWriter::u16(uint16_t v) {
    u8(static_cast<uint8_t>(v >> 8));
    u8(static_cast<uint8_t>(v));
}

void ByteWriter::u32(uint32_t v) {
    u16(static_cast<uint16_t>(v >> 16));
    u16(static_cast<uint16_t>(v));
}

void ByteWriter::u64(uint64_t v) {
    u32(static_cast<uint32_t>(v >> 32));
    u32(static_cast<uint32_t>(v));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<uint32_t>(v)); }

void ByteWriter::f64(double v) { u64(std::bit_cast<uint64_t>(v)); }

void ByteWriter::bytes(std::string_view data) { buf_.append(data); }

void ByteWriter::short_str(std::string_view s) {
    if (s.size() > 255) {
        throw EncodingError("short string exceeds 255 bytes: " +
                            std::to_string(s.size()));
    }
    u8(static_cast<uint8_t>(s.size()));
    bytes(s);
}

void ByteWriter::long_str(std::string_view s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s);
}

void ByteWriter::table(const Value& object) {
    if (!object.is_object()) {
        throw EncodingError("field table requires a JSON object");
    }
    ByteWriter inner;
    for (const auto& [key, value] : object.items()) {
        inner.short_str(key);
        inner.field_value(value);
    }
    long_str(inner.data());
}

void ByteWriter::field_value(const Value& v) {
    switch (v.type()) {
        case Value::value_t::boolean:
            u8('t');
            u8(v.get<bool>() ? 1 : 0);
            break;
        case Value::value_t::number_integer:
            u8('l');
            i64(v.get<int64_t>());
            break;
        case Value::value_t::number_unsigned: {
            uint64_t u = v.get<uint64_t>();
            if (u > static_cast<uint64_t>(INT64_MAX)) {
                throw EncodingError("field value exceeds int64 range");
            }
            u8('l');
            i64(static_cast<int64_t>(u));
            break;
        }
        case Value::value_t::number_float:
            u8('d');
            f64(v.get<double>());
            break;
        case Value::value_t::string:
            u8('S');
            long_str(v.get<std::string>());
            break;
        case Value::value_t::array: {
            u8('A');
            ByteWriter inner;
            for (const auto& item : v) {
                inner.field_value(item);
            }
            long_str(inner.data());
            break;
        }
        case Value::value_t::object:
            u8('F');
            table(v);
            break;
        case Value::value_t::null:
            u8('V');
            break;
        default:
            throw EncodingError("unsupported field value type");
    }
}

void ByteReader::need(size_t n) const {
    if (pos_ + n > data_.size()) {
        throw DecodeError("frame truncated: wanted " + std::to_string(n) +
                          " bytes, " + std::to_string(data_.size() - pos_) +
                          " left");
    }
}

uint8_t ByteReader::u8() {
    need(1);
    return static_cast<uint8_t>(data_[pos_++]);
}

uint16_t ByteReader::u16() {
    uint16_t hi = u8();
    return static_cast<uint16_t>(hi << 8 | u8());
}

uint32_t ByteReader::u32() {
    uint32_t hi = u16();
    return hi << 16 | u16();
}

uint64_t ByteReader::u64() {
    uint64_t hi = u32();
    return hi << 32 | u32();
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string_view ByteReader::bytes(size_t n) {
    need(n);
    std::string_view out = data_.substr(pos_, n);
    pos_ += n;
    return out;
}

std::string ByteReader::short_str() {
    size_t n = u8();
    return std::string(bytes(n));
}

std::string ByteReader::long_str() {
    size_t n = u32();
    return std::string(bytes(n));
}

Value ByteReader::table() {
    size_t len = u32();
    need(len);
    ByteReader inner(data_.substr(pos_, len));
    pos_ += len;
    Value out = Value::object();
    while (inner.remaining() > 0) {
        std::string key = inner.short_str();
        out[key] = inner.field_value();
    }
    return out;
}

Value ByteReader::field_value() {
    uint8_t tag = u8();
    switch (tag) {
        case 't': return u8() != 0;
        case 'b': return i8();
        case 'B': return u8();
        case 's': return i16();
        case 'u': return u16();
        case 'I': return i32();
        case 'i': return u32();
        case 'l': return i64();
        case 'f': return f32();
        case 'd': return f64();
        case 'D': {
            uint8_t scale = u8();
            int32_t raw = i32();
            return static_cast<double>(raw) / std::pow(10.0, scale);
        }
        case 'S': return long_str();
        case 'T': return u64();
        case 'A': {
            size_t len = u32();
            need(len);
            ByteReader inner(data_.substr(pos_, len));
            pos_ += len;
            Value out = Value::array();
            while (inner.remaining() > 0) {
                out.push_back(inner.field_value());
            }
            return out;
        }
        case 'F': return table();
        case 'V': return nullptr;
        case 'x': return long_str();  // opaque byte array, surfaced raw
        default:
            throw DecodeError(std::string("unknown field value tag '") +
                              static_cast<char>(tag) + "'");
    }
}

}  // namespace commkit::amqp
