#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "commkit/value.hpp"

namespace commkit::amqp {

/// Big-endian (network order) byte serializer for AMQP 0-9-1 frames.
class ByteWriter {
  public:
    void u8(uint8_t v);
    void u16(uint16_t v);
    void u32(uint32_t v);
    void u64(uint64_t v);
    void i8(int8_t v) { u8(static_cast<uint8_t>(v)); }
    void i16(int16_t v) { u16(static_cast<uint16_t>(v)); }
    void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
    void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
    void f32(float v);
    void f64(double v);
    void bytes(std::string_view data);
    /// Length-prefixed with one byte; throws EncodingError past 255.
    void short_str(std::string_view s);
    /// Length-prefixed with four bytes.
    void long_str(std::string_view s);
    /// JSON object as an AMQP field table.
    void table(const Value& object);
    /// One tagged field-table value.
    void field_value(const Value& v);

    const std::string& data() const { return buf_; }
    std::string take() { return std::move(buf_); }
    size_t size() const { return buf_.size(); }

  private:
    std::string buf_;
};

/// Big-endian reader over a borrowed buffer; every accessor throws
/// DecodeError on underflow.
class ByteReader {
  public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    uint8_t u8();
    uint16_t u16();
    uint32_t u32();
    uint64_t u64();
    int8_t i8() { return static_cast<int8_t>(u8()); }
    int16_t i16() { return static_cast<int16_t>(u16()); }
    int32_t i32() { return static_cast<int32_t>(u32()); }
    int64_t i64() { return static_cast<int64_t>(u64()); }
    float f32();
    double f64();
    std::string_view bytes(size_t n);
    std::string short_str();
    std::string long_str();
    Value table();
    Value field_value();

    size_t remaining() const { return data_.size() - pos_; }
    size_t position() const { return pos_; }

  private:
    void need(size_t n) const;

    std::string_view data_;
    size_t pos_ = 0;
};

}  // namespace commkit::amqp
