#pragma once

#include <cstdint>
#include <string>

namespace commkit {

/// Parsed broker address. Defaults follow the usual AMQP conventions:
/// guest/guest, port 5672 (5671 for amqps), vhost "/".
struct BrokerUri {
    std::string scheme;  // "local", "amqp", or "amqps"
    std::string username = "guest";
    std::string password = "guest";
    std::string host = "127.0.0.1";
    uint16_t port = 5672;
    std::string vhost = "/";
    std::string name;  // local:// broker name; "" is the default broker
};

/// Accepts "local://[name]", "amqp://[user[:pass]@]host[:port][/vhost]"
/// and the amqps equivalent. Throws UriError on anything else.
BrokerUri parse_broker_uri(const std::string& uri);

}  // namespace commkit
