#include "commkit/uri.hpp"

#include <stdexcept>

#include "commkit/errors.hpp"

namespace commkit {

namespace {

/// Minimal %XX decoding so vhosts like %2F ("/") round-trip.
std::string percent_decode(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    for (size_t i = 0; i < text.size(); ++i) {
        if (text[i] == '%' && i + 2 < text.size()) {
            auto value = std::stoi(text.substr(i + 1, 2), nullptr, 16);
            out.push_back(static_cast<char>(value));
            i += 2;
        } else {
            out.push_back(text[i]);
        }
    }
    return out;
}

}  // namespace

BrokerUri parse_broker_uri(const std::string& uri) {
    auto sep = uri.find("://");
    if (sep == std::string::npos) {
        throw UriError("missing scheme in broker URI '" + uri + "'");
    }
    BrokerUri out;
    out.scheme = uri.substr(0, sep);
    std::string rest = uri.substr(sep + 3);

    if (out.scheme == "local") {
        if (rest.find('/') != std::string::npos) {
            throw UriError("local:// broker names must not contain '/'");
        }
        out.name = rest;
        return out;
    }
    if (out.scheme != "amqp" && out.scheme != "amqps") {
        throw UriError("unsupported scheme '" + out.scheme + "' (expected local, amqp, or amqps)");
    }
    out.port = out.scheme == "amqps" ? 5671 : 5672;

    // Split off the vhost path first so '@' in passwords stays intact.
    if (auto slash = rest.find('/'); slash != std::string::npos) {
        std::string vhost = rest.substr(slash + 1);
        out.vhost = vhost.empty() ? "/" : percent_decode(vhost);
        rest = rest.substr(0, slash);
    }
    if (auto at = rest.rfind('@'); at != std::string::npos) {
        std::string creds = rest.substr(0, at);
        rest = rest.substr(at + 1);
        if (auto colon = creds.find(':'); colon != std::string::npos) {
            out.username = percent_decode(creds.substr(0, colon));
            out.password = percent_decode(creds.substr(colon + 1));
        } else {
            out.username = percent_decode(creds);
        }
    }
    if (auto colon = rest.rfind(':'); colon != std::string::npos) {
        std::string port_text = rest.substr(colon + 1);
        try {
            int port = std::stoi(port_text);
            if (port <= 0 || port > 65535) {
                throw std::out_of_range("port");
            }
            out.port = static_cast<uint16_t>(port);
        } catch (const std::exception&) {
            throw UriError("bad port '" + port_text + "' in broker URI");
        }
        rest = rest.substr(0, colon);
    }
    if (rest.empty()) {
        throw UriError("missing host in broker URI '" + uri + "'");
    }
    out.host = rest;
    return out;
}

}  // namespace commkit
