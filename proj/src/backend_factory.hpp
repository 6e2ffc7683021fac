#pragma once

#include <memory>

#include "commkit/backend.hpp"
#include "commkit/event_loop.hpp"
#include "commkit/uri.hpp"

namespace commkit {

/// Builds the wire backend for amqp:// and amqps:// URIs. The backend
/// drives its socket from the communicator's event loop.
std::unique_ptr<Backend> make_amqp_backend(const BrokerUri& uri, const ConnectOptions& opts,
                                           EventLoop& loop, BackendCallbacks callbacks);

}  // namespace commkit
