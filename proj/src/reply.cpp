#include "commkit/reply.hpp"

namespace commkit {

Value make_ok_reply(Value result) { return Value{{"ok", std::move(result)}}; }

Value make_error_reply(const ErrorInfo& info) {
    return Value{{"err", Value{{"category", to_string(info.category)},
                               {"message", info.message}}}};
}

std::variant<Value, ErrorInfo> parse_reply(const Value& body) {
    if (body.is_object() && body.size() == 1) {
        if (auto it = body.find("ok"); it != body.end()) {
            return *it;
        }
        if (auto it = body.find("err"); it != body.end()) {
            const Value& err = *it;
            if (err.is_object() && err.contains("category") && err.contains("message") &&
                err["category"].is_string() && err["message"].is_string()) {
                return ErrorInfo{error_category_from_string(err["category"].get<std::string>()),
                                 err["message"].get<std::string>()};
            }
        }
    }
    throw DecodeError("reply body is neither {\"ok\": ...} nor {\"err\": {...}}");
}

}  // namespace commkit
