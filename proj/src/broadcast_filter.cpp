#include "commkit/broadcast_filter.hpp"

namespace commkit {

bool glob_match(std::string_view pattern, std::string_view text) {
    // Two-pointer scan with backtracking to the last '*'.
    size_t p = 0, t = 0;
    size_t star = std::string_view::npos, mark = 0;
    while (t < text.size()) {
        if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = t;
        } else if (p < pattern.size() && pattern[p] == text[t]) {
            ++p;
            ++t;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            t = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') {
        ++p;
    }
    return p == pattern.size();
}

namespace {

bool part_matches(const std::string& pattern,
                  const std::optional<std::string>& value) {
    if (!value) {
        return pattern == "*";
    }
    return glob_match(pattern, *value);
}

}  // namespace

bool filter_matches(const BroadcastFilter& filter,
                    const std::optional<std::string>& sender,
                    const std::optional<std::string>& subject) {
    return part_matches(filter.sender_pattern, sender) &&
           part_matches(filter.subject_pattern, subject);
}

}  // namespace commkit
