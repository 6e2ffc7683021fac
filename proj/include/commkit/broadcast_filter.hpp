#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace commkit {

/// Glob match where '*' matches any run of characters (including empty)
/// and every other character, '.' included, is literal.
bool glob_match(std::string_view pattern, std::string_view text);

/// Subscription predicate over broadcast (sender, subject) pairs.
/// The default "*"/"*" filter matches everything, absent values included.
struct BroadcastFilter {
    std::string sender_pattern = "*";
    std::string subject_pattern = "*";

    bool operator==(const BroadcastFilter&) const = default;
};

/// True iff sender matches sender_pattern and subject matches
/// subject_pattern. An absent value matches only the pattern "*".
bool filter_matches(const BroadcastFilter& filter,
                    const std::optional<std::string>& sender,
                    const std::optional<std::string>& subject);

}  // namespace commkit
