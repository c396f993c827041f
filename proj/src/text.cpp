#include "r2mf/text.hpp"

#include <charconv>
#include <stdexcept>

namespace r2mf::text {

namespace {

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
    throw std::invalid_argument("invalid value '" + std::string(value) + "' for '" + std::string(key) + "' (expected " +
                                std::string(expected) + ")");
}

template <typename Int>
Int parse_integer(std::string_view key, std::string_view value) {
    value = trim(value);
    Int out{};
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (value.empty() || value.front() == '-' || ec != std::errc{} || ptr != value.data() + value.size()) {
        bad_value(key, value, "a non-negative integer");
    }
    return out;
}

}  // namespace

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view src) {
    std::vector<std::pair<std::string, std::string>> out;
    std::size_t line_no = 0;
    while (!src.empty()) {
        const auto nl = src.find('\n');
        const std::string_view line = trim(src.substr(0, nl));
        src = nl == std::string_view::npos ? std::string_view{} : src.substr(nl + 1);
        ++line_no;
        if (line.empty() || line.front() == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos || trim(line.substr(0, eq)).empty()) {
            throw std::invalid_argument("line " + std::to_string(line_no) + ": expected key=value, got '" +
                                        std::string(line) + "'");
        }
        out.emplace_back(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
    }
    return out;
}

std::size_t parse_size(std::string_view key, std::string_view value) { return parse_integer<std::size_t>(key, value); }

std::uint64_t parse_u64(std::string_view key, std::string_view value) {
    return parse_integer<std::uint64_t>(key, value);
}

double parse_double(std::string_view key, std::string_view value) {
    value = trim(value);
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (value.empty() || ec != std::errc{} || ptr != value.data() + value.size()) bad_value(key, value, "a number");
    return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
    value = trim(value);
    if (value == "true" || value == "1" || value == "on") return true;
    if (value == "false" || value == "0" || value == "off") return false;
    bad_value(key, value, "true or false");
}

std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view value) {
    std::vector<std::size_t> out;
    value = trim(value);
    if (value.empty()) bad_value(key, value, "a comma-separated list");
    while (true) {
        const auto comma = value.find(',');
        out.push_back(parse_size(key, value.substr(0, comma)));
        if (comma == std::string_view::npos) break;
        value = value.substr(comma + 1);
    }
    return out;
}

std::string join(const std::vector<std::size_t>& values) {
    std::string s;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(values[i]);
    }
    return s;
}

std::string format_bool(bool b) { return b ? "true" : "false"; }

std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace r2mf::text
