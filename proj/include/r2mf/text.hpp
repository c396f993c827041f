#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

// Parsing and formatting for the `key=value` configuration format.
namespace r2mf::text {

std::string_view trim(std::string_view s);

/// Splits `key=value` lines. Blank lines and lines starting with '#' are skipped;
/// any other line without '=' or with an empty key is an error.
std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view src);

std::size_t parse_size(std::string_view key, std::string_view value);
std::uint64_t parse_u64(std::string_view key, std::string_view value);
double parse_double(std::string_view key, std::string_view value);
bool parse_bool(std::string_view key, std::string_view value);
/// Comma-separated non-negative integers, e.g. "4,3,2,1".
std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view value);

std::string join(const std::vector<std::size_t>& values);
std::string format_bool(bool b);
/// Shortest representation that parses back to the same double.
std::string format_double(double v);

}  // namespace r2mf::text
