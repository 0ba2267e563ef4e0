#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace metapolyp {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Parses flat `key = value` lines. Blank lines and lines starting with '#'
/// are skipped. Malformed lines and repeated keys throw ConfigError.
KeyValues parse_key_values(const std::string& text, const std::string& context);

/// Strict conversions; trailing garbage throws ConfigError naming the key.
std::uint64_t parse_uint(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);

/// Shortest text that parses back to the identical double.
std::string format_double(double v);

std::string trim(const std::string& s);

}  // namespace metapolyp
