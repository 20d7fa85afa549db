#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace facetalk {

// Ordered `key=value` pairs, one per line. Blank lines and lines starting
// with '#' are skipped; surrounding whitespace is trimmed.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

KeyValues parse_key_values(std::string_view text, std::string_view source);
KeyValues read_key_values(const std::filesystem::path& path);
const std::string* find_value(const KeyValues& kv, std::string_view key);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

// Strict numeric parsing: the whole string must be a finite number.
bool parse_double(std::string_view text, double& out);
bool parse_size(std::string_view text, std::size_t& out);

std::string_view trim(std::string_view s);

}  // namespace facetalk
