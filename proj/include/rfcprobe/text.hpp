#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

// Small string and file helpers shared across modules.
namespace rfcprobe::text {

std::string trim(std::string_view s);

// Collapses every run of whitespace to one space and trims both ends.
std::string normalize_whitespace(std::string_view s);

std::string to_lower(std::string_view s);

std::vector<std::string> split_lines(std::string_view s);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

bool contains_icase(std::string_view haystack, std::string_view needle);

bool is_word_char(char c) noexcept;

// Lower-cased runs of ASCII letters and digits.
std::vector<std::string> word_tokens(std::string_view s);

// Replaces characters outside [A-Za-z0-9._-] with '_'.
std::string sanitize_id(std::string_view s);

// Keeps the last max_chars characters; when cut, a marker line replaces the
// dropped head and the result still fits in max_chars.
std::string tail_truncate(std::string_view s, std::size_t max_chars);

std::string sha256_hex(std::string_view data);

std::uint64_t fnv1a64(std::string_view data) noexcept;

std::string read_file(const std::filesystem::path& path);

// Writes through a temporary file and rename so readers never see a partial file.
void write_file(const std::filesystem::path& path, std::string_view content);

nlohmann::json read_json(const std::filesystem::path& path);

// Canonical form: sorted keys, two-space indent, trailing newline.
std::string canonical_json(const nlohmann::json& j);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);

} // namespace rfcprobe::text
