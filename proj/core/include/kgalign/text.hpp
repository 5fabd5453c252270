#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace kgalign::text {

// Byte offsets of each UTF-8 code point start, plus a final entry equal to
// s.size(). Invalid bytes count as single code points.
std::vector<std::size_t> codepoint_offsets(std::string_view s);

std::size_t codepoint_count(std::string_view s);

// Keeps at most max_codepoints code points; never splits a multi-byte
// sequence.
std::string truncate_codepoints(std::string_view s, std::size_t max_codepoints);

// Text after the last '/' or '#', with '_' replaced by ' '. Returns the input
// unchanged if it has no separator.
std::string local_name(std::string_view uri);

std::vector<std::string_view> split(std::string_view line, char sep);

std::string_view trim(std::string_view s);

// Escapes '\\', '\t', '\n', '\r' so a value fits in one TSV field.
std::string escape_tsv(std::string_view s);
std::string unescape_tsv(std::string_view s);

std::string ascii_lower(std::string_view s);

}  // namespace kgalign::text
