#include "kgalign/text.hpp"

#include <algorithm>

namespace kgalign::text {
namespace {

bool is_continuation(unsigned char c) { return (c & 0xC0) == 0x80; }

}  // namespace

std::vector<std::size_t> codepoint_offsets(std::string_view s) {
  std::vector<std::size_t> offsets;
  offsets.reserve(s.size() + 1);
  std::size_t i = 0;
  while (i < s.size()) {
    offsets.push_back(i);
    const auto lead = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if (lead >= 0xF0 && lead < 0xF8) len = 4;
    else if (lead >= 0xE0) len = lead < 0xF0 ? 3 : 1;
    else if (lead >= 0xC0) len = 2;
    // Accept the sequence only when all continuation bytes are present.
    if (len > 1) {
      if (i + len > s.size()) {
        len = 1;
      } else {
        for (std::size_t k = 1; k < len; ++k) {
          if (!is_continuation(static_cast<unsigned char>(s[i + k]))) {
            len = 1;
            break;
          }
        }
      }
    }
    i += len;
  }
  offsets.push_back(s.size());
  return offsets;
}

std::size_t codepoint_count(std::string_view s) {
  return codepoint_offsets(s).size() - 1;
}

std::string truncate_codepoints(std::string_view s, std::size_t max_codepoints) {
  const auto offsets = codepoint_offsets(s);
  if (offsets.size() - 1 <= max_codepoints) return std::string(s);
  return std::string(s.substr(0, offsets[max_codepoints]));
}

std::string local_name(std::string_view uri) {
  const auto pos = uri.find_last_of("/#");
  std::string out(pos == std::string_view::npos ? uri : uri.substr(pos + 1));
  if (out.empty()) out = std::string(uri);
  std::replace(out.begin(), out.end(), '_', ' ');
  return out;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string escape_tsv(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (const char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_tsv(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\' || i + 1 == s.size()) {
      out += s[i];
      continue;
    }
    switch (s[++i]) {
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case '\\': out += '\\'; break;
      default: out += '\\'; out += s[i];
    }
  }
  return out;
}

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

}  // namespace kgalign::text
