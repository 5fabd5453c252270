#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <filesystem>

namespace kgalign {

// 64-bit FNV-1a. Used for n-gram feature hashing; the constants are frozen
// because persisted models depend on the bucket assignment.
constexpr std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : bytes) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Lowercase hex SHA-256 of a byte string. Content hashes for caches,
// manifests and config fingerprints.
std::string sha256_hex(std::string_view bytes);

std::string sha256_file(const std::filesystem::path& path);

}  // namespace kgalign
