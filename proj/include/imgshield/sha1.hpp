#pragma once

#include <cstdint>
#include <span>
#include <string>

namespace imgshield {

// SHA-1 hex digest of a byte buffer.
std::string sha1_hex(std::span<const uint8_t> data);

// git-style blob hash: sha1("blob <size>\0" + contents of the file).
// Throws on unreadable paths.
std::string git_blob_hash(const std::string& path);

} // namespace imgshield
