#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace propdec {

// SHA-256 of a byte buffer, lowercase hex. Used for artifact manifests.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_file_hex(const std::string& path);

} // namespace propdec
