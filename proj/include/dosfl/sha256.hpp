#pragma once

#include <cstdint>
#include <string>

namespace dosfl {

// SHA-256 of a byte buffer, hex-encoded. Used for result-bundle manifests.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::string& path);

} // namespace dosfl
