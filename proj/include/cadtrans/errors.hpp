#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cadtrans {

// Base class for all library errors; CLI maps these to one-line diagnostics.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or axis mismatch between operands.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration value (bad key, out-of-range setting, degenerate plan).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Invalid runtime input (empty dataset, out-of-range label).
struct InputError : Error {
    explicit InputError(const std::string& msg) : Error(msg) {}
};

// Malformed container file; carries the byte offset where parsing failed.
struct FormatError : Error {
    FormatError(const std::string& msg, std::size_t byte_offset)
        : Error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    std::size_t offset;
};

}  // namespace cadtrans
