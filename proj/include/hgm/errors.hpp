#pragma once

#include <stdexcept>
#include <string>

namespace hgm {

// Shape/index/argument violations. CLI maps these to exit code 2.
class ValueError : public std::runtime_error {
public:
    explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public ValueError {
public:
    explicit ShapeError(const std::string& msg) : ValueError(msg) {}
};

// Non-finite values, failed convergence, NaN gradients. CLI maps these to exit code 3.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed files. Carries the byte offset where parsing stopped.
class ParseError : public ValueError {
public:
    ParseError(const std::string& msg, std::size_t byte_offset)
        : ValueError(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    std::size_t offset;
};

}  // namespace hgm
