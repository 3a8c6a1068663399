// Error types shared by all refinery modules.
#pragma once

#include <stdexcept>
#include <string>

namespace refinery {

// Shape disagreement between operands.
struct dim_error : std::runtime_error {
    explicit dim_error(const std::string& msg) : std::runtime_error(msg) {}
};

// An argument value outside the operation's contract.
struct input_error : std::runtime_error {
    explicit input_error(const std::string& msg) : std::runtime_error(msg) {}
};

// An object used outside its valid lifecycle (unfitted, stale, frozen).
struct state_error : std::runtime_error {
    explicit state_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed on-disk data; message names the byte offset where parsing failed.
struct parse_error : std::runtime_error {
    explicit parse_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace refinery
