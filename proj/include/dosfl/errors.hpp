#pragma once

#include <stdexcept>
#include <string>

namespace dosfl {

// Caller broke an interface contract (bad shapes, non-scalar loss, ...).
class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

// A numeric operation produced a non-finite value.
class DivergenceError : public std::runtime_error {
public:
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration value or combination.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or unreadable input file.
class IngestionError : public std::runtime_error {
public:
    explicit IngestionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible distilled datasets handed to the server.
class MergeError : public std::runtime_error {
public:
    explicit MergeError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace dosfl
