#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace prefixprop {

// Shape or dimension disagreement between operands.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A softmax row with no admissible entry.
class DegenerateRowError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class IndexError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

// Invalid configuration value or mode mismatch.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DeterminismError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class VocabularyError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

class LengthError : public std::length_error {
public:
    using std::length_error::length_error;
};

class LabelError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, long step)
        : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}

    long step() const noexcept { return step_; }

private:
    long step_;
};

}  // namespace prefixprop
