#pragma once

#include <stdexcept>
#include <string>

namespace dcollab {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// process exit codes: UsageError -> 2, DataError/FormatError -> 3,
// NumericError -> 4.

// Incompatible tensor shapes. The message always names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// API misuse or invalid configuration (bad strategy name, mask length, ...).
class UsageError : public std::logic_error {
 public:
  explicit UsageError(const std::string& msg) : std::logic_error(msg) {}
};

// Invalid sample content (out-of-range label, degenerate geometry, ...).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Out-of-range index, e.g. a class label outside [0, K).
class IndexError : public std::out_of_range {
 public:
  explicit IndexError(const std::string& msg) : std::out_of_range(msg) {}
};

// Corrupt or mismatched file container (bad magic, truncation, ...).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required (diverged loss, ...).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dcollab
