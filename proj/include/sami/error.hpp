#pragma once

#include <stdexcept>
#include <string>

namespace sami {

// Bad user-supplied data: malformed files, contract violations, unknown keys.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem problems: missing or unreadable paths.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Corrupt or mismatched binary artifacts (checkpoints).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values where finite ones are required (diverged training).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace sami
