#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fishersft {

// Error taxonomy. Every library failure is one of these; the CLI maps them
// onto exit codes (usage = 1, data = 2, numerical = 3).

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UnsupportedSize : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InvalidState : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ParseErrorKind { kMagicMismatch, kTruncated, kDimensionMismatch, kMalformed, kIo };

class ParseError : public std::runtime_error {
 public:
  ParseError(ParseErrorKind kind, const std::string& what, std::size_t line = 0, std::size_t offset = 0)
      : std::runtime_error(what), kind_(kind), line_(line), offset_(offset) {}

  ParseErrorKind kind() const noexcept { return kind_; }
  // 1-based line for text formats, 0 when not applicable.
  std::size_t line() const noexcept { return line_; }
  // Byte offset for binary formats.
  std::size_t offset() const noexcept { return offset_; }

 private:
  ParseErrorKind kind_;
  std::size_t line_;
  std::size_t offset_;
};

}  // namespace fishersft
