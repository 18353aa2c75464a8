#pragma once

#include <stdexcept>
#include <string>

namespace td3d {

// Invalid or inconsistent configuration. CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Missing, malformed, or inconsistent data on disk. CLI exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A DataError tied to a line of a text file.
class ParseError : public DataError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what);

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Non-finite loss or other numeric breakdown. CLI exit code 4.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace td3d
