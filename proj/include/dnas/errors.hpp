#pragma once

#include <stdexcept>
#include <string>

namespace dnas {

// Error taxonomy. The CLI maps each family onto a process exit code:
// ConfigError -> 2, IoError / ParseError -> 3, NumericError -> 4.

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public IoError {
 public:
  using IoError::IoError;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LookupError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace dnas
