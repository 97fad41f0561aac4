#ifndef CCED_ERRORS_HPP
#define CCED_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace cced {

// Error taxonomy. The CLI maps each family to a process exit code.

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed or truncated file content. Carries the byte offset or line
/// number where parsing stopped when known.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A fault-injection campaign could not complete (e.g. SDC resampling
/// exhausted its attempt budget).
class CampaignError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cced

#endif  // CCED_ERRORS_HPP
