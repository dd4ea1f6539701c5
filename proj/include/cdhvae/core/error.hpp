#pragma once

#include <stdexcept>
#include <string>

namespace cdhvae {

/// Failure categories. Each maps to a distinct process exit code in the CLI.
enum class ErrorKind {
  Configuration,
  InvalidInput,
  Numerical,
  Io,
  Integrity,
  UnsupportedVersion,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Configuration, what) {}
};

struct InputError : Error {
  explicit InputError(const std::string& what) : Error(ErrorKind::InvalidInput, what) {}
};

struct NumericalError : Error {
  explicit NumericalError(const std::string& what) : Error(ErrorKind::Numerical, what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

struct IntegrityError : Error {
  explicit IntegrityError(const std::string& what) : Error(ErrorKind::Integrity, what) {}
};

struct UnsupportedVersionError : Error {
  explicit UnsupportedVersionError(const std::string& what)
      : Error(ErrorKind::UnsupportedVersion, what) {}
};

inline int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Configuration: return 2;
    case ErrorKind::InvalidInput: return 3;
    case ErrorKind::Numerical: return 4;
    case ErrorKind::Io: return 5;
    case ErrorKind::Integrity: return 6;
    case ErrorKind::UnsupportedVersion: return 7;
  }
  return 1;
}

}  // namespace cdhvae
