#pragma once

#include <stdexcept>
#include <string>

namespace ma3 {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input outside the small-perturbation regime of the affine approximation.
class RegimeError : public Error {
 public:
  using Error::Error;
};

/// Point lands at or behind the camera plane.
class ProjectionError : public Error {
 public:
  using Error::Error;
};

/// Least-squares design is collinear or otherwise rank deficient.
class RankDeficientError : public Error {
 public:
  using Error::Error;
};

/// Caller broke a documented precondition (shapes, missing classes, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration key or value; `key()` names the offender when known.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg, std::string key = {})
      : Error(msg), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Checkpoint written by an incompatible format version.
class CheckpointVersionError : public Error {
 public:
  using Error::Error;
};

/// I/O failure (unreadable file, bad PNG, ...).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ma3
