#pragma once

#include <stdexcept>
#include <string>

namespace kgl {

/// Base of every error raised by the library. `exit_code()` is the process
/// status the CLI reports for it.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
  virtual const char* kind() const noexcept { return "error"; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
  const char* kind() const noexcept override { return "config"; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape"; }
};

/// Non-finite or out-of-domain numeric input.
class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
  const char* kind() const noexcept override { return "data"; }
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(std::string what, long step, std::string component)
      : Error(std::move(what)), step_(step), component_(std::move(component)) {}
  int exit_code() const noexcept override { return 4; }
  const char* kind() const noexcept override { return "divergence"; }
  long step() const noexcept { return step_; }
  const std::string& component() const noexcept { return component_; }

 private:
  long step_;
  std::string component_;
};

}  // namespace kgl
