#pragma once

#include <stdexcept>
#include <string>

namespace pillar {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input files.
class FormatError : public Error {
public:
  using Error::Error;
};

class DimensionError : public Error {
public:
  using Error::Error;
};

// Cholesky failed even after jitter escalation.
class FactorizationError : public Error {
public:
  FactorizationError(const std::string &what, double last_jitter)
      : Error(what), last_jitter_(last_jitter) {}
  double last_jitter() const { return last_jitter_; }

private:
  double last_jitter_;
};

class ConvergenceError : public Error {
public:
  ConvergenceError(const std::string &what, double last_delta)
      : Error(what), last_delta_(last_delta) {}
  double last_delta() const { return last_delta_; }

private:
  double last_delta_;
};

// Invalid parameters or configuration; the CLI maps this to exit code 2.
class ConfigError : public Error {
public:
  using Error::Error;
};

} // namespace pillar
