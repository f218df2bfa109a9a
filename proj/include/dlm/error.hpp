#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace dlm {

/// Root of every error raised by the library. The CLI maps subclasses onto
/// process exit codes (see exit_code_for in harness.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class InfeasibleSchedule : public Error {
 public:
  using Error::Error;
};

/// A caller broke the commit/clamp contract of a MaskedState or layout.
class ProtocolViolation : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class EstimationFailure : public Error {
 public:
  EstimationFailure(const std::string& what, double acceptance_rate)
      : Error(what), acceptance_rate_(acceptance_rate) {}
  double acceptance_rate() const noexcept { return acceptance_rate_; }

 private:
  double acceptance_rate_;
};

class StallError : public Error {
 public:
  using Error::Error;
};

class InvalidTrajectory : public Error {
 public:
  using Error::Error;
};

class LayoutError : public Error {
 public:
  using Error::Error;
};

class IncompleteDecode : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& key_path, const std::string& what)
      : Error(key_path.empty() ? what : key_path + ": " + what), key_path_(key_path) {}
  const std::string& key_path() const noexcept { return key_path_; }

 private:
  std::string key_path_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Tag-grammar or file-format error; offset is a byte offset into the input.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Failure of an out-of-process or in-process AR scorer. SeqDep fills in the
/// boundary index before propagating.
class ScorerError : public Error {
 public:
  using Error::Error;
  void set_boundary(std::size_t n) { boundary_ = n; }
  std::optional<std::size_t> boundary() const noexcept { return boundary_; }

 private:
  std::optional<std::size_t> boundary_;
};

/// Endpoint (scorer or teacher) could not be reached after all retries.
class EndpointUnavailable : public ScorerError {
 public:
  using ScorerError::ScorerError;
};

/// Endpoint answered with something that does not follow the wire protocol.
class ProtocolError : public ScorerError {
 public:
  ProtocolError(const std::string& what, std::string raw_payload)
      : ScorerError(what + ": " + raw_payload), raw_(std::move(raw_payload)) {}
  const std::string& raw_payload() const noexcept { return raw_; }

 private:
  std::string raw_;
};

class CurationError : public Error {
 public:
  CurationError(const std::string& what, std::size_t trace_index)
      : Error("trace " + std::to_string(trace_index) + ": " + what), trace_index_(trace_index) {}
  std::size_t trace_index() const noexcept { return trace_index_; }

 private:
  std::size_t trace_index_;
};

}  // namespace dlm
