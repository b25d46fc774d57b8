#pragma once

#include <stdexcept>
#include <string>

namespace fomemo {

// Base class for every error thrown by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Cholesky failed even after the jitter ladder was exhausted.
struct FactorizationError : Error {
  using Error::Error;
};

// Quantile boundaries collapsed (non-increasing support).
struct DegenerateSupport : Error {
  using Error::Error;
};

// Tensor or token-count mismatch in the model forward/backward pass.
struct ShapeError : Error {
  using Error::Error;
};

// Dimension outside the supported range (Sobol tables, 1-d slice tools).
struct DimensionError : Error {
  using Error::Error;
};

// Input outside the mathematical domain of an estimator or transform.
struct DomainError : Error {
  using Error::Error;
};

// An operation that needs at least one observed point got none.
struct EmptyTrajectory : Error {
  using Error::Error;
};

// Benchmark evaluation requested outside the problem's box bounds.
struct BoundsError : Error {
  using Error::Error;
};

// The benchmark has no closed-form Pareto front sampler.
struct NoAnalyticFront : Error {
  using Error::Error;
};

// Child process replied with malformed or wrong-arity JSON.
struct ProtocolError : Error {
  using Error::Error;
};

// Child process exited or closed its pipe mid-conversation.
struct ChildExitError : Error {
  using Error::Error;
};

// Child process failed to answer within the configured timeout.
struct TimeoutError : Error {
  using Error::Error;
};

// Checkpoint file is truncated, has a bad magic, or an inconsistent manifest.
struct CheckpointError : Error {
  using Error::Error;
};

// CLI/run configuration is missing a field or holds an invalid value.
struct ConfigError : Error {
  using Error::Error;
};

// Report generation could not locate a reference front.
struct MissingReference : Error {
  using Error::Error;
};

// Unknown problem name or invalid problem specification.
struct ProblemError : Error {
  using Error::Error;
};

// A run log line or other persisted structure failed to parse.
struct SerializationError : Error {
  using Error::Error;
};

// File could not be opened, read, or written.
struct IoError : Error {
  using Error::Error;
};

// A benchmark problem evaluation raised; the run keeps its partial log.
struct ProblemEvaluationError : Error {
  using Error::Error;
};

}  // namespace fomemo
