// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mpt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite input to a rounding function, or an invalid format.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// An exhaustive enumeration was asked to exceed its size guard.
class EnumerationRefused : public Error {
 public:
  using Error::Error;
};

/// Graph construction or shape inference failed.
class ConstructionError : public Error {
 public:
  using Error::Error;
};

/// A tensor id is not part of the graph.
class LookupError : public Error {
 public:
  using Error::Error;
};

/// Shape mismatch while executing a graph.
class ComputationError : public Error {
 public:
  using Error::Error;
};

/// Malformed config or data file. Carries the offending line when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, long line = -1)
      : Error(line >= 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  long line() const noexcept { return line_; }

 private:
  long line_;
};

}  // namespace mpt
