#pragma once

#include <stdexcept>
#include <string>

namespace sp3d {

// Malformed or unreadable files, bad magic, truncation.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition on an operation's input did not hold.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Runtime failure inside a computation (divergence, empty clustering, ...).
class ComputeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sp3d
