#pragma once

#include <stdexcept>
#include <string>

namespace txnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Extent of zero or element count overflow.
class SizeError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class SplitError : public Error {
 public:
  using Error::Error;
};

// Violated precondition that is not about shapes (non-scalar loss, even kernel, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid model configuration, or a tensor bound to the wrong resolution.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class SelectorError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace txnet
