#pragma once

#include <stdexcept>
#include <string>

namespace temde {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/width mismatches between tensors.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Violated call contracts: backward on a non-scalar, empty sequences,
// degenerate batches, out-of-range arguments.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed binary files (bad magic, version, truncation).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Malformed text inputs (captions, config files).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Token id outside the vocabulary.
class VocabularyError : public Error {
 public:
  using Error::Error;
};

}  // namespace temde
