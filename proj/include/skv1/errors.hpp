// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace skv1 {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  NumericError(const std::string& what, long index = -1) : Error(what), index_(index) {}
  // Offending coordinate or step, -1 when not applicable.
  long index() const { return index_; }

 private:
  long index_;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class VariantError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class OptimizationError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace skv1
