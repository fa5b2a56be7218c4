/* Copyright 2026 The fwmark Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace fwmark {

// Base of every error raised by the library. Callers that only need to
// distinguish "our" failures from everything else catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor-core contract violations.
class DimensionError : public Error {
 public:
  using Error::Error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class NumericError : public Error {
 public:
  using Error::Error;
};
class IndexError : public Error {
 public:
  using Error::Error;
};
class ContractError : public Error {
 public:
  using Error::Error;
};

// File and format problems. All of these map to the IO/format exit code.
class IoError : public Error {
 public:
  using Error::Error;
};
class FormatError : public IoError {
 public:
  using IoError::IoError;
};
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};
class IntegrityError : public FormatError {
 public:
  using FormatError::FormatError;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Generator training ran its full budget without reproducing the key.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double acc_tri,
                   std::vector<float> loss_tail)
      : Error(what), acc_tri_(acc_tri), loss_tail_(std::move(loss_tail)) {}

  double acc_tri() const { return acc_tri_; }
  const std::vector<float>& loss_tail() const { return loss_tail_; }

 private:
  double acc_tri_;
  std::vector<float> loss_tail_;
};

}  // namespace fwmark
