#pragma once

#include <stdexcept>
#include <string>

namespace chemalign {

// Caller violated a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN or Inf produced or consumed by a numeric routine.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Object used in a state that does not permit the operation (e.g. spent tape).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input records.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Sequence does not fit the model context.
class LengthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoints/task vectors that cannot be combined.
class CompatibilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace chemalign
