// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace gara {

// Operand dimensions do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad configuration value or combination.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// API called in the wrong order or with unusable arguments.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed or incomplete input data (score tables, checkpoints).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A required input file (checkpoint, score table) does not exist.
class MissingFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, double learning_rate)
      : std::runtime_error("training diverged at step " + std::to_string(step) +
                           " (learning_rate=" + std::to_string(learning_rate) + ")"),
        step_(step),
        learning_rate_(learning_rate) {}

  std::size_t step() const noexcept { return step_; }
  double learning_rate() const noexcept { return learning_rate_; }

 private:
  std::size_t step_;
  double learning_rate_;
};

}  // namespace gara
