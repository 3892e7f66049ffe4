#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sgdph {

// Operand shapes are incompatible (broadcast, matmul, conv, channel count).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operand outside the domain of an elementwise function (log of a
// non-positive value, sqrt of a negative, division by zero).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Misuse of the tape: non-scalar loss, repeated backward, second-order
// request without a differentiable first pass.
class BackwardError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A parameter's ChannelWise1D/Dense tag does not fit the requested operation.
class ParameterKindError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Weight-normalization direction with a vanishing norm.
class DegenerateNormError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// An internal invariant was found broken at runtime; the current step is
// abandoned.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed IDX file. offset is the byte position where parsing stopped.
class IdxError : public std::runtime_error {
 public:
  IdxError(const std::string& path, std::uint64_t offset, const std::string& what)
      : std::runtime_error(path + ": " + what + " (at byte offset " +
                           std::to_string(offset) + ")"),
        path_(path),
        offset_(offset) {}

  const std::string& path() const noexcept { return path_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::string path_;
  std::uint64_t offset_;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t step)
      : std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step)),
        epoch_(epoch),
        step_(step) {}

  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t epoch_;
  std::size_t step_;
};

}  // namespace sgdph
