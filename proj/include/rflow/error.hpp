#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rflow {

/// Input had the wrong shape or otherwise failed a precondition on its form.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// An argument was outside the mathematical domain of the operation (e.g. t = 0).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Caller broke an API contract (e.g. backward() on a non-scalar node).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// NaN/Inf or divergence during integration or training. `index` is the step
/// or iteration at which it was detected.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::size_t index)
      : std::runtime_error(what + " (at index " + std::to_string(index) + ")"), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

}  // namespace rflow
