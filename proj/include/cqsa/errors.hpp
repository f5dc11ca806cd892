#pragma once

#include <stdexcept>
#include <string>

namespace cqsa {

// Caller passed arguments that violate an operation's preconditions.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// exp() of an attention logit would overflow in raw (unshifted) mode.
class NumericRangeError : public std::range_error {
 public:
  NumericRangeError(const std::string& what, double max_logit)
      : std::range_error(what), max_logit_(max_logit) {}

  double max_logit() const noexcept { return max_logit_; }

 private:
  double max_logit_;
};

// No divide granularity fits the requested memory budget.
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed tensor file, plan JSON or model preset file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cqsa
