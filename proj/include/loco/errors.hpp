#pragma once

#include <stdexcept>
#include <string>

namespace loco {

// Operand shapes disagree (matmul inner dims, elementwise shapes, ...).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A documented precondition was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A layout or config document could not be parsed. `field()` names the
// offending entry, e.g. "objects[1].box".
class ParseError : public std::runtime_error {
 public:
  ParseError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace loco
