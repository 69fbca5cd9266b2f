#pragma once

#include <stdexcept>
#include <string>

namespace comcat {

// Exception hierarchy thrown by the core. The C API maps each class onto a
// status code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class RankRangeError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, double residual = 0.0)
      : Error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

class DegenerateSpectrumError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class BudgetError : public Error {
 public:
  BudgetError(const std::string& what, double minimum)
      : Error(what), minimum_(minimum) {}
  double minimum() const { return minimum_; }

 private:
  double minimum_;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace comcat
