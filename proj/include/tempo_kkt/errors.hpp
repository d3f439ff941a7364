#pragma once

/// \file errors.hpp
/// \brief Exception types raised by the tempo_kkt library.

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tempo_kkt {

/// \brief Base class of every library error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class SingularMatrix : public Error {
 public:
  using Error::Error;
};

class NonFiniteValue : public Error {
 public:
  using Error::Error;
};

/// \brief Arnoldi produced a zero vector while the residual is still nonzero.
class Breakdown : public Error {
 public:
  using Error::Error;
};

class NewtonDivergence : public Error {
 public:
  using Error::Error;
};

/// \brief A diagonal block of the time-ordered KKT operator could not be factored.
class SingularBlock : public Error {
 public:
  SingularBlock(std::size_t block, const std::string& what)
      : Error("singular diagonal block " + std::to_string(block) + ": " + what),
        block_(block) {}
  std::size_t block() const noexcept { return block_; }

 private:
  std::size_t block_;
};

/// \brief The step count is not divisible by the coarsening factor of the hierarchy.
class IndivisibleSteps : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

inline void require_dims(bool ok, const char* what) {
  if (!ok) throw DimensionMismatch(what);
}

}  // namespace tempo_kkt
