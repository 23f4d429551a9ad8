#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nis {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Two fields (or a field and a mask) live on different grids.
class GridMismatch : public Error {
 public:
  using Error::Error;
};

/// Invalid arguments or configuration values.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Iterative method gave up, or produced non-finite values.
class NumericalFailure : public Error {
 public:
  using Error::Error;
};

class NonConvergence : public NumericalFailure {
 public:
  NonConvergence(const std::string& what, std::size_t iterations, double residual)
      : NumericalFailure(what), iterations_(iterations), residual_(residual) {}

  std::size_t iterations() const noexcept { return iterations_; }
  double residual() const noexcept { return residual_; }

 private:
  std::size_t iterations_;
  double residual_;
};

/// The implicit system's diagonal has a (near) zero entry.
class SingularPreconditioner : public NumericalFailure {
 public:
  SingularPreconditioner(const std::string& what, std::size_t node)
      : NumericalFailure(what), node_(node) {}
  std::size_t node() const noexcept { return node_; }

 private:
  std::size_t node_;
};

/// Malformed files (models, manifests, configs, CSV).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Model and problem disagree on term count, stencils or layer shapes.
class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

/// The iteration matrix could not be shown to be contractive.
class CertificationRefused : public Error {
 public:
  using Error::Error;
};

}  // namespace nis
