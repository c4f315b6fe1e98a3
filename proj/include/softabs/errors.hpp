#pragma once

#include <stdexcept>
#include <string>

namespace softabs {

/// Parameter lies outside the support of the density (identity-transformed
/// hyperparameter <= 0). Samplers treat it as a rejected proposal.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Non-finite state or a failed implicit solve inside a trajectory.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An iterative routine hit its iteration cap.
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace softabs
