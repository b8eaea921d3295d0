#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace ncdssm {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Base class for all numerical failures (exit code 3 at the CLI).
class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

class NotPositiveSemiDefinite : public NumericalError {
public:
  explicit NotPositiveSemiDefinite(const std::string& what) : NumericalError(what) {}
};

class SingularFactor : public NumericalError {
public:
  explicit SingularFactor(const std::string& what) : NumericalError(what) {}
};

class SingularInnovation : public NumericalError {
public:
  explicit SingularInnovation(const std::string& what) : NumericalError(what) {}
};

class SingularFilteredCovariance : public NumericalError {
public:
  explicit SingularFilteredCovariance(const std::string& what) : NumericalError(what) {}
};

class DivergedIntegration : public NumericalError {
public:
  DivergedIntegration(const std::string& what, double tau)
      : NumericalError(what + " at t=" + std::to_string(tau)), tau(tau) {}
  double tau;
};

/// Configuration / user-input problems (exit code 2 at the CLI).
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class DataFormatError : public std::runtime_error {
public:
  DataFormatError(const std::string& what, long line = -1)
      : std::runtime_error(line >= 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line(line) {}
  long line;
};

inline bool all_finite(const Mat& m) { return m.allFinite(); }

/// Strictly-lower mask applied in place.
inline Mat lower_triangle(const Mat& m) {
  return m.triangularView<Eigen::Lower>();
}

}  // namespace ncdssm
