#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace sgdiff {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Shapes of operands do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration value is outside its documented domain.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced NaN or Inf.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

Index shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

}  // namespace sgdiff
