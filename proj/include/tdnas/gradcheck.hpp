#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "tdnas/errors.hpp"

namespace tdnas {

// Two-point central difference estimate of df/dx_i at x. The scalar
// function is evaluated at x +/- h e_i; h trades truncation error
// (O(h^2)) against cancellation, so callers pick it per use.
inline double central_difference(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, std::size_t index, double h) {
  if (!(h > 0.0)) throw ValueError("central_difference: step must be positive");
  if (index >= x.size())
    throw ValueError("central_difference: index out of range");
  double orig = x[index];
  x[index] = orig + h;
  double fp = f(x);
  x[index] = orig - h;
  double fm = f(x);
  if (!std::isfinite(fp) || !std::isfinite(fm))
    throw ValueError("central_difference: function value is non-finite");
  return (fp - fm) / (2.0 * h);
}

// Relative error between an analytic gradient entry and its finite
// difference estimate, using the symmetric denominator.
inline double gradient_rel_error(double analytic, double numeric) {
  double denom = std::abs(analytic) + std::abs(numeric);
  if (denom == 0.0) return 0.0;
  return std::abs(analytic - numeric) / denom;
}

}  // namespace tdnas
