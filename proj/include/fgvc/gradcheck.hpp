#pragma once

// Central finite-difference checks of every analytic gradient in the library.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fgvc/numerics.hpp"

namespace fgvc {

inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-6;

/// ||a - n|| / max(||a||, ||n||, 1e-8) over all entries.
double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

/// Central differences of f with respect to every entry of `x`; `x` is
/// restored afterwards.
std::vector<double> numeric_gradient(const std::function<double()>& f, std::vector<double*> x,
                                     double h = kGradcheckStep);

struct GradcheckCase {
  std::string name;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  std::size_t worst_instance = 0;
  double seconds = 0.0;

  bool passed(double tol = kGradcheckTolerance) const { return instances > 0 && max_rel_error < tol; }
};

/// Names accepted by run_gradcheck.
std::vector<std::string> gradcheck_names();

/// Runs one named check over `instances` random problems derived from `seed`.
GradcheckCase run_gradcheck(const std::string& name, std::size_t instances, std::uint64_t seed);

/// Every check in gradcheck_names().
std::vector<GradcheckCase> run_gradcheck_suite(std::size_t instances, std::uint64_t seed);

}  // namespace fgvc
