#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "facetalk/param_store.hpp"
#include "facetalk/tape.hpp"

namespace facetalk {

// Central differences (f(p + eps e) - f(p - eps e)) / (2 eps) for every
// coordinate of every block, in store order. `f` reads the store.
std::vector<Array> finite_diff_grad(
    ParamStore& store, const std::function<double(const ParamStore&)>& f,
    double eps = 1e-5);

// Builds a scalar loss on the given tape from the current parameters.
using LossBuilder = std::function<Var(Tape&)>;

struct GradCheckOptions {
  std::size_t samples = 100;
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Coordinates whose +-kink_probe perturbation changes the branch taken by
  // any piecewise op are excluded.
  double kink_probe = 1e-4;
  // Relative error denominator floor, so vanishing gradients are compared on
  // an absolute scale.
  double grad_floor = 1e-6;
  std::uint64_t seed = 0;
};

struct GradCheckFailure {
  std::string block;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  double max_rel_error = 0.0;
  std::vector<GradCheckFailure> failures;
  bool passed() const { return failures.empty() && checked > 0; }
};

// Compares tape gradients against central differences on randomly chosen
// coordinates of the non-frozen blocks of `stores`.
GradCheckReport check_gradients(const std::vector<ParamStore*>& stores,
                                const LossBuilder& build,
                                const GradCheckOptions& options = {});

}  // namespace facetalk
