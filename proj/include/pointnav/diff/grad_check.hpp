#pragma once

#include <functional>

#include "pointnav/diff/nn.hpp"
#include "pointnav/diff/tape.hpp"

namespace pointnav::diff {

// Compares tape gradients against central finite differences
// (f(x+eps) - f(x-eps)) / (2 eps) on randomly chosen parameter coordinates.
//
// `build` must construct a scalar loss on the given tape, where the model's
// parameters are already pinned. It is re-invoked for every probe, so the
// loss has to be a deterministic function of the parameters (pin any noise
// draws and subsample indices beforehand).
//
// Error metric per coordinate: |analytic - fd| / max(1, |analytic|, |fd|),
// i.e. relative for large gradients, absolute below magnitude one.
double grad_check(Model& model, const std::function<VarId(Tape&)>& build, Rng& rng,
                  int coords_per_param = 8, double fd_eps = 1e-5);

}  // namespace pointnav::diff
