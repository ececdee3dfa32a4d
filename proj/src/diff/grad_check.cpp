#include "pointnav/diff/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace pointnav::diff {

namespace {

double eval_loss(Model& model, const std::function<VarId(Tape&)>& build) {
  Tape tape;
  tape.set_recording(false);
  model.pin_all(tape);
  const VarId loss = build(tape);
  require(tape.val(loss).numel() == 1, "grad_check: loss must be scalar");
  return tape.val(loss).v[0];
}

}  // namespace

double grad_check(Model& model, const std::function<VarId(Tape&)>& build, Rng& rng,
                  int coords_per_param, double fd_eps) {
  // Analytic gradients once.
  Tape tape;
  model.pin_all(tape);
  const VarId loss = build(tape);
  tape.backward(loss);

  double worst = 0.0;
  for (int p = 0; p < model.size(); ++p) {
    const int64_t n = model.at(p).value.numel();
    const int probes = static_cast<int>(std::min<int64_t>(coords_per_param, n));
    std::vector<int> coords;
    if (probes == n) {
      coords.resize(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      coords = rng.sample_without_replacement(static_cast<int>(n), probes);
    }
    for (int idx : coords) {
      const double analytic = tape.grad(p).v[static_cast<size_t>(idx)];
      double& x = model.at(p).value.v[static_cast<size_t>(idx)];
      const double saved = x;
      x = saved + fd_eps;
      const double fp = eval_loss(model, build);
      x = saved - fd_eps;
      const double fm = eval_loss(model, build);
      x = saved;
      const double fd = (fp - fm) / (2.0 * fd_eps);
      const double err = std::abs(analytic - fd) / std::max({1.0, std::abs(analytic), std::abs(fd)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace pointnav::diff
