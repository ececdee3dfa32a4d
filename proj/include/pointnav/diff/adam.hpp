#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "pointnav/diff/nn.hpp"
#include "pointnav/diff/tape.hpp"

namespace pointnav::diff {

// Adam over a Model, reading gradients from a tape where the model's
// parameters are pinned (VarId == parameter index). Single-writer: exactly
// one optimizer owns the parameters.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void init(const Model& m);

  // Clips the global gradient norm to max_grad_norm (if > 0), applies one
  // Adam update, returns the pre-clip norm. Throws on non-finite gradients.
  double step(Model& m, Tape& grads, double max_grad_norm);

  int64_t updates() const { return t_; }
  double lr() const { return lr_; }

  // Moment round-trip for checkpoint/resume; names are "adam.m.<p>", "adam.v.<p>".
  std::map<std::string, Tensor> state_tensors(const Model& m) const;
  void load_state(const Model& m, const std::map<std::string, Tensor>& tensors, int64_t t);

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace pointnav::diff
