#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pointnav/diff/tensor.hpp"

namespace pointnav::diff {

using VarId = int32_t;
inline constexpr VarId kNoVar = -1;

// Where a leaf's data came from. Used by the privileged-information checks:
// kGtGoal marks the one place ground-truth sensor data may enter the graph.
enum class LeafTag : uint8_t { kNone = 0, kParam, kInput, kGtGoal };

// Reverse-mode tape over a dynamically recorded graph. Vars are created in
// execution order, so recorded order is a topological order and the backward
// pass is a single reverse sweep visiting each node exactly once.
//
// Parameters are "pinned": they occupy the first ids and survive reset(), so
// per-step graphs can be rebuilt without re-importing weights. A tape and its
// tensors are confined to one thread.
class Tape {
 public:
  Tape() = default;

  // --- pinned parameters -------------------------------------------------
  VarId pin(const Tensor& value);                 // before first reset()
  void refresh_pinned(VarId id, const Tensor& value);
  int num_pinned() const { return n_pinned_; }

  // --- leaves and values --------------------------------------------------
  VarId leaf(Tensor value, LeafTag tag = LeafTag::kInput);
  const Tensor& val(VarId id) const { return vals_[static_cast<size_t>(id)]; }
  Tensor& grad(VarId id);
  LeafTag tag(VarId id) const { return tags_[static_cast<size_t>(id)]; }

  // When recording is off, no nodes are stored and backward() is unavailable;
  // forward values are still computed (used for rollout and evaluation).
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  // --- ops ------------------------------------------------------------------
  VarId affine(VarId x, VarId w, VarId b);        // x[Bxn], w[mxn], b[m] -> [Bxm]
  VarId linear_nob(VarId x, VarId w);             // x[Bxn], w[mxn]       -> [Bxm]
  VarId add(VarId a, VarId b);
  VarId sub(VarId a, VarId b);
  VarId mul(VarId a, VarId b);
  VarId div(VarId a, VarId b);
  VarId scale(VarId a, double c);
  VarId add_const(VarId a, double c);
  VarId neg(VarId a) { return scale(a, -1.0); }

  VarId relu(VarId a);
  VarId sigmoid(VarId a);
  VarId tanh_(VarId a);
  VarId softplus(VarId a);
  VarId exp_(VarId a);
  VarId sqrt_(VarId a);
  VarId sin_(VarId a);
  VarId cos_(VarId a);
  VarId square(VarId a);

  VarId layer_norm(VarId x, VarId gain, VarId bias, double eps);

  VarId concat_cols(VarId a, VarId b);
  VarId slice_cols(VarId a, int c0, int c1);
  VarId concat_rows(const std::vector<VarId>& parts);
  VarId row_mask(VarId a, std::vector<double> mask);           // y[r,:] = a[r,:]*mask[r]
  VarId embedding(VarId table, std::vector<int> ids);          // rows of table
  VarId log_softmax_rows(VarId a);
  VarId gather_per_row(VarId a, std::vector<int> col);         // [Bxn] -> [B]

  VarId sum_all(VarId a);                                      // -> [1]
  VarId mean_all(VarId a);                                     // -> [1]
  VarId mean_selected(VarId a, std::vector<int> flat_idx);     // -> [1]

  VarId min2(VarId a, VarId b);
  VarId clamp(VarId a, double lo, double hi);
  VarId mul_constt(VarId a, Tensor c);                         // elementwise by constant
  VarId reparam(VarId mu, VarId sigma, Tensor eps);            // mu + sigma*eps
  VarId kl_diag_gauss(VarId mu, VarId sigma);                  // per-dim KL to N(0,1)
  VarId mse_to(VarId pred, Tensor target);                     // per-elem (pred-target)^2
  VarId angdist_to(VarId pred, Tensor target);                 // per-elem |wrap(pred-target)|

  // --- execution ------------------------------------------------------------
  void backward(VarId loss);
  void reset();  // drop everything except pinned vars

  // --- introspection ----------------------------------------------------------
  // Leaf vars (no producing node) with a path to `target`, pinned params excluded.
  std::vector<VarId> reachable_leaves(VarId target) const;
  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    VarId out = kNoVar;
    std::array<VarId, 3> in{kNoVar, kNoVar, kNoVar};
    int n_in = 0;
    std::function<void(Tape&)> back;
  };

  VarId make_var(Tensor value, LeafTag tag);
  VarId emit(Tensor value, std::initializer_list<VarId> inputs,
             std::function<void(Tape&)> back, const char* op_name);
  void ensure_grad(VarId id);
  const Tensor& checked(VarId id) const;

  std::vector<Tensor> vals_;
  std::vector<Tensor> grads_;
  std::vector<uint8_t> grad_live_;
  std::vector<LeafTag> tags_;
  std::vector<int32_t> producer_;  // var id -> node index, -1 for leaves
  std::vector<Node> nodes_;
  std::unordered_map<int32_t, std::vector<VarId>> extra_inputs_;  // for wide ops
  int n_pinned_ = 0;
  bool sealed_pins_ = false;
  bool recording_ = true;
};

}  // namespace pointnav::diff
