#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pointnav/diff/tape.hpp"
#include "pointnav/rng.hpp"

namespace pointnav::diff {

struct Parameter {
  std::string name;
  Tensor value;
};

// Ordered set of named parameters. Pinning into a Tape preserves the index
// order, so a parameter's index doubles as its VarId on any tape it is
// pinned into.
class Model {
 public:
  int add(std::string name, Tensor init);
  Parameter& at(int i) { return params_[static_cast<size_t>(i)]; }
  const Parameter& at(int i) const { return params_[static_cast<size_t>(i)]; }
  const Parameter* find(const std::string& name) const;
  Parameter* find(const std::string& name);
  int size() const { return static_cast<int>(params_.size()); }

  void pin_all(Tape& tape) const;
  void refresh_all(Tape& tape) const;
  int64_t num_scalars() const;

 private:
  std::vector<Parameter> params_;
};

// --- initializers ----------------------------------------------------------
Tensor init_uniform_fanin(Rng& rng, int out, int in);   // U(-1/sqrt(in), 1/sqrt(in))
Tensor init_orthogonal(Rng& rng, int out, int in);      // per-block orthogonal
Tensor init_zeros(int n);

// --- layers ------------------------------------------------------------------

struct Linear {
  int w = -1;
  int b = -1;
  VarId operator()(Tape& t, VarId x) const { return t.affine(x, w, b); }
};

// Weights U(-1/sqrt(in), 1/sqrt(in)), biases zero.
Linear make_linear(Model& m, Rng& rng, const std::string& name, int in, int out);

struct LstmLayer {
  int w_ih = -1;  // [4H x in], gate order i, f, g, o
  int w_hh = -1;  // [4H x H]
  int b = -1;     // [4H], forget-gate block initialized to +1
  int hidden = 0;
};

LstmLayer make_lstm_layer(Model& m, Rng& rng, const std::string& name, int in, int hidden);

// One step of a standard LSTM cell; returns (h', c').
std::pair<VarId, VarId> lstm_step(Tape& t, const LstmLayer& l, VarId x, VarId h, VarId c);

struct LayerNormParams {
  int gain = -1;
  int bias = -1;
  double eps = 1e-5;
  VarId operator()(Tape& t, VarId x) const { return t.layer_norm(x, gain, bias, eps); }
};

LayerNormParams make_layer_norm(Model& m, const std::string& name, int n);

struct EmbeddingTable {
  int w = -1;
  VarId operator()(Tape& t, std::vector<int> ids) const { return t.embedding(w, std::move(ids)); }
};

EmbeddingTable make_embedding(Model& m, Rng& rng, const std::string& name, int vocab, int dim);

}  // namespace pointnav::diff
