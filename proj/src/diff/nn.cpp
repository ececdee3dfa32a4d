#include "pointnav/diff/nn.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace pointnav::diff {

int Model::add(std::string name, Tensor init) {
  require(find(name) == nullptr, "Model::add: duplicate parameter name");
  params_.push_back({std::move(name), std::move(init)});
  return static_cast<int>(params_.size()) - 1;
}

const Parameter* Model::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

Parameter* Model::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

void Model::pin_all(Tape& tape) const {
  for (const auto& p : params_) tape.pin(p.value);
}

void Model::refresh_all(Tape& tape) const {
  for (int i = 0; i < size(); ++i) tape.refresh_pinned(i, params_[static_cast<size_t>(i)].value);
}

int64_t Model::num_scalars() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

Tensor init_uniform_fanin(Rng& rng, int out, int in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor t = Tensor::zeros({out, in});
  for (double& x : t.v) x = rng.uniform(-bound, bound);
  return t;
}

Tensor init_orthogonal(Rng& rng, int out, int in) {
  // QR of a Gaussian matrix, sign-fixed by diag(R). For tall or wide shapes
  // the result has orthonormal rows or columns respectively.
  const int n = std::max(out, in);
  Eigen::MatrixXd g(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) g(r, c) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int c = 0; c < n; ++c)
    if (r(c, c) < 0.0) q.col(c) *= -1.0;
  Tensor t = Tensor::zeros({out, in});
  for (int rr = 0; rr < out; ++rr)
    for (int cc = 0; cc < in; ++cc) t.at(rr, cc) = q(rr, cc);
  return t;
}

Tensor init_zeros(int n) { return Tensor::zeros({n}); }

Linear make_linear(Model& m, Rng& rng, const std::string& name, int in, int out) {
  Linear l;
  l.w = m.add(name + ".w", init_uniform_fanin(rng, out, in));
  l.b = m.add(name + ".b", init_zeros(out));
  return l;
}

LstmLayer make_lstm_layer(Model& m, Rng& rng, const std::string& name, int in, int hidden) {
  LstmLayer l;
  l.hidden = hidden;
  l.w_ih = m.add(name + ".w_ih", init_uniform_fanin(rng, 4 * hidden, in));
  // Recurrent weights: one orthogonal block per gate.
  Tensor whh = Tensor::zeros({4 * hidden, hidden});
  for (int g = 0; g < 4; ++g) {
    Tensor block = init_orthogonal(rng, hidden, hidden);
    std::copy(block.v.begin(), block.v.end(), whh.v.begin() + static_cast<long>(g) * hidden * hidden);
  }
  l.w_hh = m.add(name + ".w_hh", std::move(whh));
  Tensor b = Tensor::zeros({4 * hidden});
  for (int i = hidden; i < 2 * hidden; ++i) b.v[static_cast<size_t>(i)] = 1.0;  // forget gate
  l.b = m.add(name + ".b", std::move(b));
  return l;
}

std::pair<VarId, VarId> lstm_step(Tape& t, const LstmLayer& l, VarId x, VarId h, VarId c) {
  const int hd = l.hidden;
  const VarId gates = t.add(t.affine(x, l.w_ih, l.b), t.linear_nob(h, l.w_hh));
  const VarId gi = t.sigmoid(t.slice_cols(gates, 0, hd));
  const VarId gf = t.sigmoid(t.slice_cols(gates, hd, 2 * hd));
  const VarId gg = t.tanh_(t.slice_cols(gates, 2 * hd, 3 * hd));
  const VarId go = t.sigmoid(t.slice_cols(gates, 3 * hd, 4 * hd));
  const VarId c_new = t.add(t.mul(gf, c), t.mul(gi, gg));
  const VarId h_new = t.mul(go, t.tanh_(c_new));
  return {h_new, c_new};
}

LayerNormParams make_layer_norm(Model& m, const std::string& name, int n) {
  LayerNormParams p;
  p.gain = m.add(name + ".gain", Tensor::full({n}, 1.0));
  p.bias = m.add(name + ".bias", init_zeros(n));
  return p;
}

EmbeddingTable make_embedding(Model& m, Rng& rng, const std::string& name, int vocab, int dim) {
  EmbeddingTable e;
  e.w = m.add(name + ".w", init_uniform_fanin(rng, vocab, dim));
  return e;
}

}  // namespace pointnav::diff
