#include "pointnav/diff/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <deque>

#include "pointnav/geom.hpp"

namespace pointnav::diff {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EMat>;
using MapConst = Eigen::Map<const EMat>;

MapConst as_mat(const Tensor& t) { return MapConst(t.v.data(), t.rows(), t.cols()); }
MapMat as_mat(Tensor& t) { return MapMat(t.v.data(), t.rows(), t.cols()); }

// Rank-1 inputs produce rank-1 outputs.
std::vector<int> like_rows(const Tensor& x, int out_cols) {
  if (x.shape.size() == 2) return {x.shape[0], out_cols};
  return {out_cols};
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

VarId Tape::make_var(Tensor value, LeafTag tag) {
  vals_.push_back(std::move(value));
  grads_.emplace_back();
  grad_live_.push_back(0);
  tags_.push_back(tag);
  producer_.push_back(-1);
  return static_cast<VarId>(vals_.size() - 1);
}

VarId Tape::pin(const Tensor& value) {
  require(!sealed_pins_, "Tape::pin: cannot pin after graph construction started");
  require(value.finite(), "Tape::pin: non-finite parameter");
  const VarId id = make_var(value, LeafTag::kParam);
  n_pinned_ = id + 1;
  return id;
}

void Tape::refresh_pinned(VarId id, const Tensor& value) {
  require(id >= 0 && id < n_pinned_, "Tape::refresh_pinned: not a pinned var");
  require(vals_[static_cast<size_t>(id)].same_shape(value), "Tape::refresh_pinned: shape changed");
  vals_[static_cast<size_t>(id)].v = value.v;
}

VarId Tape::leaf(Tensor value, LeafTag tag) {
  sealed_pins_ = true;
  require(value.finite(), "Tape::leaf: non-finite input");
  return make_var(std::move(value), tag);
}

const Tensor& Tape::checked(VarId id) const {
  require(id >= 0 && id < static_cast<VarId>(vals_.size()), "Tape: bad var id");
  return vals_[static_cast<size_t>(id)];
}

Tensor& Tape::grad(VarId id) {
  ensure_grad(id);
  return grads_[static_cast<size_t>(id)];
}

void Tape::ensure_grad(VarId id) {
  if (!grad_live_[static_cast<size_t>(id)]) {
    const Tensor& v = vals_[static_cast<size_t>(id)];
    Tensor& g = grads_[static_cast<size_t>(id)];
    g.shape = v.shape;
    g.v.assign(v.v.size(), 0.0);
    grad_live_[static_cast<size_t>(id)] = 1;
  }
}

VarId Tape::emit(Tensor value, std::initializer_list<VarId> inputs,
                 std::function<void(Tape&)> back, const char* op_name) {
  sealed_pins_ = true;
  if (!value.finite()) fail(std::string("diff op produced non-finite values: ") + op_name);
  const VarId out = make_var(std::move(value), LeafTag::kNone);
  if (recording_) {
    Node n;
    n.out = out;
    n.n_in = 0;
    for (VarId i : inputs) n.in[static_cast<size_t>(n.n_in++)] = i;
    n.back = std::move(back);
    producer_[static_cast<size_t>(out)] = static_cast<int32_t>(nodes_.size());
    nodes_.push_back(std::move(n));
  }
  return out;
}

// The backward lambdas capture ids; by the time they run, the output id is
// nodes_[i].out and its grad is live. Helper to fetch it inside lambdas.
#define PN_UPSTREAM(t, out) ((t).grads_[static_cast<size_t>(out)])
#define PN_VAL(t, id) ((t).vals_[static_cast<size_t>(id)])

// ---------------------------------------------------------------------------
// linear algebra

VarId Tape::affine(VarId x, VarId w, VarId b) {
  const Tensor& xv = checked(x);
  const Tensor& wv = checked(w);
  const Tensor& bv = checked(b);
  require(wv.shape.size() == 2, "affine: W must be rank 2");
  const int m = wv.shape[0];
  const int n = wv.shape[1];
  require(xv.cols() == n, "affine: shape mismatch between x and W");
  require(bv.numel() == m, "affine: shape mismatch between W and b");

  Tensor out = Tensor::zeros(like_rows(xv, m));
  as_mat(out).noalias() = as_mat(xv) * as_mat(wv).transpose();
  as_mat(out).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.v.data(), m);

  const VarId o = emit(std::move(out), {x, w, b}, {}, "affine");
  if (recording_) {
    nodes_.back().back = [o, x, w, b](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& xv2 = PN_VAL(t, x);
      const Tensor& wv2 = PN_VAL(t, w);
      t.ensure_grad(x);
      t.ensure_grad(w);
      t.ensure_grad(b);
      as_mat(t.grads_[static_cast<size_t>(x)]).noalias() += as_mat(u) * as_mat(wv2);
      as_mat(t.grads_[static_cast<size_t>(w)]).noalias() += as_mat(u).transpose() * as_mat(xv2);
      Eigen::Map<Eigen::RowVectorXd>(t.grads_[static_cast<size_t>(b)].v.data(),
                                     t.grads_[static_cast<size_t>(b)].numel()) +=
          as_mat(u).colwise().sum();
    };
  }
  return o;
}

VarId Tape::linear_nob(VarId x, VarId w) {
  const Tensor& xv = checked(x);
  const Tensor& wv = checked(w);
  require(wv.shape.size() == 2, "linear_nob: W must be rank 2");
  const int n = wv.shape[1];
  require(xv.cols() == n, "linear_nob: shape mismatch between x and W");

  Tensor out = Tensor::zeros(like_rows(xv, wv.shape[0]));
  as_mat(out).noalias() = as_mat(xv) * as_mat(wv).transpose();

  const VarId o = emit(std::move(out), {x, w}, {}, "linear_nob");
  if (recording_) {
    nodes_.back().back = [o, x, w](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      t.ensure_grad(x);
      t.ensure_grad(w);
      as_mat(t.grads_[static_cast<size_t>(x)]).noalias() += as_mat(u) * as_mat(PN_VAL(t, w));
      as_mat(t.grads_[static_cast<size_t>(w)]).noalias() +=
          as_mat(u).transpose() * as_mat(PN_VAL(t, x));
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// elementwise binary

VarId Tape::add(VarId a, VarId b) {
  const Tensor& av = checked(a);
  const Tensor& bv = checked(b);
  require(av.same_shape(bv), "add: shape mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv.v[i];
  const VarId o = emit(std::move(out), {a, b}, {}, "add");
  if (recording_) {
    nodes_.back().back = [o, a, b](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      t.ensure_grad(a);
      t.ensure_grad(b);
      Tensor& ga = t.grads_[static_cast<size_t>(a)];
      Tensor& gb = t.grads_[static_cast<size_t>(b)];
      for (size_t i = 0; i < u.v.size(); ++i) {
        ga.v[i] += u.v[i];
        gb.v[i] += u.v[i];
      }
    };
  }
  return o;
}

VarId Tape::sub(VarId a, VarId b) {
  const Tensor& av = checked(a);
  const Tensor& bv = checked(b);
  require(av.same_shape(bv), "sub: shape mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv.v[i];
  const VarId o = emit(std::move(out), {a, b}, {}, "sub");
  if (recording_) {
    nodes_.back().back = [o, a, b](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      t.ensure_grad(a);
      t.ensure_grad(b);
      for (size_t i = 0; i < u.v.size(); ++i) {
        t.grads_[static_cast<size_t>(a)].v[i] += u.v[i];
        t.grads_[static_cast<size_t>(b)].v[i] -= u.v[i];
      }
    };
  }
  return o;
}

VarId Tape::mul(VarId a, VarId b) {
  const Tensor& av = checked(a);
  const Tensor& bv = checked(b);
  require(av.same_shape(bv), "mul: shape mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv.v[i];
  const VarId o = emit(std::move(out), {a, b}, {}, "mul");
  if (recording_) {
    nodes_.back().back = [o, a, b](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& av2 = PN_VAL(t, a);
      const Tensor& bv2 = PN_VAL(t, b);
      t.ensure_grad(a);
      t.ensure_grad(b);
      for (size_t i = 0; i < u.v.size(); ++i) {
        t.grads_[static_cast<size_t>(a)].v[i] += u.v[i] * bv2.v[i];
        t.grads_[static_cast<size_t>(b)].v[i] += u.v[i] * av2.v[i];
      }
    };
  }
  return o;
}

VarId Tape::div(VarId a, VarId b) {
  const Tensor& av = checked(a);
  const Tensor& bv = checked(b);
  require(av.same_shape(bv), "div: shape mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] /= bv.v[i];
  const VarId o = emit(std::move(out), {a, b}, {}, "div");
  if (recording_) {
    nodes_.back().back = [o, a, b](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& av2 = PN_VAL(t, a);
      const Tensor& bv2 = PN_VAL(t, b);
      t.ensure_grad(a);
      t.ensure_grad(b);
      for (size_t i = 0; i < u.v.size(); ++i) {
        const double inv = 1.0 / bv2.v[i];
        t.grads_[static_cast<size_t>(a)].v[i] += u.v[i] * inv;
        t.grads_[static_cast<size_t>(b)].v[i] -= u.v[i] * av2.v[i] * inv * inv;
      }
    };
  }
  return o;
}

VarId Tape::scale(VarId a, double c) {
  Tensor out = checked(a);
  for (double& x : out.v) x *= c;
  const VarId o = emit(std::move(out), {a}, {}, "scale");
  if (recording_) {
    nodes_.back().back = [o, a, c](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i) t.grads_[static_cast<size_t>(a)].v[i] += c * u.v[i];
    };
  }
  return o;
}

VarId Tape::add_const(VarId a, double c) {
  Tensor out = checked(a);
  for (double& x : out.v) x += c;
  const VarId o = emit(std::move(out), {a}, {}, "add_const");
  if (recording_) {
    nodes_.back().back = [o, a](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i) t.grads_[static_cast<size_t>(a)].v[i] += u.v[i];
    };
  }
  return o;
}

VarId Tape::mul_constt(VarId a, Tensor c) {
  const Tensor& av = checked(a);
  require(av.v.size() == c.v.size(), "mul_constt: size mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= c.v[i];
  const VarId o = emit(std::move(out), {a}, {}, "mul_constt");
  if (recording_) {
    nodes_.back().back = [o, a, c = std::move(c)](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i)
        t.grads_[static_cast<size_t>(a)].v[i] += u.v[i] * c.v[i];
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// elementwise unary

VarId Tape::relu(VarId a) {
  Tensor out = checked(a);
  for (double& x : out.v) x = x > 0.0 ? x : 0.0;
  const VarId o = emit(std::move(out), {a}, {}, "relu");
  if (recording_) {
    nodes_.back().back = [o, a](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& av = PN_VAL(t, a);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i)
        if (av.v[i] > 0.0) t.grads_[static_cast<size_t>(a)].v[i] += u.v[i];
    };
  }
  return o;
}

VarId Tape::sigmoid(VarId a) {
  Tensor out = checked(a);
  for (double& x : out.v) x = stable_sigmoid(x);
  const VarId o = emit(std::move(out), {a}, {}, "sigmoid");
  if (recording_) {
    nodes_.back().back = [o, a](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& y = PN_VAL(t, o);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i)
        t.grads_[static_cast<size_t>(a)].v[i] += u.v[i] * y.v[i] * (1.0 - y.v[i]);
    };
  }
  return o;
}

VarId Tape::tanh_(VarId a) {
  Tensor out = checked(a);
  for (double& x : out.v) x = std::tanh(x);
  const VarId o = emit(std::move(out), {a}, {}, "tanh");
  if (recording_) {
    nodes_.back().back = [o, a](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& y = PN_VAL(t, o);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i)
        t.grads_[static_cast<size_t>(a)].v[i] += u.v[i] * (1.0 - y.v[i] * y.v[i]);
    };
  }
  return o;
}

VarId Tape::softplus(VarId a) {
  Tensor out = checked(a);
  // max(x,0) + log1p(exp(-|x|)), safe against overflow
  for (double& x : out.v) x = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  const VarId o = emit(std::move(out), {a}, {}, "softplus");
  if (recording_) {
    nodes_.back().back = [o, a](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& av = PN_VAL(t, a);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i)
        t.grads_[static_cast<size_t>(a)].v[i] += u.v[i] * stable_sigmoid(av.v[i]);
    };
  }
  return o;
}

VarId Tape::exp_(VarId a) {
  Tensor out = checked(a);
  for (double& x : out.v) x = std::exp(x);
  const VarId o = emit(std::move(out), {a}, {}, "exp");
  if (recording_) {
    nodes_.back().back = [o, a](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& y = PN_VAL(t, o);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i)
        t.grads_[static_cast<size_t>(a)].v[i] += u.v[i] * y.v[i];
    };
  }
  return o;
}

VarId Tape::sqrt_(VarId a) {
  Tensor out = checked(a);
  for (double& x : out.v) x = std::sqrt(x);
  const VarId o = emit(std::move(out), {a}, {}, "sqrt");
  if (recording_) {
    nodes_.back().back = [o, a](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& y = PN_VAL(t, o);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i)
        t.grads_[static_cast<size_t>(a)].v[i] += u.v[i] * 0.5 / y.v[i];
    };
  }
  return o;
}

VarId Tape::sin_(VarId a) {
  Tensor out = checked(a);
  for (double& x : out.v) x = std::sin(x);
  const VarId o = emit(std::move(out), {a}, {}, "sin");
  if (recording_) {
    nodes_.back().back = [o, a](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& av = PN_VAL(t, a);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i)
        t.grads_[static_cast<size_t>(a)].v[i] += u.v[i] * std::cos(av.v[i]);
    };
  }
  return o;
}

VarId Tape::cos_(VarId a) {
  Tensor out = checked(a);
  for (double& x : out.v) x = std::cos(x);
  const VarId o = emit(std::move(out), {a}, {}, "cos");
  if (recording_) {
    nodes_.back().back = [o, a](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& av = PN_VAL(t, a);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i)
        t.grads_[static_cast<size_t>(a)].v[i] -= u.v[i] * std::sin(av.v[i]);
    };
  }
  return o;
}

VarId Tape::square(VarId a) {
  Tensor out = checked(a);
  for (double& x : out.v) x = x * x;
  const VarId o = emit(std::move(out), {a}, {}, "square");
  if (recording_) {
    nodes_.back().back = [o, a](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& av = PN_VAL(t, a);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i)
        t.grads_[static_cast<size_t>(a)].v[i] += u.v[i] * 2.0 * av.v[i];
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// normalization

VarId Tape::layer_norm(VarId x, VarId gain, VarId bias, double eps) {
  const Tensor& xv = checked(x);
  const Tensor& gv = checked(gain);
  const Tensor& bv = checked(bias);
  const int n = xv.cols();
  require(n >= 1, "layer_norm: empty input");
  require(gv.numel() == n && bv.numel() == n, "layer_norm: gain/bias shape mismatch");
  const int rows = xv.rows();

  Tensor out = xv;
  for (int r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (int c = 0; c < n; ++c) mu += xv.v[static_cast<size_t>(r) * n + c];
    mu /= n;
    double var = 0.0;
    for (int c = 0; c < n; ++c) {
      const double d = xv.v[static_cast<size_t>(r) * n + c] - mu;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < n; ++c) {
      const double xhat = (xv.v[static_cast<size_t>(r) * n + c] - mu) * inv;
      out.v[static_cast<size_t>(r) * n + c] = xhat * gv.v[static_cast<size_t>(c)] + bv.v[static_cast<size_t>(c)];
    }
  }
  const VarId o = emit(std::move(out), {x, gain, bias}, {}, "layer_norm");
  if (recording_) {
    nodes_.back().back = [o, x, gain, bias, eps, n, rows](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& xv2 = PN_VAL(t, x);
      const Tensor& gv2 = PN_VAL(t, gain);
      t.ensure_grad(x);
      t.ensure_grad(gain);
      t.ensure_grad(bias);
      Tensor& gx = t.grads_[static_cast<size_t>(x)];
      Tensor& gg = t.grads_[static_cast<size_t>(gain)];
      Tensor& gb = t.grads_[static_cast<size_t>(bias)];
      std::vector<double> xhat(static_cast<size_t>(n)), dxhat(static_cast<size_t>(n));
      for (int r = 0; r < rows; ++r) {
        const size_t off = static_cast<size_t>(r) * n;
        double mu = 0.0;
        for (int c = 0; c < n; ++c) mu += xv2.v[off + c];
        mu /= n;
        double var = 0.0;
        for (int c = 0; c < n; ++c) {
          const double d = xv2.v[off + c] - mu;
          var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        double m1 = 0.0, m2 = 0.0;
        for (int c = 0; c < n; ++c) {
          xhat[static_cast<size_t>(c)] = (xv2.v[off + c] - mu) * inv;
          dxhat[static_cast<size_t>(c)] = u.v[off + c] * gv2.v[static_cast<size_t>(c)];
          gg.v[static_cast<size_t>(c)] += u.v[off + c] * xhat[static_cast<size_t>(c)];
          gb.v[static_cast<size_t>(c)] += u.v[off + c];
          m1 += dxhat[static_cast<size_t>(c)];
          m2 += dxhat[static_cast<size_t>(c)] * xhat[static_cast<size_t>(c)];
        }
        m1 /= n;
        m2 /= n;
        for (int c = 0; c < n; ++c)
          gx.v[off + c] += inv * (dxhat[static_cast<size_t>(c)] - m1 - xhat[static_cast<size_t>(c)] * m2);
      }
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// shape plumbing

VarId Tape::concat_cols(VarId a, VarId b) {
  const Tensor& av = checked(a);
  const Tensor& bv = checked(b);
  require(av.rows() == bv.rows(), "concat_cols: row mismatch");
  const int rows = av.rows();
  const int na = av.cols();
  const int nb = bv.cols();
  const bool rank2 = av.shape.size() == 2 || bv.shape.size() == 2;
  Tensor out = Tensor::zeros(rank2 ? std::vector<int>{rows, na + nb} : std::vector<int>{na + nb});
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < na; ++c) out.v[static_cast<size_t>(r) * (na + nb) + c] = av.v[static_cast<size_t>(r) * na + c];
    for (int c = 0; c < nb; ++c) out.v[static_cast<size_t>(r) * (na + nb) + na + c] = bv.v[static_cast<size_t>(r) * nb + c];
  }
  const VarId o = emit(std::move(out), {a, b}, {}, "concat_cols");
  if (recording_) {
    nodes_.back().back = [o, a, b, rows, na, nb](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      t.ensure_grad(a);
      t.ensure_grad(b);
      Tensor& ga = t.grads_[static_cast<size_t>(a)];
      Tensor& gb = t.grads_[static_cast<size_t>(b)];
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < na; ++c) ga.v[static_cast<size_t>(r) * na + c] += u.v[static_cast<size_t>(r) * (na + nb) + c];
        for (int c = 0; c < nb; ++c) gb.v[static_cast<size_t>(r) * nb + c] += u.v[static_cast<size_t>(r) * (na + nb) + na + c];
      }
    };
  }
  return o;
}

VarId Tape::slice_cols(VarId a, int c0, int c1) {
  const Tensor& av = checked(a);
  const int n = av.cols();
  require(0 <= c0 && c0 < c1 && c1 <= n, "slice_cols: bad range");
  const int rows = av.rows();
  const int m = c1 - c0;
  Tensor out = Tensor::zeros(av.shape.size() == 2 ? std::vector<int>{rows, m} : std::vector<int>{m});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < m; ++c) out.v[static_cast<size_t>(r) * m + c] = av.v[static_cast<size_t>(r) * n + c0 + c];
  const VarId o = emit(std::move(out), {a}, {}, "slice_cols");
  if (recording_) {
    nodes_.back().back = [o, a, c0, m, n, rows](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      t.ensure_grad(a);
      Tensor& ga = t.grads_[static_cast<size_t>(a)];
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < m; ++c) ga.v[static_cast<size_t>(r) * n + c0 + c] += u.v[static_cast<size_t>(r) * m + c];
    };
  }
  return o;
}

VarId Tape::concat_rows(const std::vector<VarId>& parts) {
  require(!parts.empty(), "concat_rows: no parts");
  const int cols = checked(parts[0]).cols();
  int total = 0;
  for (VarId p : parts) {
    require(checked(p).cols() == cols, "concat_rows: column mismatch");
    total += checked(p).rows();
  }
  Tensor out = Tensor::zeros({total, cols});
  int r0 = 0;
  for (VarId p : parts) {
    const Tensor& pv = checked(p);
    std::copy(pv.v.begin(), pv.v.end(), out.v.begin() + static_cast<long>(r0) * cols);
    r0 += pv.rows();
  }
  // emit() takes at most 3 inputs; register the full list manually.
  sealed_pins_ = true;
  if (!out.finite()) fail("diff op produced non-finite values: concat_rows");
  const VarId o = make_var(std::move(out), LeafTag::kNone);
  if (recording_) {
    Node node;
    node.out = o;
    node.n_in = 0;  // inputs tracked in extra_inputs
    auto parts_copy = parts;
    node.back = [o, parts_copy, cols](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      int r = 0;
      for (VarId p : parts_copy) {
        t.ensure_grad(p);
        Tensor& gp = t.grads_[static_cast<size_t>(p)];
        const int pr = gp.rows();
        for (int i = 0; i < pr * cols; ++i) gp.v[static_cast<size_t>(i)] += u.v[static_cast<size_t>(r) * cols + i];
        r += pr;
      }
    };
    producer_[static_cast<size_t>(o)] = static_cast<int32_t>(nodes_.size());
    extra_inputs_[static_cast<int32_t>(nodes_.size())] = parts;
    nodes_.push_back(std::move(node));
  }
  return o;
}

VarId Tape::row_mask(VarId a, std::vector<double> mask) {
  const Tensor& av = checked(a);
  require(static_cast<int>(mask.size()) == av.rows(), "row_mask: mask size mismatch");
  const int cols = av.cols();
  Tensor out = av;
  for (int r = 0; r < av.rows(); ++r)
    for (int c = 0; c < cols; ++c) out.v[static_cast<size_t>(r) * cols + c] *= mask[static_cast<size_t>(r)];
  const VarId o = emit(std::move(out), {a}, {}, "row_mask");
  if (recording_) {
    nodes_.back().back = [o, a, mask = std::move(mask), cols](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      t.ensure_grad(a);
      Tensor& ga = t.grads_[static_cast<size_t>(a)];
      for (int r = 0; r < static_cast<int>(mask.size()); ++r)
        for (int c = 0; c < cols; ++c)
          ga.v[static_cast<size_t>(r) * cols + c] += u.v[static_cast<size_t>(r) * cols + c] * mask[static_cast<size_t>(r)];
    };
  }
  return o;
}

VarId Tape::embedding(VarId table, std::vector<int> ids) {
  const Tensor& tv = checked(table);
  require(tv.shape.size() == 2, "embedding: table must be rank 2");
  const int v = tv.shape[0];
  const int d = tv.shape[1];
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
  for (size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] >= 0 && ids[r] < v, "embedding: id out of range");
    std::copy(tv.v.begin() + static_cast<long>(ids[r]) * d, tv.v.begin() + static_cast<long>(ids[r] + 1) * d,
              out.v.begin() + static_cast<long>(r) * d);
  }
  const VarId o = emit(std::move(out), {table}, {}, "embedding");
  if (recording_) {
    nodes_.back().back = [o, table, ids = std::move(ids), d](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      t.ensure_grad(table);
      Tensor& gt = t.grads_[static_cast<size_t>(table)];
      for (size_t r = 0; r < ids.size(); ++r)
        for (int c = 0; c < d; ++c) gt.v[static_cast<size_t>(ids[r]) * d + c] += u.v[r * d + c];
    };
  }
  return o;
}

VarId Tape::log_softmax_rows(VarId a) {
  const Tensor& av = checked(a);
  const int rows = av.rows();
  const int n = av.cols();
  Tensor out = av;
  for (int r = 0; r < rows; ++r) {
    const size_t off = static_cast<size_t>(r) * n;
    double mx = out.v[off];
    for (int c = 1; c < n; ++c) mx = std::max(mx, out.v[off + c]);
    double lse = 0.0;
    for (int c = 0; c < n; ++c) lse += std::exp(out.v[off + c] - mx);
    lse = mx + std::log(lse);
    for (int c = 0; c < n; ++c) out.v[off + c] -= lse;
  }
  const VarId o = emit(std::move(out), {a}, {}, "log_softmax");
  if (recording_) {
    nodes_.back().back = [o, a, rows, n](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& y = PN_VAL(t, o);
      t.ensure_grad(a);
      Tensor& ga = t.grads_[static_cast<size_t>(a)];
      for (int r = 0; r < rows; ++r) {
        const size_t off = static_cast<size_t>(r) * n;
        double usum = 0.0;
        for (int c = 0; c < n; ++c) usum += u.v[off + c];
        for (int c = 0; c < n; ++c) ga.v[off + c] += u.v[off + c] - std::exp(y.v[off + c]) * usum;
      }
    };
  }
  return o;
}

VarId Tape::gather_per_row(VarId a, std::vector<int> col) {
  const Tensor& av = checked(a);
  const int rows = av.rows();
  const int n = av.cols();
  require(static_cast<int>(col.size()) == rows, "gather_per_row: index size mismatch");
  Tensor out = Tensor::zeros({rows});
  for (int r = 0; r < rows; ++r) {
    require(col[static_cast<size_t>(r)] >= 0 && col[static_cast<size_t>(r)] < n, "gather_per_row: column out of range");
    out.v[static_cast<size_t>(r)] = av.v[static_cast<size_t>(r) * n + col[static_cast<size_t>(r)]];
  }
  const VarId o = emit(std::move(out), {a}, {}, "gather_per_row");
  if (recording_) {
    nodes_.back().back = [o, a, col = std::move(col), n](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      t.ensure_grad(a);
      Tensor& ga = t.grads_[static_cast<size_t>(a)];
      for (size_t r = 0; r < col.size(); ++r) ga.v[r * n + col[r]] += u.v[r];
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// reductions

VarId Tape::sum_all(VarId a) {
  const Tensor& av = checked(a);
  double s = 0.0;
  for (double x : av.v) s += x;
  const VarId o = emit(Tensor::scalar(s), {a}, {}, "sum_all");
  if (recording_) {
    nodes_.back().back = [o, a](Tape& t) {
      const double u = PN_UPSTREAM(t, o).v[0];
      t.ensure_grad(a);
      for (double& g : t.grads_[static_cast<size_t>(a)].v) g += u;
    };
  }
  return o;
}

VarId Tape::mean_all(VarId a) {
  const Tensor& av = checked(a);
  require(!av.v.empty(), "mean_all: empty input");
  double s = 0.0;
  for (double x : av.v) s += x;
  const double inv = 1.0 / static_cast<double>(av.v.size());
  const VarId o = emit(Tensor::scalar(s * inv), {a}, {}, "mean_all");
  if (recording_) {
    nodes_.back().back = [o, a, inv](Tape& t) {
      const double u = PN_UPSTREAM(t, o).v[0] * inv;
      t.ensure_grad(a);
      for (double& g : t.grads_[static_cast<size_t>(a)].v) g += u;
    };
  }
  return o;
}

VarId Tape::mean_selected(VarId a, std::vector<int> flat_idx) {
  const Tensor& av = checked(a);
  require(!flat_idx.empty(), "mean_selected: empty selection");
  double s = 0.0;
  for (int i : flat_idx) {
    require(i >= 0 && i < static_cast<int>(av.v.size()), "mean_selected: index out of range");
    s += av.v[static_cast<size_t>(i)];
  }
  const double inv = 1.0 / static_cast<double>(flat_idx.size());
  const VarId o = emit(Tensor::scalar(s * inv), {a}, {}, "mean_selected");
  if (recording_) {
    nodes_.back().back = [o, a, flat_idx = std::move(flat_idx), inv](Tape& t) {
      const double u = PN_UPSTREAM(t, o).v[0] * inv;
      t.ensure_grad(a);
      Tensor& ga = t.grads_[static_cast<size_t>(a)];
      for (int i : flat_idx) ga.v[static_cast<size_t>(i)] += u;
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// clipping and stochastic pieces

VarId Tape::min2(VarId a, VarId b) {
  const Tensor& av = checked(a);
  const Tensor& bv = checked(b);
  require(av.same_shape(bv), "min2: shape mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::min(av.v[i], bv.v[i]);
  const VarId o = emit(std::move(out), {a, b}, {}, "min2");
  if (recording_) {
    nodes_.back().back = [o, a, b](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& av2 = PN_VAL(t, a);
      const Tensor& bv2 = PN_VAL(t, b);
      t.ensure_grad(a);
      t.ensure_grad(b);
      for (size_t i = 0; i < u.v.size(); ++i) {
        if (av2.v[i] <= bv2.v[i])
          t.grads_[static_cast<size_t>(a)].v[i] += u.v[i];
        else
          t.grads_[static_cast<size_t>(b)].v[i] += u.v[i];
      }
    };
  }
  return o;
}

VarId Tape::clamp(VarId a, double lo, double hi) {
  const Tensor& av = checked(a);
  Tensor out = av;
  for (double& x : out.v) x = std::min(std::max(x, lo), hi);
  const VarId o = emit(std::move(out), {a}, {}, "clamp");
  if (recording_) {
    nodes_.back().back = [o, a, lo, hi](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& av2 = PN_VAL(t, a);
      t.ensure_grad(a);
      for (size_t i = 0; i < u.v.size(); ++i)
        if (av2.v[i] >= lo && av2.v[i] <= hi) t.grads_[static_cast<size_t>(a)].v[i] += u.v[i];
    };
  }
  return o;
}

VarId Tape::reparam(VarId mu, VarId sigma, Tensor eps) {
  const Tensor& mv = checked(mu);
  const Tensor& sv = checked(sigma);
  require(mv.same_shape(sv), "reparam: mu/sigma shape mismatch");
  require(mv.v.size() == eps.v.size(), "reparam: eps size mismatch");
  for (double s : sv.v) require(s > 0.0, "reparam: sigma must be positive");
  Tensor out = mv;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += sv.v[i] * eps.v[i];
  const VarId o = emit(std::move(out), {mu, sigma}, {}, "reparam");
  if (recording_) {
    nodes_.back().back = [o, mu, sigma, eps = std::move(eps)](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      t.ensure_grad(mu);
      t.ensure_grad(sigma);
      for (size_t i = 0; i < u.v.size(); ++i) {
        t.grads_[static_cast<size_t>(mu)].v[i] += u.v[i];
        t.grads_[static_cast<size_t>(sigma)].v[i] += u.v[i] * eps.v[i];
      }
    };
  }
  return o;
}

VarId Tape::kl_diag_gauss(VarId mu, VarId sigma) {
  const Tensor& mv = checked(mu);
  const Tensor& sv = checked(sigma);
  require(mv.same_shape(sv), "kl_diag_gauss: shape mismatch");
  for (double s : sv.v) require(s > 0.0, "kl_diag_gauss: sigma must be positive");
  Tensor out = mv;
  for (size_t i = 0; i < out.v.size(); ++i) {
    const double m = mv.v[i];
    const double s = sv.v[i];
    out.v[i] = 0.5 * (s * s + m * m - 1.0) - std::log(s);
  }
  const VarId o = emit(std::move(out), {mu, sigma}, {}, "kl_diag_gauss");
  if (recording_) {
    nodes_.back().back = [o, mu, sigma](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& mv2 = PN_VAL(t, mu);
      const Tensor& sv2 = PN_VAL(t, sigma);
      t.ensure_grad(mu);
      t.ensure_grad(sigma);
      for (size_t i = 0; i < u.v.size(); ++i) {
        t.grads_[static_cast<size_t>(mu)].v[i] += u.v[i] * mv2.v[i];
        t.grads_[static_cast<size_t>(sigma)].v[i] += u.v[i] * (sv2.v[i] - 1.0 / sv2.v[i]);
      }
    };
  }
  return o;
}

VarId Tape::mse_to(VarId pred, Tensor target) {
  const Tensor& pv = checked(pred);
  require(pv.v.size() == target.v.size(), "mse_to: target size mismatch");
  Tensor out = pv;
  for (size_t i = 0; i < out.v.size(); ++i) {
    const double d = pv.v[i] - target.v[i];
    out.v[i] = d * d;
  }
  const VarId o = emit(std::move(out), {pred}, {}, "mse_to");
  if (recording_) {
    nodes_.back().back = [o, pred, target = std::move(target)](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& pv2 = PN_VAL(t, pred);
      t.ensure_grad(pred);
      for (size_t i = 0; i < u.v.size(); ++i)
        t.grads_[static_cast<size_t>(pred)].v[i] += u.v[i] * 2.0 * (pv2.v[i] - target.v[i]);
    };
  }
  return o;
}

VarId Tape::angdist_to(VarId pred, Tensor target) {
  const Tensor& pv = checked(pred);
  require(pv.v.size() == target.v.size(), "angdist_to: target size mismatch");
  Tensor out = pv;
  for (size_t i = 0; i < out.v.size(); ++i)
    out.v[i] = std::abs(geom::wrap_angle(pv.v[i] - target.v[i]));
  const VarId o = emit(std::move(out), {pred}, {}, "angdist_to");
  if (recording_) {
    nodes_.back().back = [o, pred, target = std::move(target)](Tape& t) {
      const Tensor& u = PN_UPSTREAM(t, o);
      const Tensor& pv2 = PN_VAL(t, pred);
      t.ensure_grad(pred);
      for (size_t i = 0; i < u.v.size(); ++i) {
        const double w = geom::wrap_angle(pv2.v[i] - target.v[i]);
        const double s = w > 0.0 ? 1.0 : (w < 0.0 ? -1.0 : 0.0);
        t.grads_[static_cast<size_t>(pred)].v[i] += u.v[i] * s;
      }
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// execution

void Tape::backward(VarId loss) {
  require(recording_, "Tape::backward: recording is off");
  require(checked(loss).numel() == 1, "Tape::backward: loss must be a scalar");
  ensure_grad(loss);
  grads_[static_cast<size_t>(loss)].v[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (grad_live_[static_cast<size_t>(it->out)] && it->back) it->back(*this);
  }
}

void Tape::reset() {
  vals_.resize(static_cast<size_t>(n_pinned_));
  grads_.resize(static_cast<size_t>(n_pinned_));
  tags_.resize(static_cast<size_t>(n_pinned_));
  producer_.resize(static_cast<size_t>(n_pinned_));
  grad_live_.assign(static_cast<size_t>(n_pinned_), 0);
  nodes_.clear();
  extra_inputs_.clear();
}

std::vector<VarId> Tape::reachable_leaves(VarId target) const {
  require(recording_, "Tape::reachable_leaves: recording is off");
  std::vector<uint8_t> seen(vals_.size(), 0);
  std::deque<VarId> queue{target};
  std::vector<VarId> leaves;
  seen[static_cast<size_t>(target)] = 1;
  while (!queue.empty()) {
    const VarId v = queue.front();
    queue.pop_front();
    const int32_t p = producer_[static_cast<size_t>(v)];
    if (p < 0) {
      if (tags_[static_cast<size_t>(v)] != LeafTag::kParam) leaves.push_back(v);
      continue;
    }
    const Node& node = nodes_[static_cast<size_t>(p)];
    auto visit = [&](VarId in) {
      if (in >= 0 && !seen[static_cast<size_t>(in)]) {
        seen[static_cast<size_t>(in)] = 1;
        queue.push_back(in);
      }
    };
    for (int i = 0; i < node.n_in; ++i) visit(node.in[static_cast<size_t>(i)]);
    const auto extra = extra_inputs_.find(p);
    if (extra != extra_inputs_.end())
      for (VarId in : extra->second) visit(in);
  }
  std::sort(leaves.begin(), leaves.end());
  return leaves;
}

}  // namespace pointnav::diff
