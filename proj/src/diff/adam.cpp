#include "pointnav/diff/adam.hpp"

#include <cmath>

namespace pointnav::diff {

void Adam::init(const Model& m) {
  t_ = 0;
  m_.clear();
  v_.clear();
  for (int i = 0; i < m.size(); ++i) {
    m_.push_back(Tensor::zeros(m.at(i).value.shape));
    v_.push_back(Tensor::zeros(m.at(i).value.shape));
  }
}

double Adam::step(Model& model, Tape& grads, double max_grad_norm) {
  require(static_cast<int>(m_.size()) == model.size(), "Adam::step: call init() first");

  double sq = 0.0;
  for (int i = 0; i < model.size(); ++i) {
    const Tensor& g = grads.grad(i);
    for (double x : g.v) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) fail("Adam::step: non-finite gradient norm");

  double clip = 1.0;
  if (max_grad_norm > 0.0 && norm > max_grad_norm) clip = max_grad_norm / norm;

  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (int i = 0; i < model.size(); ++i) {
    const Tensor& g = grads.grad(i);
    Tensor& p = model.at(i).value;
    Tensor& mm = m_[static_cast<size_t>(i)];
    Tensor& vv = v_[static_cast<size_t>(i)];
    for (size_t k = 0; k < p.v.size(); ++k) {
      const double gk = g.v[k] * clip;
      mm.v[k] = beta1_ * mm.v[k] + (1.0 - beta1_) * gk;
      vv.v[k] = beta2_ * vv.v[k] + (1.0 - beta2_) * gk * gk;
      const double mhat = mm.v[k] / bc1;
      const double vhat = vv.v[k] / bc2;
      p.v[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
  return norm;
}

std::map<std::string, Tensor> Adam::state_tensors(const Model& m) const {
  std::map<std::string, Tensor> out;
  for (int i = 0; i < m.size(); ++i) {
    out["adam.m." + m.at(i).name] = m_[static_cast<size_t>(i)];
    out["adam.v." + m.at(i).name] = v_[static_cast<size_t>(i)];
  }
  return out;
}

void Adam::load_state(const Model& m, const std::map<std::string, Tensor>& tensors, int64_t t) {
  init(m);
  t_ = t;
  for (int i = 0; i < m.size(); ++i) {
    const auto im = tensors.find("adam.m." + m.at(i).name);
    const auto iv = tensors.find("adam.v." + m.at(i).name);
    require(im != tensors.end() && iv != tensors.end(), "Adam::load_state: missing moment tensor");
    require(im->second.same_shape(m_[static_cast<size_t>(i)]), "Adam::load_state: moment shape mismatch");
    m_[static_cast<size_t>(i)] = im->second;
    v_[static_cast<size_t>(i)] = iv->second;
  }
}

}  // namespace pointnav::diff
