#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "pointnav/diff/adam.hpp"
#include "pointnav/diff/checkpoint.hpp"
#include "pointnav/diff/grad_check.hpp"
#include "pointnav/diff/nn.hpp"
#include "pointnav/diff/tape.hpp"
#include "pointnav/rng.hpp"

using namespace pointnav;
using namespace pointnav::diff;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& x : t.v) x = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("affine matches a naive triple-loop oracle") {
  Rng rng(11);
  const int b = 4, n = 3, m = 5;
  Tensor x = random_tensor(rng, {b, n});
  Tensor w = random_tensor(rng, {m, n});
  Tensor bias = random_tensor(rng, {m});

  Tape t;
  const VarId y = t.affine(t.leaf(x), t.leaf(w), t.leaf(bias));

  // Independent oracle: elementwise dot products.
  for (int r = 0; r < b; ++r) {
    for (int i = 0; i < m; ++i) {
      double acc = bias.v[static_cast<size_t>(i)];
      for (int j = 0; j < n; ++j) acc += w.at(i, j) * x.at(r, j);
      CHECK(t.val(y).at(r, i) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("affine identity and zero-input cases") {
  Tape t;
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  const VarId x = t.leaf(Tensor::row({1.5, -2.0, 0.25}));
  const VarId y = t.affine(x, t.leaf(eye), t.leaf(Tensor::zeros({3})));
  for (int i = 0; i < 3; ++i) CHECK(t.val(y).v[static_cast<size_t>(i)] == t.val(x).v[static_cast<size_t>(i)]);

  const VarId z = t.affine(t.leaf(Tensor::zeros({3})), t.leaf(eye), t.leaf(Tensor::row({7, 8, 9})));
  CHECK(t.val(z).v[0] == 7.0);
  CHECK(t.val(z).v[2] == 9.0);

  CHECK_THROWS(t.affine(t.leaf(Tensor::row({1, 2})), t.leaf(eye), t.leaf(Tensor::zeros({3}))));
}

TEST_CASE("activation values") {
  Tape t;
  const VarId x = t.leaf(Tensor::row({-1.0, 0.0, 2.0}));
  CHECK(t.val(t.relu(x)).v[0] == 0.0);
  CHECK(t.val(t.relu(x)).v[2] == 2.0);
  CHECK(t.val(t.softplus(x)).v[1] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(t.val(t.tanh_(x)).v[1] == 0.0);
  CHECK(t.val(t.sigmoid(x)).v[1] == 0.5);
  // softplus stays finite and exact-ish at extremes
  const VarId big = t.leaf(Tensor::row({-800.0, 800.0}));
  CHECK(t.val(t.softplus(big)).v[0] == 0.0);
  CHECK(t.val(t.softplus(big)).v[1] == 800.0);
}

TEST_CASE("layer_norm matches the direct formula") {
  Rng rng(5);
  const int n = 7;
  Tensor x = random_tensor(rng, {2, n}, -3.0, 3.0);
  Tensor gain = random_tensor(rng, {n}, 0.5, 1.5);
  Tensor bias = random_tensor(rng, {n});
  const double eps = 1e-5;

  Tape t;
  const VarId y = t.layer_norm(t.leaf(x), t.leaf(gain), t.leaf(bias), eps);

  for (int r = 0; r < 2; ++r) {
    double mu = 0, var = 0;
    for (int c = 0; c < n; ++c) mu += x.at(r, c);
    mu /= n;
    for (int c = 0; c < n; ++c) var += (x.at(r, c) - mu) * (x.at(r, c) - mu);
    var /= n;
    for (int c = 0; c < n; ++c) {
      const double want = (x.at(r, c) - mu) / std::sqrt(var + eps) * gain.v[static_cast<size_t>(c)] +
                          bias.v[static_cast<size_t>(c)];
      CHECK(t.val(y).at(r, c) == doctest::Approx(want).epsilon(1e-12));
    }
  }

  // constant input -> all zeros under unit gain, zero bias
  Tape t2;
  const VarId z = t2.layer_norm(t2.leaf(Tensor::full({4}, 3.25)), t2.leaf(Tensor::full({4}, 1.0)),
                                t2.leaf(Tensor::zeros({4})), eps);
  for (double v : t2.val(z).v) CHECK(v == doctest::Approx(0.0));

  // (1,-1) input has unit variance; eps->0 recovers the input
  Tape t3;
  const VarId u = t3.layer_norm(t3.leaf(Tensor::row({1.0, -1.0})), t3.leaf(Tensor::full({2}, 1.0)),
                                t3.leaf(Tensor::zeros({2})), 0.0);
  CHECK(t3.val(u).v[0] == doctest::Approx(1.0));
  CHECK(t3.val(u).v[1] == doctest::Approx(-1.0));
}

TEST_CASE("lstm_step matches an independent scalar reference") {
  Rng rng(23);
  const int in = 3, hd = 4;
  Model m;
  Rng init_rng(99);
  const LstmLayer layer = make_lstm_layer(m, init_rng, "cell", in, hd);

  Tensor x = random_tensor(rng, {1, in});
  Tensor h0 = random_tensor(rng, {1, hd});
  Tensor c0 = random_tensor(rng, {1, hd});

  Tape t;
  m.pin_all(t);
  auto [h1, c1] = lstm_step(t, layer, t.leaf(x), t.leaf(h0), t.leaf(c0));

  // Scalar reference implementation, gate order i,f,g,o.
  const Tensor& wih = m.at(layer.w_ih).value;
  const Tensor& whh = m.at(layer.w_hh).value;
  const Tensor& b = m.at(layer.b).value;
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (int u = 0; u < hd; ++u) {
    double pre[4];
    for (int g = 0; g < 4; ++g) {
      const int row = g * hd + u;
      double acc = b.v[static_cast<size_t>(row)];
      for (int j = 0; j < in; ++j) acc += wih.at(row, j) * x.v[static_cast<size_t>(j)];
      for (int j = 0; j < hd; ++j) acc += whh.at(row, j) * h0.v[static_cast<size_t>(j)];
      pre[g] = acc;
    }
    const double iv = sig(pre[0]), fv = sig(pre[1]), gv = std::tanh(pre[2]), ov = sig(pre[3]);
    const double cv = fv * c0.v[static_cast<size_t>(u)] + iv * gv;
    const double hv = ov * std::tanh(cv);
    CHECK(t.val(c1).v[static_cast<size_t>(u)] == doctest::Approx(cv).epsilon(1e-12));
    CHECK(t.val(h1).v[static_cast<size_t>(u)] == doctest::Approx(hv).epsilon(1e-12));
  }
}

TEST_CASE("lstm gating identities") {
  // Zero weights, zero state, zero input -> zero output and state.
  Model m;
  Rng rng(1);
  LstmLayer l = make_lstm_layer(m, rng, "z", 2, 3);
  m.at(l.w_ih).value = Tensor::zeros({12, 2});
  m.at(l.w_hh).value = Tensor::zeros({12, 3});
  m.at(l.b).value = Tensor::zeros({12});
  {
    Tape t;
    m.pin_all(t);
    auto [h, c] = lstm_step(t, l, t.leaf(Tensor::zeros({1, 2})), t.leaf(Tensor::zeros({1, 3})),
                            t.leaf(Tensor::zeros({1, 3})));
    for (double v : t.val(h).v) CHECK(v == 0.0);
    for (double v : t.val(c).v) CHECK(v == 0.0);
  }
  // Saturated forget gate, closed input gate -> cell state preserved.
  Tensor b = Tensor::zeros({12});
  for (int i = 0; i < 3; ++i) b.v[static_cast<size_t>(3 + i)] = 100.0;   // forget ~ 1
  for (int i = 0; i < 3; ++i) b.v[static_cast<size_t>(i)] = -100.0;      // input ~ 0
  m.at(l.b).value = b;
  {
    Tape t;
    m.pin_all(t);
    Tensor c0 = Tensor::row({0.3, -0.7, 1.2});
    c0.shape = {1, 3};
    auto [h, c] = lstm_step(t, l, t.leaf(Tensor::zeros({1, 2})), t.leaf(Tensor::zeros({1, 3})), t.leaf(c0));
    (void)h;
    for (int i = 0; i < 3; ++i)
      CHECK(t.val(c).v[static_cast<size_t>(i)] == doctest::Approx(c0.v[static_cast<size_t>(i)]).epsilon(1e-9));
  }
}

TEST_CASE("reparam_sample basics and Monte-Carlo mean") {
  Tape t;
  const VarId mu = t.leaf(Tensor::row({0.5, -1.0}));
  const VarId sigma = t.leaf(Tensor::row({1.0, 2.0}));
  const VarId z0 = t.reparam(mu, sigma, Tensor::zeros({2}));
  CHECK(t.val(z0).v[0] == 0.5);
  CHECK(t.val(z0).v[1] == -1.0);

  const VarId z1 = t.reparam(t.leaf(Tensor::zeros({2})), t.leaf(Tensor::full({2}, 1.0)),
                             Tensor::row({0.3, -0.4}));
  CHECK(t.val(z1).v[0] == 0.3);
  CHECK(t.val(z1).v[1] == -0.4);

  CHECK_THROWS(t.reparam(mu, t.leaf(Tensor::row({1.0, 0.0})), Tensor::zeros({2})));

  // Sample mean over 1e6 draws stays within 4*sigma/sqrt(1e6) of mu.
  Rng rng(42);
  const double want_mu = 0.7, want_sigma = 1.3;
  const int n = 1000000;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += want_mu + want_sigma * rng.normal();
  const double mean = acc / n;
  CHECK(std::abs(mean - want_mu) < 4.0 * want_sigma / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("kl_diag_gauss closed form") {
  Tape t;
  const VarId k0 = t.kl_diag_gauss(t.leaf(Tensor::zeros({3})), t.leaf(Tensor::full({3}, 1.0)));
  for (double v : t.val(k0).v) CHECK(v == doctest::Approx(0.0));

  const VarId k1 = t.kl_diag_gauss(t.leaf(Tensor::row({1.0})), t.leaf(Tensor::row({1.0})));
  CHECK(t.val(k1).v[0] == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS(t.kl_diag_gauss(t.leaf(Tensor::row({0.0})), t.leaf(Tensor::row({-1.0}))));
}

TEST_CASE("kl_diag_gauss nonnegative, zero only at the prior") {
  Rng rng(31);
  Tape t;
  for (int i = 0; i < 200; ++i) {
    const double mu = rng.uniform(-3, 3);
    const double sigma = rng.uniform(0.05, 4.0);
    const VarId k = t.kl_diag_gauss(t.leaf(Tensor::row({mu})), t.leaf(Tensor::row({sigma})));
    CHECK(t.val(k).v[0] >= 0.0);
    if (std::abs(mu) > 1e-3 || std::abs(sigma - 1.0) > 1e-3) CHECK(t.val(k).v[0] > 0.0);
  }
}

TEST_CASE("kl_diag_gauss matches a Monte-Carlo log-density-ratio average") {
  Rng rng(77);
  for (int trial = 0; trial < 2; ++trial) {
    const double mu = rng.uniform(-1.5, 1.5);
    const double sigma = rng.uniform(0.5, 2.0);
    Tape t;
    const double closed =
        t.val(t.kl_diag_gauss(t.leaf(Tensor::row({mu})), t.leaf(Tensor::row({sigma})))).v[0];
    const int n = 200000;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = mu + sigma * rng.normal();
      const double logq = -0.5 * (x - mu) * (x - mu) / (sigma * sigma) - std::log(sigma);
      const double logp = -0.5 * x * x;
      acc += logq - logp;
    }
    const double mc = acc / n;
    CHECK(std::abs(mc - closed) / std::max(0.05, closed) < 0.05);
  }
}

TEST_CASE("grad_check: x^2 at x=3 gives gradient 6") {
  Model m;
  m.add("x", Tensor::row({3.0}));
  Rng rng(4);
  const double err = grad_check(
      m, [](Tape& t) { return t.sum_all(t.square(0)); }, rng, 1, 1e-5);
  CHECK(err < 1e-9);

  Tape t;
  m.pin_all(t);
  const VarId loss = t.sum_all(t.square(0));
  t.backward(loss);
  CHECK(t.grad(0).v[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("grad_check: every primitive under 1e-6 at random smooth points") {
  Rng point_rng(2024);
  for (int rep = 0; rep < 10; ++rep) {
    Model m;
    Rng r(point_rng.next_u64());
    // Random smooth points; keep relu/angdist inputs away from kinks.
    Tensor x = random_tensor(r, {3, 4}, 0.2, 1.5);
    Tensor x2 = random_tensor(r, {3, 4}, 0.3, 1.2);
    Tensor w = random_tensor(r, {5, 4});
    Tensor b = random_tensor(r, {5});
    Tensor gain = random_tensor(r, {4}, 0.5, 1.5);
    Tensor bias = random_tensor(r, {4});
    m.add("x", x);
    m.add("x2", x2);
    m.add("w", w);
    m.add("b", b);
    m.add("gain", gain);
    m.add("bias", bias);
    Tensor mix1 = random_tensor(r, {3, 4});
    Tensor mix2 = random_tensor(r, {3, 5});
    Tensor eps = random_tensor(r, {3, 4});
    Tensor target = random_tensor(r, {3, 4}, -2.5, 2.5);
    std::vector<int> sel{0, 3, 5, 11};

    auto build = [&](Tape& t) -> VarId {
      const VarId X = 0, X2 = 1, W = 2, B = 3, G = 4, BI = 5;
      VarId acc = t.sum_all(t.mul_constt(t.affine(X, W, B), mix2));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.relu(t.sub(X, X2)), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.sigmoid(X), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.tanh_(X), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.softplus(X), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.exp_(t.neg(X)), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.sqrt_(X), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.sin_(X), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.cos_(X), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.square(X), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.div(X, X2), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.mul(X, X2), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.layer_norm(X, G, BI, 1e-5), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.log_softmax_rows(X), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.min2(X, X2), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.clamp(X, 0.25, 1.4), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.reparam(X, X2, eps), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.kl_diag_gauss(X, X2), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.mse_to(X, target), mix1)));
      acc = t.add(acc, t.sum_all(t.mul_constt(t.angdist_to(X, target), mix1)));
      acc = t.add(acc, t.mean_selected(t.concat_cols(X, X2), sel));
      acc = t.add(acc, t.mean_all(t.slice_cols(t.concat_rows({X, X2}), 1, 3)));
      acc = t.add(acc, t.sum_all(t.gather_per_row(X, {0, 2, 3})));
      acc = t.add(acc, t.sum_all(t.row_mask(X, {0.5, 0.0, 2.0})));
      return acc;
    };
    Rng probe_rng(555 + rep);
    const double err = grad_check(m, build, probe_rng, 6, 1e-5);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("embedding gradients accumulate into the right rows") {
  Model m;
  Rng r(8);
  const EmbeddingTable e = make_embedding(m, r, "emb", 4, 3);
  Tape t;
  m.pin_all(t);
  const VarId out = e(t, {2, 2, 0});
  const VarId loss = t.sum_all(out);
  t.backward(loss);
  const Tensor& g = t.grad(e.w);
  for (int c = 0; c < 3; ++c) {
    CHECK(g.at(0, c) == 1.0);
    CHECK(g.at(1, c) == 0.0);
    CHECK(g.at(2, c) == 2.0);
    CHECK(g.at(3, c) == 0.0);
  }
}

TEST_CASE("backward is linear: grad of summed losses equals summed grads") {
  Rng rng(19);
  for (int rep = 0; rep < 5; ++rep) {
    Model m;
    Rng r(rng.next_u64());
    m.add("x", random_tensor(r, {4, 3}, 0.2, 1.0));
    Tensor c1 = random_tensor(r, {4, 5});
    Tensor c2 = random_tensor(r, {4, 3});
    Tensor w = random_tensor(r, {5, 3});
    Tensor b = random_tensor(r, {5});

    auto build_l1 = [&](Tape& t) {
      return t.sum_all(t.mul_constt(t.tanh_(t.affine(0, t.leaf(w), t.leaf(b))), c1));
    };
    auto build_l2 = [&](Tape& t) { return t.sum_all(t.mul_constt(t.square(0), c2)); };

    Tape ta;
    m.pin_all(ta);
    ta.backward(build_l1(ta));
    const Tensor g1 = ta.grad(0);

    Tape tb;
    m.pin_all(tb);
    tb.backward(build_l2(tb));
    const Tensor g2 = tb.grad(0);

    Tape tc;
    m.pin_all(tc);
    tc.backward(tc.add(build_l1(tc), build_l2(tc)));
    const Tensor gsum = tc.grad(0);

    for (size_t i = 0; i < gsum.v.size(); ++i)
      CHECK(gsum.v[i] == doctest::Approx(g1.v[i] + g2.v[i]).epsilon(1e-10));
  }
}

TEST_CASE("non-finite values raise instead of propagating") {
  Tape t;
  CHECK_THROWS(t.leaf(Tensor::row({std::nan("")})));
  const VarId x = t.leaf(Tensor::row({800.0}));
  CHECK_THROWS(t.exp_(x));  // overflows to inf -> error
  const VarId z = t.leaf(Tensor::row({0.0}));
  CHECK_THROWS(t.div(t.leaf(Tensor::row({1.0})), z));
}

TEST_CASE("tape reset keeps pinned parameters and reuses ids") {
  Model m;
  Rng r(3);
  m.add("p", random_tensor(r, {2, 2}));
  Tape t;
  m.pin_all(t);
  const VarId l1 = t.sum_all(t.square(0));
  t.backward(l1);
  const double g_first = t.grad(0).v[0];
  t.reset();
  const VarId l2 = t.sum_all(t.square(0));
  t.backward(l2);
  CHECK(t.grad(0).v[0] == doctest::Approx(g_first));
  CHECK(t.num_pinned() == 1);
}

TEST_CASE("reachable_leaves reports the leaves feeding a loss") {
  Model m;
  Rng r(3);
  m.add("p", random_tensor(r, {2, 2}));
  Tape t;
  m.pin_all(t);
  const VarId used = t.leaf(Tensor::row({1.0, 2.0, 3.0, 4.0}), LeafTag::kGtGoal);
  const VarId unused = t.leaf(Tensor::row({9.0}), LeafTag::kInput);
  (void)unused;
  Tensor used2 = Tensor::zeros({2, 2});
  used2.v = {1, 2, 3, 4};
  VarId loss = t.sum_all(t.mul(t.square(0), t.leaf(used2, LeafTag::kInput)));
  loss = t.add(loss, t.mean_all(used));
  const auto leaves = t.reachable_leaves(loss);
  bool saw_gt = false, saw_unused = false;
  for (VarId v : leaves) {
    if (v == used) saw_gt = true;
    if (v == unused) saw_unused = true;
    CHECK(t.tag(v) != LeafTag::kParam);
  }
  CHECK(saw_gt);
  CHECK(!saw_unused);
}

TEST_CASE("orthogonal init produces orthonormal columns") {
  Rng r(10);
  Tensor q = init_orthogonal(r, 6, 6);
  for (int c1 = 0; c1 < 6; ++c1) {
    for (int c2 = 0; c2 < 6; ++c2) {
      double dot = 0.0;
      for (int row = 0; row < 6; ++row) dot += q.at(row, c1) * q.at(row, c2);
      CHECK(dot == doctest::Approx(c1 == c2 ? 1.0 : 0.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("adam minimizes a quadratic") {
  Model m;
  m.add("x", Tensor::row({5.0, -4.0}));
  Adam opt(0.05);
  opt.init(m);
  Tape t;
  m.pin_all(t);
  for (int i = 0; i < 500; ++i) {
    t.reset();
    m.refresh_all(t);
    const VarId loss = t.sum_all(t.square(0));
    t.backward(loss);
    opt.step(m, t, 0.0);
  }
  CHECK(std::abs(m.at(0).value.v[0]) < 1e-2);
  CHECK(std::abs(m.at(0).value.v[1]) < 1e-2);
  CHECK(opt.updates() == 500);
}

TEST_CASE("checkpoint round-trips tensors and metadata exactly") {
  Rng r(55);
  Checkpoint ck;
  ck.metadata["config"] = "{\"preset\":\"tiny\"}";
  ck.metadata["step"] = "12345";
  ck.tensors["layer.w"] = random_tensor(r, {7, 3}, -10.0, 10.0);
  ck.tensors["layer.b"] = random_tensor(r, {7});
  ck.tensors["scalar"] = Tensor::scalar(0.1 + 0.2);  // not exactly 0.3

  const std::string path = "/tmp/pointnav_test_ck.bin";
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);

  CHECK(back.metadata.at("config") == ck.metadata.at("config"));
  CHECK(back.metadata.at("step") == "12345");
  REQUIRE(back.tensors.size() == 3);
  for (const auto& [name, t0] : ck.tensors) {
    const Tensor& t1 = back.tensors.at(name);
    REQUIRE(t1.shape == t0.shape);
    for (size_t i = 0; i < t0.v.size(); ++i) CHECK(t1.v[i] == t0.v[i]);  // bit-exact
  }
  std::filesystem::remove(path);
}

TEST_CASE("rng state serializes and resumes identically") {
  Rng a(999);
  a.normal();
  a.uniform();
  const std::string s = a.serialize();
  Rng b(1);
  b.deserialize(s);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.normal() == b.normal());
    CHECK(a.uniform() == b.uniform());
    CHECK(a.uniform_int(17) == b.uniform_int(17));
  }
}
