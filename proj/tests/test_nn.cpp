#include "doctest.h"

#include "ncdssm/nn.hpp"
#include "ncdssm/sqrt_linalg.hpp"

#include <cmath>

using namespace ncdssm;
using ad::Tape;
using ad::Var;

TEST_CASE("init schemes") {
  Rng rng(1);
  nn::Mlp net("f", {{4, 4, 4}, nn::Activation::Tanh, true, false});

  SUBCASE("orthogonal weights have unit gram") {
    ParamStore ps;
    net.register_params(ps, nn::InitScheme::Orthogonal, rng);
    const Mat w = ps.at("f.w0").value;
    CHECK((w.transpose() * w - Mat::Identity(4, 4)).norm() <= 1e-10);
    CHECK(la::spectral_norm(w, 100) == doctest::Approx(1.0));
  }

  SUBCASE("zero last layer") {
    ParamStore ps;
    net.register_params(ps, nn::InitScheme::ZeroLastLayer, rng);
    CHECK(ps.at("f.w1").value.isZero());
    CHECK(ps.at("f.b1").value.isZero());
    CHECK(!ps.at("f.w0").value.isZero());
  }

  SUBCASE("seed determinism") {
    ParamStore a, b;
    Rng r1(42), r2(42);
    net.register_params(a, nn::InitScheme::DefaultUniform, r1);
    net.register_params(b, nn::InitScheme::DefaultUniform, r2);
    for (const auto& name : a.names())
      CHECK((a.at(name).value - b.at(name).value).norm() == 0.0);
  }

  SUBCASE("skew-symmetric seed") {
    const Mat s = nn::skew_symmetric(rng, 5);
    CHECK((s + s.transpose()).norm() <= 1e-14);
    CHECK(la::spectral_norm(la::matrix_exponential(s), 200) == doctest::Approx(1.0).epsilon(1e-8));
  }
}

TEST_CASE("forward basics") {
  Rng rng(2);

  SUBCASE("zero-init last layer with tanh after last gives exactly zero") {
    nn::Mlp net("f", {{3, 8, 3}, nn::Activation::Tanh, true, false});
    ParamStore ps;
    net.register_params(ps, nn::InitScheme::ZeroLastLayer, rng);
    Tape t;
    Binding b = bind(ps, t);
    Var out = net.forward(b, t.constant(rng.normal_mat(3, 1)));
    CHECK(t.value(out).isZero());
  }

  SUBCASE("identity-configured linear layer") {
    nn::Mlp net("f", {{3, 3}, nn::Activation::None, false, false});
    ParamStore ps;
    net.register_params(ps, nn::InitScheme::DefaultUniform, rng);
    ps.at("f.w0").value = Mat::Identity(3, 3);
    const Mat x = rng.normal_mat(3, 1);
    Tape t;
    Binding b = bind(ps, t);
    CHECK(t.value(net.forward(b, t.constant(x))).isApprox(x, 1e-14));
  }
}

TEST_CASE("spectral_normalize kernel") {
  SUBCASE("already contractive weights pass through") {
    Mat w = 0.5 * Mat::Identity(3, 3);
    Vec v = Vec::Ones(3);
    CHECK(nn::spectral_normalize(w, v, 50).isApprox(w));
  }
  SUBCASE("normalizes by the top singular value") {
    Mat w = Mat::Zero(2, 2);
    w(0, 0) = 4.0;
    w(1, 1) = 1.0;
    Vec v = Vec::Ones(2);
    const Mat out = nn::spectral_normalize(w, v, 100);
    CHECK(out(0, 0) == doctest::Approx(1.0));
    CHECK(out(1, 1) == doctest::Approx(0.25));
  }
  SUBCASE("random weights come out 1-Lipschitz") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      Mat w = 3.0 * rng.normal_mat(5, 4);
      Vec v = Vec::Ones(4);
      const Mat out = nn::spectral_normalize(w, v, 50);
      CHECK(la::spectral_norm(out, 200) <= 1.0 + 1e-3);
    }
  }
}

TEST_CASE("spectral-normalized forward is 1-Lipschitz per layer") {
  Rng rng(4);
  nn::Mlp net("f", {{4, 16, 4}, nn::Activation::Softplus, false, true});
  ParamStore ps;
  net.register_params(ps, nn::InitScheme::DefaultUniform, rng);
  // Inflate the raw weights so normalization has to act.
  ps.at("f.w0").value *= 5.0;
  ps.at("f.w1").value *= 5.0;
  for (int i = 0; i < 50; ++i) net.refresh_spectral_state(ps);

  Tape t;
  Binding b = bind(ps, t);
  for (int l = 0; l < 2; ++l) {
    const Mat eff = t.value(net.weight(b, l));
    CHECK(la::spectral_norm(eff, 200) <= 1.0 + 1e-3);
  }
  // Softplus is 1-Lipschitz, so the whole net contracts pairs up to the bound.
  const int layers = net.layers();
  const double bound = std::pow(1.0 + 1e-3, layers);
  for (int trial = 0; trial < 30; ++trial) {
    const Mat x = rng.normal_mat(4, 1);
    const Mat y = rng.normal_mat(4, 1);
    const double dx = (x - y).norm();
    const double df = (t.value(net.forward(b, t.constant(x))) -
                       t.value(net.forward(b, t.constant(y))))
                          .norm();
    CHECK(df <= bound * dx + 1e-12);
  }
}

TEST_CASE("mlp forward gradients match finite differences") {
  Rng rng(5);
  nn::Mlp net("f", {{3, 6, 2}, nn::Activation::Tanh, false, false});
  ParamStore ps;
  net.register_params(ps, nn::InitScheme::DefaultUniform, rng);
  const Mat x = rng.normal_mat(3, 1);
  auto rep = grad_check(ps, [&](Tape& t, Binding& b) {
    return t.reduce_sum(t.square(net.forward(b, t.constant(x))));
  });
  CHECK(rep.max_rel_err <= 1e-5);
}

TEST_CASE("diag gaussian head") {
  SUBCASE("zero noise returns the mean") {
    Tape t;
    nn::DiagGaussianHead head;
    Var mean = t.constant(Vec::LinSpaced(3, -1.0, 1.0));
    Var stddev = t.constant(Vec::Ones(3));
    Var s = nn::DiagGaussianHead::sample(t, mean, stddev, Vec::Zero(3));
    CHECK(t.value(s).isApprox(t.value(mean)));
  }
  SUBCASE("std floor clamps collapsed scales") {
    Tape t;
    nn::DiagGaussianHead head;
    Var raw = t.constant(Mat::Constant(3, 1, -1e9));
    const Mat stddev = t.value(head.std_from_raw(t, raw));
    CHECK(stddev.minCoeff() == doctest::Approx(1e-3));
  }
  SUBCASE("monte carlo variance matches") {
    Rng rng(6);
    Tape t;
    nn::DiagGaussianHead head;
    Var mean = t.constant(Vec::Zero(1));
    Var stddev = t.constant(Vec::Constant(1, 0.7));
    double sum = 0.0, sumsq = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      const double draw = t.value(nn::DiagGaussianHead::sample(t, mean, stddev, rng.normal_vec(1)))(0, 0);
      sum += draw;
      sumsq += draw * draw;
      t.clear();
      mean = t.constant(Vec::Zero(1));
      stddev = t.constant(Vec::Constant(1, 0.7));
    }
    const double var = sumsq / n - (sum / n) * (sum / n);
    CHECK(var == doctest::Approx(0.49).epsilon(0.02));
  }
}
