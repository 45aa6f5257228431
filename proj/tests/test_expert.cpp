#include <doctest.h>

#include <random>

#include "apagnn/errors.hpp"
#include "apagnn/expert.hpp"
#include "oracles.hpp"

using namespace apagnn;

namespace {

// Path 0-1-2-3 plus the chord 0-2.
Matrix toy_adjacency() {
  Matrix a = Matrix::Zero(4, 4);
  for (auto [i, j] : {std::pair{0, 1}, {1, 2}, {2, 3}, {0, 2}}) a(i, j) = a(j, i) = 1.0;
  return a;
}

struct Toy {
  EegGraph graph;
  ExpertParams params;
  int order = 2;
};

Toy toy(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Toy t;
  t.graph = {oracle::random_matrix(4, 2, rng), toy_adjacency(), {"a", "b", "c", "d"}};
  t.params = {oracle::random_matrix(4, 3, rng, -1, 1), oracle::random_matrix(12, 3, rng, -1, 1),
              oracle::random_matrix(1, 3, rng, -1, 1)};
  return t;
}

Matrix row(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

}  // namespace

TEST_CASE("expert_forward with zero parameters is uniform") {
  Toy t = toy(1);
  t.params = {Matrix::Zero(4, 3), Matrix::Zero(12, 3), Matrix::Zero(1, 3)};
  Tape tape;
  const auto vars = bind(tape, t.params, "e");
  const auto fwd = expert_forward(tape, t.graph, KeepMask::Constant(4, true), vars, 2);
  CHECK(fwd.features.value().isZero());
  for (int e = 0; e < 3; ++e) CHECK(fwd.probs.value()(0, e) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("expert_forward with everything masked gives zero features") {
  Toy t = toy(2);
  t.params.head_bias.setZero();
  Tape tape;
  const auto vars = bind(tape, t.params, "e");
  const auto fwd = expert_forward(tape, t.graph, KeepMask::Constant(4, false), vars, 2);
  CHECK(fwd.features.value().isZero());
  CHECK((fwd.probs.value().array() - 1.0 / 3.0).abs().maxCoeff() < 1e-15);
}

TEST_CASE("expert_forward matches the straight-line reference") {
  for (std::uint64_t seed = 3; seed < 13; ++seed) {
    Toy t = toy(seed);
    KeepMask keep = KeepMask::Constant(4, true);
    if (seed % 2 == 0) keep(seed % 4) = false;
    Tape tape;
    const auto vars = bind(tape, t.params, "e");
    const auto fwd = expert_forward(tape, t.graph, keep, vars, t.order);
    const auto att = expert_attention(fwd, vars, 1, 0.5);
    const auto ref = oracle::expert(t.graph.features, t.graph.adjacency, keep, t.params.cheb_weights,
                                    t.params.head_weights, t.params.head_bias, t.order, 1, 0.5);
    CHECK((fwd.features.value() - ref.h).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((fwd.probs.value() - ref.s).cwiseAbs().maxCoeff() < 1e-12);
    const auto snap = snapshot(fwd, att);
    CHECK((snap.importance - ref.importance).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((snap.normalized - ref.normalized).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((snap.masked - ref.masked).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((snap.keep == ref.keep).all());
  }
}

TEST_CASE("all-ones mask equals the unmasked computation bitwise") {
  Toy t = toy(20);
  Tape tape;
  const auto vars = bind(tape, t.params, "e");
  const auto fwd = expert_forward(tape, t.graph, KeepMask::Constant(4, true), vars, 2);
  const Matrix basis = chebyshev_features(t.graph.features, scaled_laplacian(t.graph.adjacency), 2);
  const Matrix h = (basis * t.params.cheb_weights).cwiseMax(0.0);
  CHECK(fwd.features.value() == h);
}

TEST_CASE("expert_forward shape errors") {
  Toy t = toy(4);
  Tape tape;
  const auto vars = bind(tape, t.params, "e");
  CHECK_THROWS_AS(expert_forward(tape, t.graph, KeepMask::Constant(3, true), vars, 2), ShapeError);
  CHECK_THROWS_AS(expert_forward(tape, t.graph, KeepMask::Constant(4, true), vars, 3), ShapeError);
}

TEST_CASE("expert_loss") {
  Tape tape;
  CHECK(expert_loss(tape.constant(row({0, 1, 0})), 1).item() == doctest::Approx(0.0));
  CHECK(expert_loss(tape.constant(row({1.0 / 3, 1.0 / 3, 1.0 / 3})), 2).item() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(expert_loss(tape.constant(row({0.7, 0.2, 0.1})), 0).item() ==
        doctest::Approx(-std::log(0.7)).epsilon(1e-12));
  CHECK(expert_loss(tape.constant(row({1, 0, 0})), 1).item() == doctest::Approx(-std::log(1e-12)));
  CHECK_THROWS_AS(expert_loss(tape.constant(row({0.5, 0.5})), 2), ContractError);
  CHECK_THROWS_AS(expert_loss(tape.constant(row({0.5, 0.5})), -1), ContractError);
}

TEST_CASE("gradcam_alpha") {
  Toy t = toy(5);
  Tape tape;
  const Var h = tape.constant(t.graph.features * Matrix::Ones(2, 3));
  const Var probs = tape.constant(row({0.2, 0.5, 0.3}));
  CHECK(gradcam_alpha(probs, tape.constant(Matrix::Zero(12, 3)), h, 0).value().isZero());

  const Var single = tape.constant(row({1.0}));
  const Matrix w1 = Matrix::Ones(12, 1);
  CHECK(gradcam_alpha(single, tape.constant(w1), h, 0).value().isZero());
  CHECK_THROWS_AS(gradcam_alpha(probs, tape.constant(t.params.head_weights), h, 3), ContractError);
}

TEST_CASE("gradcam_alpha agrees with perturbing H") {
  for (std::uint64_t seed = 30; seed < 40; ++seed) {
    Toy t = toy(seed);
    Tape tape;
    const auto vars = bind(tape, t.params, "e");
    const auto fwd = expert_forward(tape, t.graph, KeepMask::Constant(4, true), vars, 2);
    const Matrix h = fwd.features.value();
    const int target = static_cast<int>(seed % 3);
    const Matrix alpha = gradcam_alpha(fwd.probs, vars.head_weights, fwd.features, target).value();

    auto score = [&](const Matrix& hh) {
      Matrix flat = Eigen::Map<const Matrix>(hh.data(), 1, hh.size());
      return oracle::softmax(flat * t.params.head_weights + t.params.head_bias)(0, target);
    };
    const Matrix dsdh = oracle::numeric_gradient(score, h, 1e-6);
    Matrix expected = Matrix::Zero(1, 3);
    for (Eigen::Index c = 0; c < 4; ++c)
      for (Eigen::Index d = 0; d < 3; ++d)
        if (h(c, d) > 0) expected(0, d) += dsdh(c, d) / 4.0;
    CHECK((alpha - expected).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("channel_importance") {
  Tape tape;
  Matrix h(2, 2);
  h << 1, -1, 2, 0;
  const Var hv = tape.constant(h);
  CHECK(channel_importance(hv, tape.constant(row({1, 1}))).value() == row({0, 2}));
  CHECK(channel_importance(hv, tape.constant(row({0, 0}))).value().isZero());
  Matrix hz = h;
  hz.row(1).setZero();
  CHECK(channel_importance(tape.constant(hz), tape.constant(row({3, -1}))).value()(0, 1) == 0.0);
  CHECK_THROWS_AS(channel_importance(hv, tape.constant(row({1, 1, 1}))), ShapeError);
}

TEST_CASE("normalize_attention") {
  Tape tape;
  CHECK(normalize_attention(tape.constant(row({2, 4, 6}))).value() == row({0, 0.5, 1}));
  CHECK(normalize_attention(tape.constant(row({3, 3, 3}))).value() == row({1, 1, 1}));
  CHECK(normalize_attention(tape.constant(row({0, 1}))).value() == row({0, 1}));
}

TEST_CASE("threshold_mask") {
  Tape tape;
  const auto r = threshold_mask(tape.constant(row({0.2, 0.5, 0.9})), 0.5);
  CHECK(!r.keep(0));
  CHECK(r.keep(1));
  CHECK(r.keep(2));
  CHECK(r.masked.value() == row({0, 0.5, 0.9}));
  CHECK(threshold_mask(tape.constant(row({0.2, 0.5, 0.9})), 0.1).keep.all());
  CHECK_THROWS_AS(threshold_mask(tape.constant(row({0.5})), 0.0), ConfigError);
  CHECK_THROWS_AS(threshold_mask(tape.constant(row({0.5})), 1.0), ConfigError);

  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix v = oracle::random_matrix(1, 10, rng, 0, 1);
    const auto lo = threshold_mask(tape.constant(v), 0.3);
    const auto hi = threshold_mask(tape.constant(v), 0.7);
    CHECK((hi.keep && !lo.keep).count() == 0);
    for (Eigen::Index c = 0; c < 10; ++c)
      if (!lo.keep(c)) CHECK(lo.masked.value()(0, c) == 0.0);
  }
}

TEST_CASE("threshold mask is constant under differentiation") {
  Tape tape;
  const Var v = tape.parameter(row({0.2, 0.6, 0.9}));
  const auto r = threshold_mask(v, 0.5);
  tape.backward(sum(r.masked));
  CHECK(v.grad() == row({0, 1, 1}));
}

TEST_CASE("logit shift leaves attention unchanged") {
  for (std::uint64_t seed = 50; seed < 55; ++seed) {
    Toy t = toy(seed);
    Tape tape;
    const auto fwd_a = expert_forward(tape, t.graph, KeepMask::Constant(4, true), bind(tape, t.params, "a"), 2);
    const auto att_a = expert_attention(fwd_a, bind(tape, t.params, "a"), 0, 0.5);
    ExpertParams shifted = t.params;
    shifted.head_bias.array() += 7.25;
    const auto va = bind(tape, shifted, "b");
    const auto fwd_b = expert_forward(tape, t.graph, KeepMask::Constant(4, true), va, 2);
    const auto att_b = expert_attention(fwd_b, va, 0, 0.5);
    CHECK((fwd_a.probs.value() - fwd_b.probs.value()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((att_a.normalized.value() - att_b.normalized.value()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((att_a.masked.value() - att_b.masked.value()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("expert output invariants") {
  for (std::uint64_t seed = 60; seed < 70; ++seed) {
    Toy t = toy(seed);
    Tape tape;
    const auto vars = bind(tape, t.params, "e");
    const auto fwd = expert_forward(tape, t.graph, KeepMask::Constant(4, true), vars, 2);
    const auto out = snapshot(fwd, expert_attention(fwd, vars, argmax(fwd.probs.value()), 0.5));
    CHECK(std::abs(out.probs.sum() - 1.0) < 1e-12);
    CHECK((out.importance.array() >= 0).all());
    CHECK((out.normalized.array() >= 0).all());
    CHECK((out.normalized.array() <= 1).all());
    CHECK(out.keep.any());
    for (Eigen::Index c = 0; c < 4; ++c)
      CHECK(out.masked(c) == (out.keep(c) ? out.normalized(c) : 0.0));
  }
}
