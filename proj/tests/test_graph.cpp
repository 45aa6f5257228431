#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "apagnn/errors.hpp"
#include "apagnn/graph.hpp"
#include "oracles.hpp"

using namespace apagnn;

namespace {

Montage line(int n, double spacing) {
  Montage m;
  for (int i = 0; i < n; ++i) m.push_back({"E" + std::to_string(i), i * spacing, 0.0});
  return m;
}

Matrix path3() {
  Matrix a(3, 3);
  a << 0, 1, 0, 1, 0, 1, 0, 1, 0;
  return a;
}

KeepMask mask(std::initializer_list<bool> bits) {
  KeepMask k(static_cast<Eigen::Index>(bits.size()));
  Eigen::Index i = 0;
  for (bool b : bits) k(i++) = b;
  return k;
}

}  // namespace

TEST_CASE("build_adjacency") {
  CHECK(build_adjacency(line(3, 0.5), AdjacencyRule::within(0.5)) == path3());

  const Matrix complete = build_adjacency(ring_montage(6), AdjacencyRule::knn(5));
  CHECK(complete == (Matrix::Ones(6, 6) - Matrix::Identity(6, 6)));

  const Montage ring = ring_montage(16);
  const Matrix cycle = build_adjacency(ring, AdjacencyRule::knn(2));
  std::vector<std::pair<double, double>> pts;
  for (const auto& e : ring) pts.emplace_back(e.x, e.y);
  CHECK(cycle == oracle::knn_adjacency(pts, 2));
  for (int i = 0; i < 16; ++i) {
    CHECK(cycle.row(i).sum() == 2.0);
    CHECK(cycle(i, (i + 1) % 16) == 1.0);
  }

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 10; ++trial) {
    Montage m;
    pts.clear();
    for (int i = 0; i < 12; ++i) {
      m.push_back({"C" + std::to_string(i), u(rng), u(rng)});
      pts.emplace_back(m.back().x, m.back().y);
    }
    const Matrix a = build_adjacency(m, AdjacencyRule::knn(3));
    CHECK(a == oracle::knn_adjacency(pts, 3));
    CHECK(a == a.transpose());
    CHECK(a.diagonal().isZero());
  }
}

TEST_CASE("build_adjacency errors") {
  Montage dup = line(3, 1.0);
  dup[2].x = dup[1].x;
  CHECK_THROWS_AS(build_adjacency(dup, AdjacencyRule::knn(1)), ConfigError);
  CHECK_THROWS_AS(build_adjacency(line(4, 1.0), AdjacencyRule::knn(4)), ConfigError);
  CHECK_THROWS_AS(build_adjacency(line(4, 1.0), AdjacencyRule::within(0.0)), ConfigError);
}

TEST_CASE("montage round-trip") {
  const auto path = std::filesystem::temp_directory_path() / "apagnn_montage_test.json";
  const Montage ring = ring_montage(8);
  save_montage(ring, path);
  const Montage back = load_montage(path);
  REQUIRE(back.size() == ring.size());
  for (std::size_t i = 0; i < ring.size(); ++i) {
    CHECK(back[i].name == ring[i].name);
    CHECK(back[i].x == ring[i].x);
    CHECK(back[i].y == ring[i].y);
  }
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_montage(path), LoadError);
}

TEST_CASE("scaled_laplacian") {
  const Matrix l = scaled_laplacian(path3()).matrix;
  const double s = 1.0 / std::sqrt(2.0);
  Matrix expected(3, 3);
  expected << 0, -s, 0, -s, 0, -s, 0, -s, 0;
  CHECK((l - expected).cwiseAbs().maxCoeff() < 1e-15);

  CHECK(scaled_laplacian(Matrix::Zero(4, 4)).matrix.isZero());

  const Matrix k3 = Matrix::Ones(3, 3) - Matrix::Identity(3, 3);
  const auto eig = eigen_oracle(scaled_laplacian(k3).matrix);
  CHECK(eig.values.minCoeff() >= -1.0 - 1e-9);
  CHECK(eig.values.maxCoeff() <= 1.0 + 1e-9);

  Matrix asym = path3();
  asym(0, 2) = 1.0;
  CHECK_THROWS_AS(scaled_laplacian(asym), ContractError);
}

TEST_CASE("normalized Laplacian spectrum lies in [0,2]") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 3 + trial % 12;
    const Matrix a = oracle::random_graph(n, 0.4, rng);
    const Matrix lap = scaled_laplacian(a).matrix;
    CHECK((lap - oracle::scaled_laplacian(a)).cwiseAbs().maxCoeff() < 1e-15);
    const auto eig = eigen_oracle(Matrix(lap + Matrix::Identity(n, n)));
    CHECK(eig.values.minCoeff() >= -1e-9);
    CHECK(eig.values.maxCoeff() <= 2.0 + 1e-9);
  }
}

TEST_CASE("chebyshev_basis") {
  std::mt19937_64 rng(13);
  const Matrix x = oracle::random_matrix(3, 2, rng);
  const auto lap = scaled_laplacian(path3());

  const auto one = chebyshev_basis(x, lap, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == x);

  const auto two = chebyshev_basis(x, scaled_laplacian(Matrix::Zero(3, 3)), 2);
  REQUIRE(two.size() == 2);
  CHECK(two[0] == x);
  CHECK(two[1].isZero());

  CHECK_THROWS_AS(chebyshev_basis(x, lap, 0), ConfigError);

  const Matrix a8 = oracle::random_graph(8, 0.5, rng);
  const auto lap8 = scaled_laplacian(a8);
  const Matrix x8 = oracle::random_matrix(8, 3, rng);
  const auto terms = chebyshev_basis(x8, lap8, 4);
  for (int k = 0; k < 4; ++k)
    CHECK((terms[k] - oracle::chebyshev_spectral(lap8.matrix, x8, k)).cwiseAbs().maxCoeff() < 1e-10);

  const Matrix feats = chebyshev_features(x8, lap8, 4);
  CHECK(feats.cols() == 12);
  CHECK(feats.middleCols(6, 3) == terms[2]);
}

TEST_CASE("prune_graph") {
  const Matrix a = path3();
  CHECK(prune_graph(a, KeepMask::Constant(3, true)) == a);
  CHECK(prune_graph(a, mask({true, false, true})).isZero());
  Matrix single = Matrix::Zero(3, 3);
  single(1, 2) = single(2, 1) = 1.0;
  CHECK(prune_graph(a, mask({false, true, true})) == single);
  CHECK_THROWS_AS(prune_graph(a, mask({true, true})), ShapeError);

  std::mt19937_64 rng(14);
  std::bernoulli_distribution coin(0.6);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix g = oracle::random_graph(10, 0.5, rng);
    KeepMask m1(10), m2(10);
    for (int i = 0; i < 10; ++i) {
      m1(i) = coin(rng);
      m2(i) = coin(rng);
    }
    const Matrix once = prune_graph(g, m1);
    CHECK(prune_graph(once, m1) == once);
    CHECK(prune_graph(once, m2) == prune_graph(g, KeepMask(m1 && m2)));
    CHECK(once == once.transpose());
  }
}

TEST_CASE("eigen_oracle") {
  const auto id = eigen_oracle(Matrix(Matrix::Identity(4, 4)));
  CHECK(id.values.isOnes());

  Matrix d = Matrix::Zero(3, 3);
  d.diagonal() << 3, 1, 2;
  const auto e = eigen_oracle(d);
  CHECK(e.values(0) == doctest::Approx(1.0));
  CHECK(e.values(1) == doctest::Approx(2.0));
  CHECK(e.values(2) == doctest::Approx(3.0));

  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix r = oracle::random_matrix(8, 8, rng);
    const Matrix sym = r + r.transpose();
    const auto eig = eigen_oracle(sym);
    const Matrix back = eig.vectors * eig.values.asDiagonal() * eig.vectors.transpose();
    CHECK((back - sym).cwiseAbs().maxCoeff() < 1e-9);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ref{Eigen::MatrixXd(sym)};
    CHECK((eig.values - ref.eigenvalues()).cwiseAbs().maxCoeff() < 1e-9);
  }

  Matrix asym = Matrix::Identity(2, 2);
  asym(0, 1) = 1.0;
  CHECK_THROWS_AS(eigen_oracle(asym), ContractError);
}
