#pragma once

// Electrode graphs and the spectral machinery for Chebyshev graph convolution.
//
// The scaled Laplacian uses the lambda_max = 2 convention, so
//   L  = I - D^{-1/2} A D^{-1/2},   L~ = L - I = -D^{-1/2} A D^{-1/2}
// with D^{-1/2} taken as 0 on isolated nodes. Pruned nodes therefore drop out
// of every Chebyshev term beyond the zeroth.

#include <algorithm>
#include <cmath>
#include <limits>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "apagnn/errors.hpp"
#include "apagnn/tensor.hpp"

namespace apagnn {

struct Electrode {
  std::string name;
  double x = 0.0;
  double y = 0.0;
};

using Montage = std::vector<Electrode>;

struct AdjacencyRule {
  enum class Kind { Knn, Radius };
  Kind kind = Kind::Knn;
  int k = 4;
  double radius = 0.0;

  static AdjacencyRule knn(int k) { return {Kind::Knn, k, 0.0}; }
  static AdjacencyRule within(double r) { return {Kind::Radius, 0, r}; }
};

// Node features X (C x F) over a binary symmetric adjacency A (C x C).
struct EegGraph {
  Matrix features;
  Matrix adjacency;
  std::vector<std::string> channels;

  Eigen::Index channel_count() const { return features.rows(); }
  Eigen::Index band_count() const { return features.cols(); }
  // Throws ShapeError/ContractError when the invariants do not hold.
  void validate() const;
};

template <typename Scalar>
struct ScaledLaplacian {
  MatrixX<Scalar> matrix;
};

template <typename Scalar>
struct SymmetricEigen {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> values;  // ascending
  MatrixX<Scalar> vectors;                          // columns
};

// Symmetric binary adjacency with zero diagonal. kNN neighbourhoods are
// symmetrised by OR; ties in distance are broken by channel index.
Matrix build_adjacency(const Montage& montage, const AdjacencyRule& rule);

// Unit-ring montage, channel c at angle 2*pi*c/C.
Montage ring_montage(int channels);

Montage load_montage(const std::filesystem::path& path);
void save_montage(const Montage& montage, const std::filesystem::path& path);

template <typename Derived>
bool is_symmetric(const Eigen::MatrixBase<Derived>& m, typename Derived::Scalar tol) {
  if (m.rows() != m.cols()) return false;
  return ((m - m.transpose()).cwiseAbs().maxCoeff() <= tol) || m.size() == 0;
}

template <typename Derived>
ScaledLaplacian<typename Derived::Scalar> scaled_laplacian(const Eigen::MatrixBase<Derived>& adjacency) {
  using Scalar = typename Derived::Scalar;
  using Mat = MatrixX<Scalar>;
  const Eigen::Index n = adjacency.rows();
  if (adjacency.cols() != n) throw ShapeError("adjacency must be square");
  if (!is_symmetric(adjacency, Scalar(1e-12))) throw ContractError("adjacency is not symmetric");

  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_sqrt_deg(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar d = adjacency.row(i).sum();
    inv_sqrt_deg(i) = d > Scalar(0) ? Scalar(1) / std::sqrt(d) : Scalar(0);
  }
  Mat out = -(inv_sqrt_deg.asDiagonal() * adjacency * inv_sqrt_deg.asDiagonal());
  return {std::move(out)};
}

// X_0 = X, X_1 = L~ X, X_k = 2 L~ X_{k-1} - X_{k-2}.
template <typename Derived>
std::vector<MatrixX<typename Derived::Scalar>> chebyshev_basis(
    const Eigen::MatrixBase<Derived>& features, const ScaledLaplacian<typename Derived::Scalar>& lap,
    int order) {
  using Mat = MatrixX<typename Derived::Scalar>;
  if (order < 1) throw ConfigError("Chebyshev order K must be >= 1");
  if (lap.matrix.cols() != features.rows()) throw ShapeError("Laplacian and features disagree");
  std::vector<Mat> terms;
  terms.reserve(static_cast<std::size_t>(order));
  terms.emplace_back(features);
  if (order > 1) terms.emplace_back(lap.matrix * features);
  for (int k = 2; k < order; ++k) {
    Mat next = 2 * (lap.matrix * terms[k - 1]) - terms[k - 2];
    terms.push_back(std::move(next));
  }
  return terms;
}

// [X_0, X_1, ..., X_{K-1}] as one C x (K*F) block.
template <typename Derived>
MatrixX<typename Derived::Scalar> chebyshev_features(
    const Eigen::MatrixBase<Derived>& features, const ScaledLaplacian<typename Derived::Scalar>& lap,
    int order) {
  const auto terms = chebyshev_basis(features, lap, order);
  const Eigen::Index f = features.cols();
  MatrixX<typename Derived::Scalar> out(features.rows(), f * order);
  for (int k = 0; k < order; ++k) out.middleCols(k * f, f) = terms[k];
  return out;
}

template <typename Derived>
MatrixX<typename Derived::Scalar> mask_rows(const Eigen::MatrixBase<Derived>& m, const KeepMask& keep) {
  if (keep.size() != m.rows()) throw ShapeError("mask length differs from row count");
  MatrixX<typename Derived::Scalar> out = m;
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    if (!keep(r)) out.row(r).setZero();
  return out;
}

// Zeroes rows and columns of dropped nodes.
template <typename Derived>
MatrixX<typename Derived::Scalar> prune_graph(const Eigen::MatrixBase<Derived>& adjacency,
                                              const KeepMask& keep) {
  if (adjacency.rows() != adjacency.cols()) throw ShapeError("adjacency must be square");
  if (keep.size() != adjacency.rows()) throw ShapeError("mask length differs from node count");
  MatrixX<typename Derived::Scalar> out = adjacency;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    if (!keep(i)) {
      out.row(i).setZero();
      out.col(i).setZero();
    }
  }
  return out;
}

// Cyclic Jacobi rotations. Intended for small matrices (test oracle).
template <typename Derived>
SymmetricEigen<typename Derived::Scalar> eigen_oracle(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  using Mat = MatrixX<Scalar>;
  const Eigen::Index n = m.rows();
  if (m.cols() != n) throw ShapeError("eigen_oracle needs a square matrix");
  if (!is_symmetric(m, Scalar(1e-10))) throw ContractError("eigen_oracle input is not symmetric");

  Mat a = (m + m.transpose()) / Scalar(2);
  Mat v = Mat::Identity(n, n);
  const Scalar scale = std::max(a.cwiseAbs().maxCoeff(), Scalar(1));
  for (int sweep = 0; sweep < 100; ++sweep) {
    Scalar off = 0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) <= std::numeric_limits<Scalar>::epsilon() * scale) break;

    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const Scalar apq = a(p, q);
        if (apq == Scalar(0)) continue;
        const Scalar theta = (a(q, q) - a(p, p)) / (2 * apq);
        const Scalar t = (theta >= 0 ? Scalar(1) : Scalar(-1)) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1));
        const Scalar c = Scalar(1) / std::sqrt(t * t + 1);
        const Scalar s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const Scalar akp = a(k, p);
          const Scalar akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const Scalar apk = a(p, k);
          const Scalar aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const Scalar vkp = v(k, p);
          const Scalar vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return a(i, i) < a(j, j); });
  SymmetricEigen<Scalar> out{Eigen::Matrix<Scalar, Eigen::Dynamic, 1>(n), Mat(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values(i) = a(order[i], order[i]);
    out.vectors.col(i) = v.col(order[i]);
  }
  return out;
}

}  // namespace apagnn
