#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "msenc/tensor.hpp"

namespace msenc {

// Frozen affine decoder: activity = basis * z + center.
template <typename T>
struct PcaEmbedding {
  Matrix<T> basis;  // V x K, orthonormal columns (zero columns past the rank)
  Vector<T> center;
  Vector<T> explained_variance;  // K, nonincreasing
  Index rank = 0;                // number of non-padded components
  bool frozen = true;

  Index activity_dim() const { return basis.rows(); }
  Index embedding_dim() const { return basis.cols(); }
};

enum class PcaMethod { Auto, Svd, Gram };

// Flips each column so its largest-magnitude entry (first one on ties) is positive.
template <typename T>
void canonicalize_signs(Matrix<T>& basis) {
  for (Index k = 0; k < basis.cols(); ++k) {
    Index best = 0;
    for (Index i = 1; i < basis.rows(); ++i)
      if (std::abs(basis(i, k)) > std::abs(basis(best, k))) best = i;
    if (basis(best, k) < T(0)) basis.col(k) *= T(-1);
  }
}

// PCA of pooled activity rows (N x V). The right singular vectors come from a
// thin SVD of the centered matrix or, when N < V, from the eigenvectors of the
// N x N Gram matrix. Components beyond the numerical rank are zero-padded.
template <typename T>
PcaEmbedding<T> fit_pca(const Matrix<T>& activity, Index k, PcaMethod method = PcaMethod::Auto,
                        std::vector<std::string>* warnings = nullptr) {
  const Index n = activity.rows();
  const Index v = activity.cols();
  require(k >= 1, ErrorKind::InvalidArgument, "PCA dimension must be >= 1");
  require(n >= 2, ErrorKind::InvalidArgument, "PCA needs at least 2 rows");
  require(k <= v, ErrorKind::InvalidArgument,
          "PCA dimension " + std::to_string(k) + " exceeds activity dimension " + std::to_string(v));
  if (method == PcaMethod::Auto) method = n < v ? PcaMethod::Gram : PcaMethod::Svd;

  PcaEmbedding<T> e;
  e.center = activity.colwise().mean().transpose();
  const Matrix<T> centered = activity.rowwise() - e.center.transpose();

  Vector<T> singular;
  Matrix<T> directions;  // V x m
  if (method == PcaMethod::Svd) {
    Eigen::BDCSVD<Matrix<T>> svd(centered, Eigen::ComputeThinV);
    singular = svd.singularValues();
    directions = svd.matrixV();
  } else {
    const Matrix<T> gram = centered * centered.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix<T>> eig(gram);
    const Index m = gram.rows();
    singular.resize(m);
    directions.resize(v, m);
    // Roundoff in the Gram eigenvalues is relative to the largest one, and a
    // square root would inflate it, so the rank cut happens here.
    const T lambda_tol = std::max(eig.eigenvalues()(m - 1), T(0)) * T(std::max(n, v)) *
                         std::numeric_limits<T>::epsilon() * T(10);
    // Eigenvalues come out ascending; walk them from the top.
    for (Index i = 0; i < m; ++i) {
      const Index src = m - 1 - i;
      const T raw = eig.eigenvalues()(src);
      const T lambda = raw > lambda_tol ? raw : T(0);
      singular(i) = std::sqrt(lambda);
      if (singular(i) > T(0)) directions.col(i) = centered.transpose() * eig.eigenvectors().col(src) / singular(i);
      else directions.col(i).setZero();
    }
  }

  const T top = singular.size() > 0 ? singular(0) : T(0);
  const T tol = top * T(std::max(n, v)) * std::numeric_limits<T>::epsilon() * T(10);
  e.basis = Matrix<T>::Zero(v, k);
  e.explained_variance = Vector<T>::Zero(k);
  e.rank = 0;
  for (Index i = 0; i < std::min<Index>(k, singular.size()); ++i) {
    if (!(singular(i) > tol)) break;
    e.basis.col(i) = directions.col(i);
    e.explained_variance(i) = singular(i) * singular(i) / T(n - 1);
    ++e.rank;
  }
  if (e.rank < k && warnings)
    warnings->push_back("RankDeficient: centered data has rank " + std::to_string(e.rank) + " < K=" +
                        std::to_string(k) + "; zero-padded " + std::to_string(k - e.rank) + " basis columns");
  canonicalize_signs(e.basis);
  return e;
}

template <typename T>
Vector<T> reconstruct(const Vector<T>& z, const PcaEmbedding<T>& e) {
  require(z.size() == e.embedding_dim(), ErrorKind::ShapeMismatch,
          "latent length " + std::to_string(z.size()) + " != K=" + std::to_string(e.embedding_dim()));
  return e.basis * z + e.center;
}

template <typename T>
Matrix<T> reconstruct_batch(const Matrix<T>& z, const PcaEmbedding<T>& e) {
  require(z.cols() == e.embedding_dim(), ErrorKind::ShapeMismatch, "latent width != K");
  Matrix<T> out = z * e.basis.transpose();
  out.rowwise() += e.center.transpose();
  return out;
}

// Coordinates of x in the embedding: basis^T (x - center).
template <typename T>
Vector<T> project_activity(const Vector<T>& x, const PcaEmbedding<T>& e) {
  require(x.size() == e.activity_dim(), ErrorKind::ShapeMismatch, "activity length != V");
  return e.basis.transpose() * (x - e.center);
}

// The first `count` components as a count x V array.
template <typename T>
Matrix<T> export_pc_maps(const PcaEmbedding<T>& e, Index count) {
  require(count >= 0 && count <= e.embedding_dim(), ErrorKind::CountTooLarge,
          "requested " + std::to_string(count) + " maps, K=" + std::to_string(e.embedding_dim()));
  return e.basis.leftCols(count).transpose();
}

}  // namespace msenc
