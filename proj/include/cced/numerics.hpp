#ifndef CCED_NUMERICS_HPP
#define CCED_NUMERICS_HPP

#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "cced/errors.hpp"

namespace cced {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Weights are stored row-major so a flat parameter buffer maps onto them
// without copies.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using VectorF = Vector<float>;
using MatrixF = Matrix<float>;

using ClassIndex = Eigen::Index;

/// Returned by argmax when the input holds a NaN.
inline constexpr ClassIndex kInvalidClass = -1;

/// W * x + b. Each output row is accumulated over columns in ascending index
/// order, then the bias is added, so results are bit-reproducible.
template <typename DerivedW, typename DerivedB, typename DerivedX>
Vector<typename DerivedW::Scalar> affine(const Eigen::MatrixBase<DerivedW>& W,
                                         const Eigen::MatrixBase<DerivedB>& b,
                                         const Eigen::MatrixBase<DerivedX>& x) {
  using Scalar = typename DerivedW::Scalar;
  if (W.cols() != x.size() || W.rows() != b.size()) {
    throw ShapeError("affine: W is " + std::to_string(W.rows()) + "x" + std::to_string(W.cols()) +
                     ", b has " + std::to_string(b.size()) + ", x has " + std::to_string(x.size()));
  }
  Vector<Scalar> out(W.rows());
  for (Eigen::Index i = 0; i < W.rows(); ++i) {
    Scalar acc(0);
    for (Eigen::Index j = 0; j < W.cols(); ++j) {
      acc += W(i, j) * x(j);
    }
    out(i) = acc + b(i);
  }
  return out;
}

/// Elementwise max(0, x). NaN stays NaN.
template <typename Derived>
Vector<typename Derived::Scalar> relu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return (std::isnan(v) || v > Scalar(0)) ? v : Scalar(0); });
}

/// Max-shifted softmax. Any NaN input, or an input that is entirely -Inf,
/// yields an all-NaN vector.
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = logits.size();
  if (n == 0) throw ShapeError("softmax: empty input");

  Scalar peak = -std::numeric_limits<Scalar>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar v = logits(i);
    if (std::isnan(v)) return Vector<Scalar>::Constant(n, std::numeric_limits<Scalar>::quiet_NaN());
    if (v > peak) peak = v;
  }
  if (peak == -std::numeric_limits<Scalar>::infinity()) {
    return Vector<Scalar>::Constant(n, std::numeric_limits<Scalar>::quiet_NaN());
  }

  Vector<Scalar> out(n);
  Scalar total(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    out(i) = std::exp(logits(i) - peak);
    total += out(i);
  }
  return out / total;
}

/// Index of the largest element, lowest index on ties, kInvalidClass if any
/// element is NaN.
template <typename Derived>
ClassIndex argmax(const Eigen::MatrixBase<Derived>& x) {
  if (x.size() == 0) throw ShapeError("argmax: empty input");
  ClassIndex best = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (std::isnan(x(i))) return kInvalidClass;
    if (x(i) > x(best)) best = i;
  }
  return best;
}

}  // namespace cced

#endif  // CCED_NUMERICS_HPP
