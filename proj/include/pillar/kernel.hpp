#pragma once

#include <cmath>
#include <sstream>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "pillar/error.hpp"

namespace pillar {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Relative jitter bounds: escalation starts at 1e-6 * signal_variance and is
// multiplied by 10 until 1e-2 * signal_variance.
inline constexpr double kInitialRelativeJitter = 1e-6;
inline constexpr double kMaxRelativeJitter = 1e-2;

/// Isotropic squared-exponential kernel
///   k(x, x') = signal_variance * exp(-|x - x'|^2 / (2 length_scale^2))
/// with zero prior mean. `jitter` is added to the diagonal of training Gram
/// matrices only.
template <typename Scalar> struct KernelSpec {
  Scalar signal_variance{1};
  Scalar length_scale{1};
  Scalar jitter{static_cast<Scalar>(kInitialRelativeJitter)};

  static KernelSpec with_default_jitter(Scalar signal_variance,
                                        Scalar length_scale) {
    return {signal_variance, length_scale,
            static_cast<Scalar>(kInitialRelativeJitter) * signal_variance};
  }

  bool operator==(const KernelSpec &) const = default;
};

using KernelSpecd = KernelSpec<double>;

template <typename Scalar> void validate(const KernelSpec<Scalar> &spec) {
  if (!(spec.signal_variance > 0) || !std::isfinite(spec.signal_variance)) {
    throw ConfigError("kernel signal_variance must be positive and finite");
  }
  if (!(spec.length_scale > 0) || !std::isfinite(spec.length_scale)) {
    throw ConfigError("kernel length_scale must be positive and finite");
  }
  if (!(spec.jitter >= 0) || !std::isfinite(spec.jitter)) {
    throw ConfigError("kernel jitter must be non-negative and finite");
  }
}

namespace detail {

// Plain sequential sum so the result is independent of alignment and of
// argument order.
template <typename A, typename B>
typename A::Scalar squared_distance(const A &a, const B &b) {
  using Scalar = typename A::Scalar;
  Scalar sum{0};
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    const Scalar diff = a(k) - b(k);
    sum += diff * diff;
  }
  return sum;
}

template <typename Scalar>
Scalar kernel_from_distance(Scalar squared_distance,
                            const KernelSpec<Scalar> &spec) {
  return spec.signal_variance *
         std::exp(-squared_distance /
                  (Scalar(2) * spec.length_scale * spec.length_scale));
}

} // namespace detail

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar
kernel_eval(const Eigen::MatrixBase<DerivedA> &x,
            const Eigen::MatrixBase<DerivedB> &x_prime,
            const KernelSpec<typename DerivedA::Scalar> &spec) {
  static_assert(DerivedA::IsVectorAtCompileTime ||
                    DerivedA::ColsAtCompileTime == Eigen::Dynamic,
                "kernel_eval expects vectors");
  if (x.size() != x_prime.size()) {
    throw DimensionError("kernel_eval: dimension mismatch (" +
                         std::to_string(x.size()) + " vs " +
                         std::to_string(x_prime.size()) + ")");
  }
  return detail::kernel_from_distance(
      detail::squared_distance(x.derived(), x_prime.derived()), spec);
}

/// Kernel values between every row of `a` and every row of `b`, without
/// jitter. Entry (i, j) is kernel_eval(a.row(i), b.row(j)).
template <typename DerivedA, typename DerivedB>
Matrix<typename DerivedA::Scalar>
kernel_matrix(const Eigen::MatrixBase<DerivedA> &a,
              const Eigen::MatrixBase<DerivedB> &b,
              const KernelSpec<typename DerivedA::Scalar> &spec) {
  using Scalar = typename DerivedA::Scalar;
  if (a.cols() != b.cols()) {
    throw DimensionError("kernel_matrix: feature dimensions differ (" +
                         std::to_string(a.cols()) + " vs " +
                         std::to_string(b.cols()) + ")");
  }
  Matrix<Scalar> k(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      k(i, j) = detail::kernel_from_distance(
          detail::squared_distance(a.row(i), b.row(j)), spec);
    }
  }
  return k;
}

template <typename Scalar> struct GramMatrix {
  // K + jitter * I.
  Matrix<Scalar> values;
  // Carries the jitter that was actually applied.
  KernelSpec<Scalar> spec;
  Eigen::LLT<Matrix<Scalar>> cholesky;

  Eigen::Index size() const { return values.rows(); }
};

/// Training Gram matrix K + jitter * I. Starts from spec.jitter (or the
/// default relative jitter when spec.jitter is zero and K alone is not
/// positive definite) and escalates by 10x up to 1e-2 * signal_variance.
/// Throws FactorizationError naming the last jitter tried.
template <typename Derived>
GramMatrix<typename Derived::Scalar>
gram(const Eigen::MatrixBase<Derived> &x,
     const KernelSpec<typename Derived::Scalar> &spec) {
  using Scalar = typename Derived::Scalar;
  validate(spec);
  if (x.rows() < 1) {
    throw DimensionError("gram: empty feature matrix");
  }
  const Matrix<Scalar> base = kernel_matrix(x, x, spec);
  const Scalar max_jitter =
      static_cast<Scalar>(kMaxRelativeJitter) * spec.signal_variance;

  GramMatrix<Scalar> g;
  g.spec = spec;
  Scalar jitter = spec.jitter;
  while (true) {
    g.values = base;
    g.values.diagonal().array() += jitter;
    g.cholesky.compute(g.values);
    if (g.cholesky.info() == Eigen::Success) {
      g.spec.jitter = jitter;
      return g;
    }
    Scalar next = jitter > 0 ? jitter * Scalar(10)
                             : static_cast<Scalar>(kInitialRelativeJitter) *
                                   spec.signal_variance;
    if (next > max_jitter * Scalar(1.000001)) {
      std::ostringstream msg;
      msg << "gram: Cholesky failed at jitter " << jitter;
      throw FactorizationError(msg.str(), static_cast<double>(jitter));
    }
    jitter = next;
  }
}

/// Gram matrix with exactly spec.jitter on the diagonal; no escalation.
template <typename Derived>
GramMatrix<typename Derived::Scalar>
gram_fixed_jitter(const Eigen::MatrixBase<Derived> &x,
                  const KernelSpec<typename Derived::Scalar> &spec) {
  validate(spec);
  GramMatrix<typename Derived::Scalar> g;
  g.spec = spec;
  g.values = kernel_matrix(x, x, spec);
  g.values.diagonal().array() += spec.jitter;
  g.cholesky.compute(g.values);
  if (g.cholesky.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "gram: Cholesky failed at jitter " << spec.jitter;
    throw FactorizationError(msg.str(), static_cast<double>(spec.jitter));
  }
  return g;
}

/// n_test x n_train matrix k(X_test, X_train); no jitter.
template <typename DerivedTrain, typename DerivedTest>
Matrix<typename DerivedTrain::Scalar>
cross_gram(const Eigen::MatrixBase<DerivedTrain> &x_train,
           const Eigen::MatrixBase<DerivedTest> &x_test,
           const KernelSpec<typename DerivedTrain::Scalar> &spec) {
  return kernel_matrix(x_test, x_train, spec);
}

} // namespace pillar
