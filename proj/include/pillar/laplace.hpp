#pragma once

// Multi-class GP classification with a softmax likelihood under the Laplace
// approximation. Latents are stored as n x C matrices (column c holds class
// c); the prior is block diagonal with one shared Gram matrix per class.
//
// W denotes the negative Hessian of log p(y|f). For sample i it is the C x C
// block diag(pi_i) - pi_i pi_i^T, so K^-1 + W is positive definite.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "pillar/dataset.hpp"
#include "pillar/error.hpp"
#include "pillar/kernel.hpp"
#include "pillar/parallel.hpp"
#include "pillar/random.hpp"

namespace pillar {

template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived> &f) {
  using Scalar = typename Derived::Scalar;
  const Scalar peak = f.maxCoeff();
  Vector<Scalar> e = (f.derived().reshaped().array() - peak).exp().matrix();
  return e / e.sum();
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived> &f) {
  const auto peak = f.maxCoeff();
  return peak + std::log((f.array() - peak).exp().sum());
}

template <typename Derived>
Matrix<typename Derived::Scalar>
softmax_rows(const Eigen::MatrixBase<Derived> &f) {
  Matrix<typename Derived::Scalar> pi(f.rows(), f.cols());
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    pi.row(i) = softmax(f.row(i)).transpose();
  }
  return pi;
}

template <typename Scalar>
Matrix<Scalar> one_hot(const LabelVector &y) {
  Matrix<Scalar> t = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(y.size()),
                                          y.num_classes);
  for (std::size_t i = 0; i < y.size(); ++i) {
    t(static_cast<Eigen::Index>(i), y[i]) = Scalar(1);
  }
  return t;
}

// log p(y|f) = sum_i f_i[y_i] - log sum_c exp f_i[c]
template <typename Derived>
typename Derived::Scalar log_likelihood(const Eigen::MatrixBase<Derived> &f,
                                        const LabelVector &y) {
  using Scalar = typename Derived::Scalar;
  Scalar total{0};
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    total += f(i, y[static_cast<std::size_t>(i)]) - log_sum_exp(f.row(i));
  }
  return total;
}

// Gradient of log p(y|f): one-hot targets minus softmax, n x C.
template <typename Derived>
Matrix<typename Derived::Scalar>
log_likelihood_gradient(const Eigen::MatrixBase<Derived> &f,
                        const LabelVector &y) {
  using Scalar = typename Derived::Scalar;
  return one_hot<Scalar>(y) - softmax_rows(f);
}

// Negative Hessian block diag(pi) - pi pi^T for one sample's latent row.
template <typename Derived>
Matrix<typename Derived::Scalar>
likelihood_hessian_block(const Eigen::MatrixBase<Derived> &f_row) {
  using Scalar = typename Derived::Scalar;
  const Vector<Scalar> pi = softmax(f_row);
  Matrix<Scalar> w = -pi * pi.transpose();
  w.diagonal() += pi;
  return w;
}

template <typename Scalar> struct NewtonOptions {
  int max_iterations = 100;
  Scalar tolerance = Scalar(1e-9);
  int max_halvings = 20;
};

template <typename Scalar> struct LaplaceFactors {
  // E_c = D_c^1/2 (I + D_c^1/2 K D_c^1/2)^-1 D_c^1/2 with D_c = diag(pi_c).
  std::vector<Matrix<Scalar>> e;
  // Cholesky of sum_c E_c.
  Eigen::LLT<Matrix<Scalar>> sum_e;
  // 1/2 log det(I + K W).
  Scalar half_log_det{0};
};

/// Factors of the Laplace posterior at softmax probabilities `pi` (n x C).
template <typename Scalar>
LaplaceFactors<Scalar> compute_factors(const Matrix<Scalar> &k,
                                       const Matrix<Scalar> &pi) {
  const Eigen::Index n = k.rows();
  const Eigen::Index num_classes = pi.cols();
  LaplaceFactors<Scalar> factors;
  factors.e.reserve(static_cast<std::size_t>(num_classes));
  Matrix<Scalar> sum_e = Matrix<Scalar>::Zero(n, n);
  for (Eigen::Index c = 0; c < num_classes; ++c) {
    const Vector<Scalar> s = pi.col(c).array().sqrt().matrix();
    Matrix<Scalar> b = (s * s.transpose()).cwiseProduct(k);
    b.diagonal().array() += Scalar(1);
    Eigen::LLT<Matrix<Scalar>> llt(b);
    if (llt.info() != Eigen::Success) {
      throw FactorizationError("laplace: I + D^1/2 K D^1/2 not positive "
                               "definite for class " + std::to_string(c),
                               0.0);
    }
    factors.half_log_det +=
        llt.matrixLLT().diagonal().array().log().sum();
    // E_c = (L^-1 S)^T (L^-1 S), filled symmetrically.
    const Matrix<Scalar> ls =
        llt.matrixL().solve(Matrix<Scalar>(s.asDiagonal()));
    Matrix<Scalar> e = Matrix<Scalar>::Zero(n, n);
    e.template selfadjointView<Eigen::Lower>().rankUpdate(ls.transpose());
    e.template triangularView<Eigen::StrictlyUpper>() = e.transpose();
    sum_e += e;
    factors.e.push_back(std::move(e));
  }
  factors.sum_e.compute(sum_e);
  if (factors.sum_e.info() != Eigen::Success) {
    throw FactorizationError("laplace: sum of E_c not positive definite", 0.0);
  }
  factors.half_log_det +=
      factors.sum_e.matrixLLT().diagonal().array().log().sum();
  return factors;
}

template <typename Scalar> struct LaplaceMode {
  Matrix<Scalar> mode;
  // Y - softmax(mode), the likelihood gradient at the mode.
  Matrix<Scalar> grad;
  LaplaceFactors<Scalar> factors;
  Scalar log_marginal{0};
  int iterations = 0;
  // psi after the start point and after every accepted step.
  std::vector<Scalar> objective_trace;
};

/// Newton iteration for the posterior mode starting from f = 0, with
/// step-halving on the exact objective
///   psi(f) = log p(y|f) - 1/2 sum_c f_c^T K^-1 f_c.
/// Latents are parameterized as f_c = K a_c so that no K^-1 is formed.
/// Stops when one accepted step improves psi by less than the tolerance.
/// log_marginal = psi(f_hat) - 1/2 log det(I + K W).
template <typename Scalar>
LaplaceMode<Scalar> find_mode(const Matrix<Scalar> &k, const LabelVector &y,
                              const NewtonOptions<Scalar> &options = {}) {
  const Eigen::Index n = k.rows();
  if (k.cols() != n || static_cast<std::size_t>(n) != y.size()) {
    throw DimensionError("find_mode: Gram matrix is " +
                         std::to_string(k.rows()) + "x" +
                         std::to_string(k.cols()) + " but there are " +
                         std::to_string(y.size()) + " labels");
  }
  validate_labels(y);
  const Eigen::Index num_classes = y.num_classes;
  const Matrix<Scalar> targets = one_hot<Scalar>(y);

  const auto objective = [&](const Matrix<Scalar> &a, const Matrix<Scalar> &f) {
    Scalar value = -Scalar(0.5) * a.cwiseProduct(f).sum() +
                   targets.cwiseProduct(f).sum();
    for (Eigen::Index i = 0; i < n; ++i) {
      value -= log_sum_exp(f.row(i));
    }
    return value;
  };

  Matrix<Scalar> a = Matrix<Scalar>::Zero(n, num_classes);
  Matrix<Scalar> f = Matrix<Scalar>::Zero(n, num_classes);
  Scalar psi = objective(a, f);
  std::vector<Scalar> trace{psi};
  Scalar last_delta = std::numeric_limits<Scalar>::infinity();
  bool converged = false;
  int iteration = 0;

  while (iteration < options.max_iterations) {
    ++iteration;
    const Matrix<Scalar> pi = softmax_rows(f);
    const LaplaceFactors<Scalar> factors = compute_factors(k, pi);

    // b = W f + (y - pi)
    const Vector<Scalar> pi_f = pi.cwiseProduct(f).rowwise().sum();
    const Matrix<Scalar> b =
        pi.cwiseProduct(f) - (pi.array().colwise() * pi_f.array()).matrix() +
        targets - pi;
    const Matrix<Scalar> kb = k * b;
    Matrix<Scalar> c(n, num_classes);
    for (Eigen::Index cls = 0; cls < num_classes; ++cls) {
      c.col(cls) = factors.e[cls] * kb.col(cls);
    }
    const Vector<Scalar> t = factors.sum_e.solve(c.rowwise().sum());
    Matrix<Scalar> a_newton = b - c;
    for (Eigen::Index cls = 0; cls < num_classes; ++cls) {
      a_newton.col(cls) += factors.e[cls] * t;
    }

    const Matrix<Scalar> direction = a_newton - a;
    Scalar step{1};
    bool accepted = false;
    for (int h = 0; h <= options.max_halvings; ++h, step /= Scalar(2)) {
      Matrix<Scalar> a_try = a + step * direction;
      Matrix<Scalar> f_try = k * a_try;
      const Scalar psi_try = objective(a_try, f_try);
      if (psi_try >= psi) {
        last_delta = psi_try - psi;
        a = std::move(a_try);
        f = std::move(f_try);
        psi = psi_try;
        trace.push_back(psi);
        accepted = true;
        break;
      }
    }
    if (!accepted || last_delta < options.tolerance) {
      // No ascent direction left at working precision counts as converged.
      converged = true;
      break;
    }
  }
  if (!converged) {
    std::ostringstream msg;
    msg << "find_mode: no convergence after " << options.max_iterations
        << " iterations, last objective change " << last_delta;
    throw ConvergenceError(msg.str(), static_cast<double>(last_delta));
  }

  LaplaceMode<Scalar> result;
  const Matrix<Scalar> pi = softmax_rows(f);
  result.factors = compute_factors(k, pi);
  result.grad = targets - pi;
  result.mode = std::move(f);
  result.log_marginal = psi - result.factors.half_log_det;
  result.iterations = iteration;
  result.objective_trace = std::move(trace);
  return result;
}

template <typename Scalar>
LaplaceMode<Scalar> find_mode(const GramMatrix<Scalar> &k, const LabelVector &y,
                              const NewtonOptions<Scalar> &options = {}) {
  return find_mode(k.values, y, options);
}

template <typename Scalar> struct ExpertModel {
  // Rows of the parent dataset this expert was trained on.
  std::vector<std::size_t> indices;
  RowMatrix<Scalar> features;
  LabelVector labels;
  // Includes the jitter actually used.
  KernelSpec<Scalar> spec;
  Matrix<Scalar> mode;
  Matrix<Scalar> grad_at_mode;
  LaplaceFactors<Scalar> factors;
  Scalar log_marginal{0};

  int num_classes() const { return labels.num_classes; }
  Eigen::Index num_train() const { return features.rows(); }
  Eigen::Index dims() const { return features.cols(); }
};

using ExpertModeld = ExpertModel<double>;

template <typename Derived>
ExpertModel<typename Derived::Scalar>
train_expert(const Eigen::MatrixBase<Derived> &x, const LabelVector &y,
             const KernelSpec<typename Derived::Scalar> &spec,
             std::vector<std::size_t> indices = {},
             const NewtonOptions<typename Derived::Scalar> &options = {}) {
  using Scalar = typename Derived::Scalar;
  if (static_cast<std::size_t>(x.rows()) != y.size()) {
    throw DimensionError("train_expert: " + std::to_string(x.rows()) +
                         " feature rows but " + std::to_string(y.size()) +
                         " labels");
  }
  if (indices.empty()) {
    indices.resize(y.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
  } else if (indices.size() != y.size()) {
    throw DimensionError("train_expert: index list length differs from "
                         "label count");
  }
  const GramMatrix<Scalar> k = gram(x, spec);
  LaplaceMode<Scalar> fit = find_mode(k, y, options);

  ExpertModel<Scalar> model;
  model.indices = std::move(indices);
  model.features = x;
  model.labels = y;
  model.spec = k.spec;
  model.mode = std::move(fit.mode);
  model.grad_at_mode = std::move(fit.grad);
  model.factors = std::move(fit.factors);
  model.log_marginal = fit.log_marginal;
  return model;
}

/// Rebuilds the derived factors of a stored model from its mode. Produces
/// bit-identical factors to those computed at the end of training.
template <typename Scalar>
ExpertModel<Scalar> restore_expert(std::vector<std::size_t> indices,
                                   RowMatrix<Scalar> features,
                                   LabelVector labels,
                                   const KernelSpec<Scalar> &spec,
                                   Matrix<Scalar> mode,
                                   Matrix<Scalar> grad_at_mode,
                                   Scalar log_marginal) {
  const auto n = features.rows();
  if (static_cast<std::size_t>(n) != labels.size() ||
      indices.size() != labels.size() || mode.rows() != n ||
      grad_at_mode.rows() != n || mode.cols() != labels.num_classes ||
      grad_at_mode.cols() != labels.num_classes) {
    throw FormatError("expert model: inconsistent stored dimensions");
  }
  const GramMatrix<Scalar> k = gram_fixed_jitter(features, spec);
  ExpertModel<Scalar> model;
  model.indices = std::move(indices);
  model.features = std::move(features);
  model.labels = std::move(labels);
  model.spec = spec;
  model.factors = compute_factors(k.values, softmax_rows(mode));
  model.mode = std::move(mode);
  model.grad_at_mode = std::move(grad_at_mode);
  model.log_marginal = log_marginal;
  return model;
}

template <typename Scalar>
Scalar log_marginal_likelihood(const ExpertModel<Scalar> &model) {
  return model.log_marginal;
}

/// Per-point, per-class latent Gaussian marginals (n_test x C each).
template <typename Scalar> struct LatentPrediction {
  Matrix<Scalar> mean;
  Matrix<Scalar> variance;

  Eigen::Index size() const { return mean.rows(); }
  Eigen::Index num_classes() const { return mean.cols(); }
};

using LatentPredictiond = LatentPrediction<double>;

/// mean_c(x) = k(x, X) grad_c
/// var_c(x)  = k(x, x) - k(x, X) (K + W^-1)^-1 k(X, x), restricted to the
/// diagonal class block; computed as k^T E_c k - |L^-1 E_c k|^2 with
/// L L^T = sum_c E_c.
template <typename Scalar, typename Derived>
LatentPrediction<Scalar> latent_predict(const ExpertModel<Scalar> &model,
                                        const Eigen::MatrixBase<Derived> &x_test) {
  if (x_test.cols() != model.dims()) {
    throw DimensionError("latent_predict: test features have " +
                         std::to_string(x_test.cols()) +
                         " dims, model expects " +
                         std::to_string(model.dims()));
  }
  const Matrix<Scalar> k_star = cross_gram(model.features, x_test, model.spec);
  const Matrix<Scalar> k_star_t = k_star.transpose();

  LatentPrediction<Scalar> pred;
  pred.mean = k_star * model.grad_at_mode;
  pred.variance.resize(x_test.rows(), model.num_classes());
  for (Eigen::Index c = 0; c < model.num_classes(); ++c) {
    const Matrix<Scalar> b = model.factors.e[c] * k_star_t;
    const Matrix<Scalar> w = model.factors.sum_e.matrixL().solve(b);
    pred.variance.col(c) =
        (model.spec.signal_variance -
         k_star_t.cwiseProduct(b).colwise().sum().array() +
         w.colwise().squaredNorm().array())
            .transpose();
  }
  return pred;
}

/// Class probabilities, n_test x C; each row sums to one.
template <typename Scalar> using ClassPosterior = Matrix<Scalar>;

inline constexpr int kDefaultPredictiveSamples = 1000;

/// Monte Carlo estimate of E[softmax(f)] with f_c ~ N(mean_c, variance_c)
/// independent across classes. Point i draws from its own stream derived
/// from (seed, i), so results do not depend on evaluation order. Points
/// with all-zero variance return softmax(mean) exactly.
template <typename Scalar>
ClassPosterior<Scalar> predictive_density(const LatentPrediction<Scalar> &pred,
                                          int num_samples, std::uint64_t seed) {
  if (num_samples < 1) {
    throw ConfigError("predictive_density: need at least one sample");
  }
  if (pred.mean.rows() != pred.variance.rows() ||
      pred.mean.cols() != pred.variance.cols()) {
    throw DimensionError("predictive_density: mean/variance shape mismatch");
  }
  const Eigen::Index num_classes = pred.num_classes();
  ClassPosterior<Scalar> posterior(pred.size(), num_classes);
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const Vector<Scalar> mu = pred.mean.row(i).transpose();
    const Vector<Scalar> sd =
        pred.variance.row(i).transpose().cwiseMax(Scalar(0)).cwiseSqrt();
    if ((sd.array() == Scalar(0)).all()) {
      posterior.row(i) = softmax(mu).transpose();
      continue;
    }
    auto rng = make_rng(seed, static_cast<std::uint64_t>(i));
    std::normal_distribution<double> normal;
    Vector<Scalar> acc = Vector<Scalar>::Zero(num_classes);
    Vector<Scalar> draw(num_classes);
    for (int s = 0; s < num_samples; ++s) {
      for (Eigen::Index c = 0; c < num_classes; ++c) {
        draw(c) = mu(c) + sd(c) * static_cast<Scalar>(normal(rng));
      }
      acc += softmax(draw);
    }
    posterior.row(i) = (acc / static_cast<Scalar>(num_samples)).transpose();
  }
  return posterior;
}

struct HyperGrid {
  std::vector<double> log2_length_scale;
  std::vector<double> log2_signal_variance;

  // log2 length scale in {-2..6}, log2 signal variance in {-2..4}.
  static HyperGrid defaults() {
    HyperGrid grid;
    for (int v = -2; v <= 6; ++v) {
      grid.log2_length_scale.push_back(v);
    }
    for (int v = -2; v <= 4; ++v) {
      grid.log2_signal_variance.push_back(v);
    }
    return grid;
  }
};

template <typename Scalar> struct GridEvaluation {
  KernelSpec<Scalar> spec;
  bool ok = false;
  Scalar objective{0};
  std::string error;
};

template <typename Scalar> struct HyperSearchResult {
  KernelSpec<Scalar> best;
  Scalar objective{0};
  std::vector<GridEvaluation<Scalar>> evaluations;
};

/// Grid search maximizing the summed Laplace log marginal likelihood of one
/// expert per subset. Ties go to the smaller length scale, then the smaller
/// signal variance. Grid points whose Gram matrix cannot be factorized or
/// whose mode search fails are skipped.
template <typename Derived>
HyperSearchResult<typename Derived::Scalar>
fit_hyperparameters(const Eigen::MatrixBase<Derived> &x, const LabelVector &y,
                    std::span<const std::vector<std::size_t>> subsets,
                    const HyperGrid &grid, std::size_t jobs = 1,
                    const NewtonOptions<typename Derived::Scalar> &options = {}) {
  using Scalar = typename Derived::Scalar;
  if (grid.log2_length_scale.empty() || grid.log2_signal_variance.empty()) {
    throw ConfigError("fit_hyperparameters: empty hyperparameter grid");
  }
  if (subsets.empty()) {
    throw ConfigError("fit_hyperparameters: no subsets");
  }
  if (static_cast<std::size_t>(x.rows()) != y.size()) {
    throw DimensionError("fit_hyperparameters: features and labels differ in "
                         "length");
  }

  std::vector<RowMatrix<Scalar>> xs;
  std::vector<LabelVector> ys;
  for (const auto &subset : subsets) {
    RowMatrix<Scalar> xs_k(static_cast<Eigen::Index>(subset.size()), x.cols());
    for (std::size_t i = 0; i < subset.size(); ++i) {
      xs_k.row(static_cast<Eigen::Index>(i)) =
          x.row(static_cast<Eigen::Index>(subset[i]));
    }
    xs.push_back(std::move(xs_k));
    ys.push_back(select_labels(y, subset));
  }

  HyperSearchResult<Scalar> result;
  for (double log2_ell : grid.log2_length_scale) {
    for (double log2_sf2 : grid.log2_signal_variance) {
      GridEvaluation<Scalar> eval;
      eval.spec = KernelSpec<Scalar>::with_default_jitter(
          static_cast<Scalar>(std::exp2(log2_sf2)),
          static_cast<Scalar>(std::exp2(log2_ell)));
      result.evaluations.push_back(eval);
    }
  }

  parallel_for(result.evaluations.size(), jobs, [&](std::size_t g) {
    auto &eval = result.evaluations[g];
    try {
      Scalar total{0};
      for (std::size_t k = 0; k < xs.size(); ++k) {
        const GramMatrix<Scalar> gm = gram(xs[k], eval.spec);
        total += find_mode(gm, ys[k], options).log_marginal;
      }
      eval.ok = std::isfinite(total);
      eval.objective = total;
      if (!eval.ok) {
        eval.error = "non-finite objective";
      }
    } catch (const Error &e) {
      eval.ok = false;
      eval.error = e.what();
    }
  });

  const GridEvaluation<Scalar> *best = nullptr;
  for (const auto &eval : result.evaluations) {
    if (!eval.ok) {
      continue;
    }
    const bool better =
        best == nullptr || eval.objective > best->objective ||
        (eval.objective == best->objective &&
         (eval.spec.length_scale < best->spec.length_scale ||
          (eval.spec.length_scale == best->spec.length_scale &&
           eval.spec.signal_variance < best->spec.signal_variance)));
    if (better) {
      best = &eval;
    }
  }
  if (best == nullptr) {
    throw Error("fit_hyperparameters: every grid point failed (first error: " +
                result.evaluations.front().error + ")");
  }
  result.best = best->spec;
  result.objective = best->objective;
  return result;
}

template <typename Derived>
HyperSearchResult<typename Derived::Scalar>
fit_hyperparameters(const Eigen::MatrixBase<Derived> &x, const LabelVector &y,
                    const HyperGrid &grid, std::size_t jobs = 1) {
  std::vector<std::size_t> all(y.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const std::vector<std::vector<std::size_t>> subsets{std::move(all)};
  return fit_hyperparameters(x, y, std::span(subsets), grid, jobs);
}

} // namespace pillar
