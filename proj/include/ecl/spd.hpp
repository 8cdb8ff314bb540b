#pragma once

// Covariance estimation, SPD means and covariance-based alignment.

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ecl/error.hpp"
#include "ecl/signal.hpp"

namespace ecl {

using Matrix = Eigen::MatrixXd;

enum class MeanMode { arithmetic, geometric };

/// Karcher iteration did not reach tolerance.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, Matrix last, double residual)
      : std::runtime_error(what), last_(std::move(last)), residual_(residual) {}
  const Matrix& last_iterate() const { return last_; }
  double residual() const { return residual_; }

 private:
  Matrix last_;
  double residual_;
};

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// f applied to the eigenvalues of a symmetric matrix.
inline Matrix spectral_map(const Matrix& m, const std::function<double(double)>& f) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(m));
  if (eig.info() != Eigen::Success) throw AlignmentError("eigendecomposition failed");
  Eigen::VectorXd v = eig.eigenvalues();
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = f(v[i]);
  return symmetrize(eig.eigenvectors() * v.asDiagonal() * eig.eigenvectors().transpose());
}

inline Matrix spd_sqrt(const Matrix& m) { return spectral_map(m, [](double x) { return std::sqrt(x); }); }
inline Matrix spd_invsqrt(const Matrix& m) { return spectral_map(m, [](double x) { return 1.0 / std::sqrt(x); }); }
inline Matrix spd_log(const Matrix& m) { return spectral_map(m, [](double x) { return std::log(x); }); }
inline Matrix sym_exp(const Matrix& m) { return spectral_map(m, [](double x) { return std::exp(x); }); }

inline bool is_spd(const Matrix& m, double sym_tol = 1e-10) {
  if (m.rows() != m.cols() || m.rows() == 0) return false;
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > sym_tol * std::max(1.0, m.cwiseAbs().maxCoeff())) return false;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(m), Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff() > 0.0;
}

inline Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> trial_view(
    const Trial& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.channels), static_cast<Eigen::Index>(t.samples)};
}

/// (1/T) X X^T of the channel-centred trial, plus 1e-8 * trace/C * I.
inline Matrix covariance(const Trial& trial, double shrinkage = 1e-8) {
  if (trial.channels == 0 || trial.samples == 0 || trial.data.size() != trial.channels * trial.samples) {
    throw DimensionError("covariance: malformed trial");
  }
  const auto x = trial_view(trial);
  const Matrix centred = x.colwise() - x.rowwise().mean();
  Matrix cov = (centred * centred.transpose()) / static_cast<double>(trial.samples);
  cov = symmetrize(cov);
  const auto C = static_cast<double>(trial.channels);
  double ridge = shrinkage * cov.trace() / C;
  if (!(ridge > 0.0)) ridge = shrinkage;  // all-constant trial
  cov.diagonal().array() += ridge;
  return cov;
}

struct KarcherOptions {
  double step = 1.0;
  int max_iterations = 50;
  double tolerance = 1e-10;
};

inline void check_same_dim(std::span<const Matrix> mats, const char* who) {
  if (mats.empty()) throw ContractError(std::string(who) + ": empty list");
  for (const auto& m : mats) {
    if (m.rows() != mats[0].rows() || m.cols() != mats[0].rows()) {
      throw DimensionError(std::string(who) + ": matrices must all be " + std::to_string(mats[0].rows()) + "x" +
                           std::to_string(mats[0].rows()));
    }
  }
}

inline Matrix arithmetic_mean(std::span<const Matrix> mats) {
  check_same_dim(mats, "spd_mean");
  Matrix acc = Matrix::Zero(mats[0].rows(), mats[0].cols());
  for (const auto& m : mats) acc += m;
  return symmetrize(acc / static_cast<double>(mats.size()));
}

/// Affine-invariant (Karcher) mean by fixed-point iteration, started at the
/// arithmetic mean. Residual is the Frobenius norm of the mean tangent vector.
inline Matrix geometric_mean(std::span<const Matrix> mats, const KarcherOptions& opt = {}) {
  Matrix m = arithmetic_mean(mats);
  if (mats.size() == 1) return mats[0];
  double residual = 0.0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    const Matrix half = spd_sqrt(m), inv_half = spd_invsqrt(m);
    Matrix tangent = Matrix::Zero(m.rows(), m.cols());
    for (const auto& a : mats) tangent += spd_log(symmetrize(inv_half * a * inv_half));
    tangent /= static_cast<double>(mats.size());
    residual = tangent.norm();
    if (residual < opt.tolerance) return m;
    m = symmetrize(half * sym_exp(opt.step * tangent) * half);
  }
  throw ConvergenceError("geometric mean: no convergence after " + std::to_string(opt.max_iterations) +
                             " iterations (residual " + std::to_string(residual) + ")",
                         m, residual);
}

inline Matrix spd_mean(std::span<const Matrix> mats, MeanMode mode) {
  return mode == MeanMode::arithmetic ? arithmetic_mean(mats) : geometric_mean(mats);
}

/// R^{-1/2}; rejects references that are not SPD or have condition number > 1e12.
inline Matrix whitening_matrix(const Matrix& reference, double max_condition = 1e12) {
  if (reference.rows() != reference.cols()) throw DimensionError("align: reference must be square");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(reference), Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > max_condition) {
    throw AlignmentError("align: reference is near-singular (eigenvalues in [" + std::to_string(lo) + ", " +
                         std::to_string(hi) + "])");
  }
  return spd_invsqrt(reference);
}

inline void apply_whitening(const Matrix& w, Trial& t) {
  if (static_cast<std::size_t>(w.rows()) != t.channels) {
    throw DimensionError("align: reference is " + std::to_string(w.rows()) + "x" + std::to_string(w.rows()) +
                         " but trial has " + std::to_string(t.channels) + " channels");
  }
  const Matrix y = w * trial_view(t);
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t.data.data(), static_cast<Eigen::Index>(t.channels), static_cast<Eigen::Index>(t.samples)) = y;
}

/// Each trial's data replaced by R^{-1/2} X.
inline std::vector<Trial> align(std::vector<Trial> trials, const Matrix& reference) {
  const Matrix w = whitening_matrix(reference);
  for (auto& t : trials) apply_whitening(w, t);
  return trials;
}

enum class AlignmentMode { none, euclidean, riemannian };

inline std::string to_string(AlignmentMode m) {
  switch (m) {
    case AlignmentMode::none: return "none";
    case AlignmentMode::euclidean: return "euclidean";
    case AlignmentMode::riemannian: return "riemannian";
  }
  return "?";
}

inline AlignmentMode alignment_mode_from_string(const std::string& s) {
  if (s == "none") return AlignmentMode::none;
  if (s == "euclidean") return AlignmentMode::euclidean;
  if (s == "riemannian") return AlignmentMode::riemannian;
  throw ConfigError("unknown alignment mode '" + s + "' (expected none, euclidean or riemannian)");
}

using SessionKey = std::pair<std::uint32_t, std::uint16_t>;  // (subject, session)

/// Reference covariance for each (subject, session) present in `trials`.
inline std::map<SessionKey, Matrix> session_references(std::span<const Trial> trials, AlignmentMode mode) {
  std::map<SessionKey, std::vector<Matrix>> covs;
  for (const auto& t : trials) covs[{t.subject, t.session}].push_back(covariance(t));
  std::map<SessionKey, Matrix> out;
  const MeanMode mean_mode = mode == AlignmentMode::euclidean ? MeanMode::arithmetic : MeanMode::geometric;
  for (const auto& [key, list] : covs) out.emplace(key, spd_mean(list, mean_mode));
  return out;
}

/// Session-wise alignment: every trial is whitened by the reference of its
/// own session. Sessions missing from `refs` use `fallback` if given.
inline void align_sessions(std::span<Trial> trials, const std::map<SessionKey, Matrix>& refs,
                           const Matrix* fallback = nullptr) {
  std::map<SessionKey, Matrix> whiteners;
  for (auto& t : trials) {
    const SessionKey key{t.subject, t.session};
    auto w = whiteners.find(key);
    if (w == whiteners.end()) {
      const auto r = refs.find(key);
      if (r == refs.end() && fallback == nullptr) {
        throw LookupError("align: no reference for subject " + std::to_string(t.subject) + " session " +
                          std::to_string(t.session));
      }
      w = whiteners.emplace(key, whitening_matrix(r == refs.end() ? *fallback : r->second)).first;
    }
    apply_whitening(w->second, t);
  }
}

}  // namespace ecl
