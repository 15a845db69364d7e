#pragma once

// State reconstruction from coincidence counts.
//
// Physicality is enforced by construction: the fitted operator is
// rho = L^dag L / Tr(L^dag L) with L lower triangular, parametrized by d^2
// reals (diagonal first, then column-major re/im pairs of the strictly lower
// entries). The Poisson negative log-likelihood is minimized over the factor
// parameters with an analytic gradient (L-BFGS, multi-start); the overall
// scale of L^dag L doubles as the total-pair nuisance parameter, so no
// explicit normalization constraint is needed.
//
// The Bayesian estimator runs a tempered sequential importance sampler over
// the same parametrization, with systematic resampling and a Liu-West
// shrinkage kernel; its prior draws L by the Bartlett construction, which
// makes L^dag L a complex Wishart matrix and the normalized state
// Hilbert-Schmidt distributed (prior mean exactly I/d).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sdt/common.hpp"
#include "sdt/optics.hpp"
#include "sdt/qcore.hpp"
#include "sdt/rng.hpp"

namespace sdt::tomo {

using qcore::AliceOutcome;
using qcore::DensityOperator;
using qcore::StateVector;
using optics::SettingsCatalog;

// ---------------------------------------------------------------------------
// Cholesky parametrization

struct CholeskyParams {
  std::vector<double> t;

  int dim() const {
    const int d = int(std::lround(std::sqrt(double(t.size()))));
    if (d < 2 || d * d != int(t.size()))
      throw DimensionError("CholeskyParams: size must be a square, >= 4");
    return d;
  }
};

namespace detail {

inline Mat params_to_factor(const Eigen::VectorXd& x, int d) {
  Mat L = Mat::Zero(d, d);
  for (int i = 0; i < d; ++i) L(i, i) = x(i);
  int p = d;
  for (int col = 0; col < d - 1; ++col)
    for (int row = col + 1; row < d; ++row) {
      L(row, col) = cplx(x(p), x(p + 1));
      p += 2;
    }
  return L;
}

inline Eigen::VectorXd factor_to_params(const Mat& L) {
  const int d = int(L.rows());
  Eigen::VectorXd x(d * d);
  for (int i = 0; i < d; ++i) x(i) = L(i, i).real();
  int p = d;
  for (int col = 0; col < d - 1; ++col)
    for (int row = col + 1; row < d; ++row) {
      x(p) = L(row, col).real();
      x(p + 1) = L(row, col).imag();
      p += 2;
    }
  return x;
}

/// Row sign flips of L leave L^dag L invariant; pin the representative with
/// non-negative diagonal so parameter-space averages stay meaningful.
inline void canonicalize_factor_params(Eigen::VectorXd& x, int d) {
  Mat L = params_to_factor(x, d);
  bool flipped = false;
  for (int r = 0; r < d; ++r)
    if (L(r, r).real() < 0.0) {
      L.row(r) = -L.row(r);
      flipped = true;
    }
  if (flipped) x = factor_to_params(L);
}

}  // namespace detail

inline Mat cholesky_factor(const CholeskyParams& p) {
  const int d = p.dim();
  return detail::params_to_factor(
      Eigen::Map<const Eigen::VectorXd>(p.t.data(), long(p.t.size())), d);
}

/// rho = L^dag L / Tr(L^dag L); positive semidefinite, Hermitian and unit
/// trace by construction.
inline DensityOperator cholesky_to_density(const CholeskyParams& p) {
  const Mat L = cholesky_factor(p);
  const double tr = L.squaredNorm();
  if (tr <= 0.0)
    throw DegenerateStateError("cholesky_to_density: all parameters are zero");
  Mat rho = (L.adjoint() * L) / tr;
  rho = ((rho + rho.adjoint()) / 2.0).eval();
  return DensityOperator(std::move(rho));
}

/// Inverse map for full-rank states: the unique lower-triangular L with
/// non-negative diagonal and L^dag L = rho (up to scale). Rank-deficient
/// input is regularized by a vanishing ridge.
inline CholeskyParams density_to_params(const DensityOperator& rho) {
  const int d = rho.dim();
  Mat m = rho.matrix();
  Mat j = Mat::Zero(d, d);
  for (int i = 0; i < d; ++i) j(i, d - 1 - i) = 1.0;
  double ridge = 0.0;
  for (int attempt = 0; attempt < 4; ++attempt) {
    Mat reversed = j * (m + ridge * Mat::Identity(d, d)) * j;
    Eigen::LLT<Mat> llt(reversed);
    if (llt.info() == Eigen::Success) {
      Mat b = llt.matrixL();
      Mat L = j * b.adjoint() * j;
      Eigen::VectorXd x = detail::factor_to_params(L);
      detail::canonicalize_factor_params(x, d);
      return CholeskyParams{std::vector<double>(x.data(), x.data() + x.size())};
    }
    ridge = (ridge == 0.0) ? 1e-14 : ridge * 100.0;
  }
  throw ValidationError("density_to_params: factorization failed");
}

// ---------------------------------------------------------------------------
// Count data and calibration

/// Counts for one analyzer setting: integration time, per-detector singles
/// and the 4x4 coincidence block (Alice detector x Bob detector).
struct CountRecord {
  int setting_index = 0;  // 1-based index into the settings catalog
  double duration = 0.0;  // seconds
  std::array<std::int64_t, 4> alice_singles{};
  std::array<std::int64_t, 4> bob_singles{};
  Eigen::Matrix<std::int64_t, 4, 4> coincidences =
      Eigen::Matrix<std::int64_t, 4, 4>::Zero();

  void validate(int catalog_size) const {
    if (setting_index < 1 || setting_index > catalog_size)
      throw ValidationError("CountRecord: setting_index " +
                            std::to_string(setting_index) + " out of range");
    if (duration <= 0.0)
      throw ValidationError("CountRecord: duration must be > 0");
    for (auto v : alice_singles)
      if (v < 0) throw ValidationError("CountRecord: negative singles");
    for (auto v : bob_singles)
      if (v < 0) throw ValidationError("CountRecord: negative singles");
    if ((coincidences.array() < 0).any())
      throw ValidationError("CountRecord: negative coincidences");
  }
};

/// Relative measurement efficiencies, normalized to detector 1 of each side.
struct EfficiencyCalibration {
  std::array<double, 4> bob_ratios = {1.0, 1.0, 1.0, 1.0};
  std::array<double, 4> alice_ratios = {1.0, 1.0, 1.0, 1.0};

  void validate() const {
    for (double r : bob_ratios)
      if (r <= 0.0) throw ValidationError("EfficiencyCalibration: ratio <= 0");
    for (double r : alice_ratios)
      if (r <= 0.0) throw ValidationError("EfficiencyCalibration: ratio <= 0");
  }
};

// ---------------------------------------------------------------------------
// Forward model

/// One datum of the likelihood: a rank-1 measurement direction (unnormalized
/// back-propagated ket), its exposure scale (duration x efficiency), and the
/// observed count.
struct MeasurementChannel {
  Vec ket;
  double scale = 1.0;
  double observed = 0.0;
};

/// Channels of the ququart tomography conditioned on one Alice outcome.
inline std::vector<MeasurementChannel> conditional_channels(
    const std::vector<CountRecord>& counts, const SettingsCatalog& catalog,
    AliceOutcome outcome, const EfficiencyCalibration& calib) {
  calib.validate();
  const int k = qcore::outcome_index(outcome) - 1;
  std::vector<MeasurementChannel> out;
  out.reserve(counts.size() * 4);
  for (const auto& rec : counts) {
    rec.validate(catalog.size());
    const auto& kets = catalog.kets[rec.setting_index - 1];
    for (int j = 0; j < 4; ++j)
      out.push_back({Vec(kets[j]), rec.duration * calib.bob_ratios[j],
                     double(rec.coincidences(k, j))});
  }
  return out;
}

/// Channels of the full two-photon tomography. Expects one record per pair
/// setting, indexed row-major over (Alice setting, Bob setting).
inline std::vector<MeasurementChannel> joint_channels(
    const std::vector<CountRecord>& counts, const SettingsCatalog& catalog,
    const EfficiencyCalibration& calib) {
  calib.validate();
  const int n = catalog.size();
  std::vector<MeasurementChannel> out;
  out.reserve(counts.size() * 16);
  for (const auto& rec : counts) {
    rec.validate(n * n);
    const int a = (rec.setting_index - 1) / n;
    const int b = (rec.setting_index - 1) % n;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        Vec ket(16);
        for (int p = 0; p < 4; ++p)
          for (int q = 0; q < 4; ++q)
            ket(p * 4 + q) = catalog.kets[a][i](p) * catalog.kets[b][j](q);
        out.push_back({std::move(ket),
                       rec.duration * calib.alice_ratios[i] * calib.bob_ratios[j],
                       double(rec.coincidences(i, j))});
      }
  }
  return out;
}

/// Expected coincidences per (setting, Bob detector) for a ququart state:
/// nbar = total_pairs * duration_scale_i * ratio_j * <s|rho|s>.
inline Eigen::MatrixXd predict_coincidences(const DensityOperator& rho,
                                            const SettingsCatalog& catalog,
                                            double total_pairs,
                                            const EfficiencyCalibration& calib) {
  if (rho.dim() != 4)
    throw DimensionError("predict_coincidences: expected a 4-dim state");
  calib.validate();
  Eigen::MatrixXd out(catalog.size(), 4);
  for (int i = 0; i < catalog.size(); ++i)
    for (int j = 0; j < 4; ++j) {
      const Vec4& s = catalog.kets[i][j];
      const double p = (s.adjoint() * rho.matrix() * s)(0).real();
      if (p < -1e-12)
        throw ValidationError("predict_coincidences: negative probability");
      out(i, j) = total_pairs * catalog.settings[i].duration_scale *
                  calib.bob_ratios[j] * std::max(0.0, p);
    }
  return out;
}

/// Expected coincidences per (pair setting, detector pair) for a 16-dim
/// state; rows follow joint_settings_1296 order, columns (A_i, B_j) pairs.
inline Eigen::MatrixXd predict_coincidences_joint(
    const DensityOperator& rho, const SettingsCatalog& catalog,
    double total_pairs, const EfficiencyCalibration& calib) {
  if (rho.dim() != 16)
    throw DimensionError("predict_coincidences_joint: expected 16-dim state");
  calib.validate();
  const int n = catalog.size();
  Eigen::MatrixXd out(n * n, 16);
  Vec ket(16);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      const double dur = catalog.settings[a].duration_scale *
                         catalog.settings[b].duration_scale;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          for (int p = 0; p < 4; ++p)
            for (int q = 0; q < 4; ++q)
              ket(p * 4 + q) = catalog.kets[a][i](p) * catalog.kets[b][j](q);
          const double prob = (ket.adjoint() * rho.matrix() * ket)(0).real();
          if (prob < -1e-12)
            throw ValidationError(
                "predict_coincidences_joint: negative probability");
          out(a * n + b, i * 4 + j) = total_pairs * dur *
                                      calib.alice_ratios[i] *
                                      calib.bob_ratios[j] *
                                      std::max(0.0, prob);
        }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Maximum-likelihood estimation

struct MleOptions {
  double grad_tol = 1e-8;
  int max_iterations = 5000;
  int num_starts = 5;  // maximally mixed + 4 random
  int lbfgs_memory = 10;
  std::uint64_t seed = 0x51d7'1ab5ull;  // seeds the random starts only
};

struct ErrorBars {
  double fidelity_mean = std::numeric_limits<double>::quiet_NaN();
  double fidelity_std = std::numeric_limits<double>::quiet_NaN();
  double purity_mean = std::numeric_limits<double>::quiet_NaN();
  double purity_std = std::numeric_limits<double>::quiet_NaN();
  std::array<double, 3> phase_std = {std::numeric_limits<double>::quiet_NaN(),
                                     std::numeric_limits<double>::quiet_NaN(),
                                     std::numeric_limits<double>::quiet_NaN()};
  int n_samples = 0;
  int n_failures = 0;
};

struct ReconstructionResult {
  DensityOperator rho;
  double log_likelihood = 0.0;  // sum(n ln nbar - nbar), n! terms dropped
  double fitted_total = 0.0;    // trace of the unnormalized fitted operator
  int iterations = 0;
  bool converged = false;
  std::vector<double> nll_trace;  // one entry per accepted optimizer step
  std::optional<double> fidelity_to_target;
  std::optional<ErrorBars> error_bars;
  std::vector<std::string> warnings;
};

/// Thrown when the optimizer exhausts its iteration budget; carries the best
/// state reached so callers can inspect or accept it deliberately.
struct ConvergenceError : Error {
  ConvergenceError(const std::string& msg, ReconstructionResult best_so_far)
      : Error(msg), best(std::move(best_so_far)) {}
  ReconstructionResult best;
};

namespace detail {

/// Poisson negative log-likelihood over factor parameters, with gradient.
/// S holds one bra per channel; predictions are nbar_c = k_c |L s_c|^2.
class PoissonObjective {
 public:
  PoissonObjective(const std::vector<MeasurementChannel>& channels, int d)
      : d_(d) {
    const int m = int(channels.size());
    S_.resize(m, d);
    k_.resize(m);
    n_.resize(m);
    for (int c = 0; c < m; ++c) {
      if (int(channels[c].ket.size()) != d)
        throw DimensionError("PoissonObjective: channel dimension mismatch");
      S_.row(c) = channels[c].ket.adjoint();
      k_(c) = channels[c].scale;
      n_(c) = channels[c].observed;
    }
    total_observed_ = n_.sum();
  }

  int dim() const { return d_; }
  double total_observed() const { return total_observed_; }

  /// Predicted total for rho_raw = alpha * I equal to the observed total.
  double mixed_start_scale() const {
    const double denom = (k_.array() * S_.rowwise().squaredNorm().array()).sum();
    return denom > 0.0 ? total_observed_ / denom : 1.0;
  }

  double predicted_total(const Mat& L) const {
    const Mat P = S_ * L.adjoint();
    return (k_.array() * P.rowwise().squaredNorm().array()).sum();
  }

  double eval(const Eigen::VectorXd& x, Eigen::VectorXd* grad) const {
    const Mat L = params_to_factor(x, d_);
    const Mat P = S_ * L.adjoint();  // row c = (L s_c)^dag
    Eigen::VectorXd nbar =
        k_.array() * P.rowwise().squaredNorm().array();
    double nll = 0.0;
    for (int c = 0; c < nbar.size(); ++c) {
      nll += nbar(c);
      if (n_(c) > 0.0) nll -= n_(c) * std::log(std::max(nbar(c), 1e-300));
    }
    if (grad) {
      Eigen::VectorXd gamma(nbar.size());
      for (int c = 0; c < nbar.size(); ++c)
        gamma(c) = k_(c) * (1.0 - (n_(c) > 0.0
                                       ? n_(c) / std::max(nbar(c), 1e-300)
                                       : 0.0));
      const Mat B = S_.adjoint() * (gamma.asDiagonal() * P);
      grad->resize(d_ * d_);
      for (int i = 0; i < d_; ++i) (*grad)(i) = 2.0 * B(i, i).real();
      int p = d_;
      for (int col = 0; col < d_ - 1; ++col)
        for (int row = col + 1; row < d_; ++row) {
          (*grad)(p) = 2.0 * B(col, row).real();
          (*grad)(p + 1) = -2.0 * B(col, row).imag();
          p += 2;
        }
    }
    return nll;
  }

 private:
  int d_;
  Mat S_;
  Eigen::VectorXd k_, n_;
  double total_observed_ = 0.0;
};

struct LbfgsOutcome {
  Eigen::VectorXd x;
  double value = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> trace;
};

/// Limited-memory BFGS with backtracking Armijo line search. The line search
/// only ever accepts decreasing values, which keeps the recorded trace
/// monotone. Stalling at machine precision counts as convergence; only an
/// exhausted iteration budget does not.
template <class F>
LbfgsOutcome lbfgs_minimize(const F& fg, Eigen::VectorXd x0, double grad_tol,
                            int max_iter, int memory) {
  LbfgsOutcome out;
  Eigen::VectorXd x = std::move(x0);
  Eigen::VectorXd g(x.size());
  double f = fg(x, &g);
  out.trace.push_back(f);
  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  int stall = 0;
  int iter = 0;
  for (; iter < max_iter; ++iter) {
    const double gnorm = g.norm();
    if (gnorm <= grad_tol) {
      out.converged = true;
      break;
    }
    // two-loop recursion
    Eigen::VectorXd q = g;
    std::vector<double> alpha(s_hist.size());
    for (int i = int(s_hist.size()) - 1; i >= 0; --i) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    if (!s_hist.empty()) {
      const double gamma = s_hist.back().dot(y_hist.back()) /
                           y_hist.back().squaredNorm();
      q *= gamma;
    }
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(q);
      q += (alpha[i] - beta) * s_hist[i];
    }
    Eigen::VectorXd p = -q;
    double dir_deriv = g.dot(p);
    if (dir_deriv >= 0.0) {  // not a descent direction; fall back to -g
      p = -g;
      dir_deriv = -g.squaredNorm();
    }
    double step = (iter == 0) ? std::min(1.0, 1.0 / std::max(gnorm, 1e-12))
                              : 1.0;
    const double c1 = 1e-4;
    Eigen::VectorXd x_new;
    Eigen::VectorXd g_new(x.size());
    double f_new = f;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * p;
      f_new = fg(x_new, nullptr);
      if (std::isfinite(f_new) && f_new <= f + c1 * step * dir_deriv) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      out.converged = true;  // no descent possible at machine precision
      break;
    }
    fg(x_new, &g_new);
    Eigen::VectorXd s = x_new - x;
    Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (int(s_hist.size()) > memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    const double improvement = f - f_new;
    x = std::move(x_new);
    g = std::move(g_new);
    f = f_new;
    out.trace.push_back(f);
    if (improvement <= 1e-13 * (1.0 + std::abs(f))) {
      if (++stall >= 3) {
        out.converged = true;
        ++iter;
        break;
      }
    } else {
      stall = 0;
    }
  }
  out.x = std::move(x);
  out.value = f;
  out.grad_norm = g.norm();
  out.iterations = iter;
  return out;
}

inline Eigen::VectorXd random_start(Rng& rng, int d, double scale) {
  Eigen::VectorXd x(d * d);
  for (int r = 0; r < d; ++r) {
    std::gamma_distribution<double> gam(double(r + 1), 1.0);
    x(r) = std::sqrt(gam(rng));
  }
  std::normal_distribution<double> nrm(0.0, std::sqrt(0.5));
  for (int p = d; p < d * d; ++p) x(p) = nrm(rng);
  Mat L = params_to_factor(x, d);
  const double tr = L.squaredNorm();
  x *= std::sqrt(scale * d / std::max(tr, 1e-300));
  return x;
}

}  // namespace detail

/// Minimize the Poisson NLL over physical states. Deterministic for fixed
/// options; throws DegenerateDataError on empty data and ConvergenceError
/// (carrying the best state) if the iteration budget runs out.
inline ReconstructionResult mle_fit(
    const std::vector<MeasurementChannel>& channels, int d,
    const MleOptions& opts = {}, const DensityOperator* init = nullptr) {
  if (channels.size() < std::size_t(d) * std::size_t(d))
    throw DegenerateDataError("mle_fit: fewer channels than parameters");
  detail::PoissonObjective obj(channels, d);
  if (obj.total_observed() <= 0.0)
    throw DegenerateDataError("mle_fit: no observed counts");

  const double alpha = obj.mixed_start_scale();
  std::vector<Eigen::VectorXd> starts;
  if (init) {
    const auto params = density_to_params(*init);
    Eigen::VectorXd x0 =
        Eigen::Map<const Eigen::VectorXd>(params.t.data(), d * d);
    const double predicted =
        obj.predicted_total(detail::params_to_factor(x0, d));
    x0 *= std::sqrt(obj.total_observed() / std::max(predicted, 1e-300));
    starts.push_back(std::move(x0));
  } else {
    Eigen::VectorXd mixed = Eigen::VectorXd::Zero(d * d);
    for (int i = 0; i < d; ++i) mixed(i) = std::sqrt(alpha);
    starts.push_back(std::move(mixed));
    Rng rng = make_rng(opts.seed);
    for (int s = 1; s < opts.num_starts; ++s)
      starts.push_back(detail::random_start(rng, d, alpha));
  }

  auto fg = [&obj](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    return obj.eval(x, g);
  };
  std::optional<detail::LbfgsOutcome> best;
  for (auto& x0 : starts) {
    auto run = detail::lbfgs_minimize(fg, std::move(x0), opts.grad_tol,
                                      opts.max_iterations, opts.lbfgs_memory);
    if (!best || run.value < best->value) best = std::move(run);
  }

  const Mat L = detail::params_to_factor(best->x, d);
  const double tr = L.squaredNorm();
  Mat rho = (L.adjoint() * L) / tr;
  rho = ((rho + rho.adjoint()) / 2.0).eval();
  ReconstructionResult result{DensityOperator(std::move(rho))};
  result.log_likelihood = -best->value;
  result.fitted_total = tr;
  result.iterations = best->iterations;
  result.converged = best->converged;
  result.nll_trace = std::move(best->trace);
  if (!result.converged)
    throw ConvergenceError("mle_fit: iteration budget exhausted (grad norm " +
                               std::to_string(best->grad_norm) + ")",
                           std::move(result));
  return result;
}

inline ReconstructionResult mle_reconstruct(
    const std::vector<CountRecord>& counts, const SettingsCatalog& catalog,
    const EfficiencyCalibration& calib, AliceOutcome outcome,
    const MleOptions& opts = {}) {
  return mle_fit(conditional_channels(counts, catalog, outcome, calib), 4,
                 opts);
}

inline ReconstructionResult mle_reconstruct_joint(
    const std::vector<CountRecord>& counts, const SettingsCatalog& catalog,
    const EfficiencyCalibration& calib, const MleOptions& opts = {},
    const DensityOperator* init = nullptr) {
  return mle_fit(joint_channels(counts, catalog, calib), 16, opts, init);
}

// ---------------------------------------------------------------------------
// Bayesian mean estimation

struct BmeOptions {
  int n_samples = 2000;
  std::uint64_t seed = 1;
  double resample_threshold = 0.5;  // ESS fraction that triggers resampling
  double temper_decay = 0.5;        // per-stage target ESS fraction
  int mcmc_sweeps = 5;              // rejuvenation sweeps after a resample
  int max_stages = 1000;
  double low_ess_warn_frac = 0.05;
};

namespace detail {

/// Scale-profiled Poisson log-likelihood of a normalized state: the total
/// pair number is maximized out analytically, so particles live on states.
class ProfiledLikelihood {
 public:
  ProfiledLikelihood(const std::vector<MeasurementChannel>& channels, int d)
      : d_(d) {
    const int m = int(channels.size());
    S_.resize(m, d);
    k_.resize(m);
    n_.resize(m);
    for (int c = 0; c < m; ++c) {
      S_.row(c) = channels[c].ket.adjoint();
      k_(c) = channels[c].scale;
      n_(c) = channels[c].observed;
    }
    n_tot_ = n_.sum();
  }

  int dim() const { return d_; }
  double total_observed() const { return n_tot_; }

  double log_likelihood(const Mat& L) const {
    const double tr = L.squaredNorm();
    const Mat P = S_ * L.adjoint();
    Eigen::VectorXd q = (k_.array() * P.rowwise().squaredNorm().array()) / tr;
    return from_rates(q);
  }

  double log_likelihood_state(const Mat& rho) const {
    const Mat t = S_ * rho;
    Eigen::VectorXd q =
        k_.array() * t.cwiseProduct(S_.conjugate()).rowwise().sum().real().array();
    return from_rates(q);
  }

 private:
  double from_rates(const Eigen::VectorXd& q) const {
    if (n_tot_ <= 0.0) return 0.0;
    const double bigq = q.sum();
    double ll = n_tot_ * std::log(n_tot_ / bigq) - n_tot_;
    for (int c = 0; c < q.size(); ++c)
      if (n_(c) > 0.0) ll += n_(c) * std::log(std::max(q(c), 1e-300));
    return ll;
  }

  int d_;
  Mat S_;
  Eigen::VectorXd k_, n_;
  double n_tot_ = 0.0;
};

inline Eigen::VectorXd sample_prior_params(Rng& rng, int d) {
  Eigen::VectorXd x(d * d);
  for (int r = 0; r < d; ++r) {
    std::gamma_distribution<double> gam(double(r + 1), 1.0);
    x(r) = std::sqrt(gam(rng));
  }
  std::normal_distribution<double> nrm(0.0, std::sqrt(0.5));
  for (int p = d; p < d * d; ++p) x(p) = nrm(rng);
  return x;
}

/// Log density of the Bartlett prior over factor parameters (up to an
/// additive constant): diagonal t_r has t_r^2 ~ Gamma(r+1, 1) with t_r > 0,
/// strictly-lower components are N(0, 1/2).
inline double log_prior_params(const Eigen::VectorXd& x, int d) {
  double lp = 0.0;
  for (int r = 0; r < d; ++r) {
    const double t = x(r);
    if (t <= 0.0) return -std::numeric_limits<double>::infinity();
    lp += (2.0 * r + 1.0) * std::log(t) - t * t;
  }
  for (int p = d; p < d * d; ++p) lp -= x(p) * x(p);
  return lp;
}

inline double ess_from_logw(const Eigen::VectorXd& logw) {
  const double mx = logw.maxCoeff();
  Eigen::ArrayXd w = (logw.array() - mx).exp();
  const double s = w.sum();
  return s * s / (w * w).sum();
}

}  // namespace detail

/// Posterior-mean state under the Hilbert-Schmidt prior and the profiled
/// Poisson likelihood, via tempered importance sampling with systematic
/// resampling and a Liu-West shrinkage kernel. Deterministic given the seed.
inline ReconstructionResult bme_fit(
    const std::vector<MeasurementChannel>& channels, int d,
    const BmeOptions& opts = {}) {
  if (channels.size() < std::size_t(d) * std::size_t(d))
    throw DegenerateDataError("bme_fit: fewer channels than parameters");
  detail::ProfiledLikelihood like(channels, d);
  const int n = opts.n_samples;
  if (n < 2) throw ValidationError("bme_fit: need at least 2 samples");
  Rng rng = make_rng(opts.seed, {0xb3e5u});

  const int np = d * d;
  std::vector<Eigen::VectorXd> particles(n);
  Eigen::VectorXd logl(n);
  for (int i = 0; i < n; ++i) {
    particles[i] = detail::sample_prior_params(rng, d);
    logl(i) = like.log_likelihood(detail::params_to_factor(particles[i], d));
  }
  Eigen::VectorXd logw = Eigen::VectorXd::Zero(n);

  double beta = 0.0;
  int stages = 0;
  bool resampled_ok = true;
  while (beta < 1.0 && stages < opts.max_stages) {
    ++stages;
    // largest temperature step whose reweighted ESS stays above target
    const double target =
        std::max(2.0, opts.temper_decay * detail::ess_from_logw(logw));
    double lo = 0.0, hi = 1.0 - beta;
    if (detail::ess_from_logw(logw + hi * logl) < target) {
      for (int it = 0; it < 40; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (detail::ess_from_logw(logw + mid * logl) >= target)
          lo = mid;
        else
          hi = mid;
      }
      hi = std::max(lo, 1e-6 * (1.0 - beta));
    }
    const double dbeta = hi;
    logw += dbeta * logl;
    logw.array() -= logw.maxCoeff();
    beta += dbeta;

    if (detail::ess_from_logw(logw) < opts.resample_threshold * n &&
        beta < 1.0) {
      // weighted moments for the Liu-West kernel
      Eigen::ArrayXd w = logw.array().exp();
      w /= w.sum();
      Eigen::VectorXd mu = Eigen::VectorXd::Zero(np);
      for (int i = 0; i < n; ++i) mu += w(i) * particles[i];
      Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(np, np);
      for (int i = 0; i < n; ++i) {
        Eigen::VectorXd dlt = particles[i] - mu;
        cov.noalias() += w(i) * dlt * dlt.transpose();
      }
      cov.diagonal().array() += 1e-12 + 1e-9 * cov.trace() / np;
      Eigen::LLT<Eigen::MatrixXd> chol(cov);
      resampled_ok = chol.info() == Eigen::Success;

      // systematic resampling
      std::vector<int> idx(n);
      {
        const double u0 = uniform_sample(rng, 0.0, 1.0) / n;
        double cum = w(0);
        int j = 0;
        for (int i = 0; i < n; ++i) {
          const double u = u0 + double(i) / n;
          while (cum < u && j + 1 < n) cum += w(++j);
          idx[i] = j;
        }
      }
      const double a = opts.lw_shrink;
      const double h = std::sqrt(1.0 - a * a);
      std::vector<Eigen::VectorXd> moved(n);
      std::normal_distribution<double> nrm(0.0, 1.0);
      for (int i = 0; i < n; ++i) {
        Eigen::VectorXd eps(np);
        for (int p = 0; p < np; ++p) eps(p) = nrm(rng);
        moved[i] = a * particles[idx[i]] + (1.0 - a) * mu;
        if (resampled_ok) {
          const Eigen::VectorXd noise = chol.matrixL() * eps;
          moved[i] += h * noise;
        }
        detail::canonicalize_factor_params(moved[i], d);
      }
      particles = std::move(moved);
      for (int i = 0; i < n; ++i)
        logl(i) =
            like.log_likelihood(detail::params_to_factor(particles[i], d));
      logw.setZero();
    }
  }

  Eigen::ArrayXd w = logw.array().exp();
  w /= w.sum();
  Mat mean = Mat::Zero(d, d);
  for (int i = 0; i < n; ++i) {
    const Mat L = detail::params_to_factor(particles[i], d);
    mean += w(i) * (L.adjoint() * L) / L.squaredNorm();
  }
  mean = ((mean + mean.adjoint()) / 2.0).eval();
  mean /= mean.trace().real();

  ReconstructionResult result{DensityOperator(std::move(mean))};
  result.iterations = stages;
  result.converged = beta >= 1.0;
  const double final_ess = detail::ess_from_logw(logw);
  result.log_likelihood = like.log_likelihood_state(result.rho.matrix());
  result.fitted_total = like.total_observed();
  if (final_ess < opts.low_ess_warn_frac * n)
    result.warnings.push_back("bme: effective sample size " +
                              std::to_string(final_ess) + " of " +
                              std::to_string(n) + " particles");
  if (!result.converged)
    result.warnings.push_back("bme: tempering stopped before beta=1");
  if (!resampled_ok)
    result.warnings.push_back("bme: kernel covariance factorization failed");
  return result;
}

inline ReconstructionResult bme_reconstruct(
    const std::vector<CountRecord>& counts, const SettingsCatalog& catalog,
    const EfficiencyCalibration& calib, AliceOutcome outcome,
    const BmeOptions& opts = {}) {
  return bme_fit(conditional_channels(counts, catalog, outcome, calib), 4,
                 opts);
}

// ---------------------------------------------------------------------------
// Monte Carlo error propagation

namespace detail {

inline std::vector<CountRecord> poisson_resample(
    const std::vector<CountRecord>& counts, Rng& rng) {
  std::vector<CountRecord> out = counts;
  for (auto& rec : out)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        rec.coincidences(i, j) =
            poisson_sample(rng, double(rec.coincidences(i, j)));
  return out;
}

}  // namespace detail

/// Poisson-resample the observed counts n_samples times, refit each sample
/// (warm-started from the base fit), and report spreads of fidelity, purity
/// and the extracted phases. More than 20% failed refits is an error.
inline ErrorBars monte_carlo_errors(
    const std::vector<CountRecord>& counts, const SettingsCatalog& catalog,
    const EfficiencyCalibration& calib, int n_samples,
    const StateVector* target, std::uint64_t seed, bool joint,
    AliceOutcome outcome = AliceOutcome::A1, const MleOptions& opts = {}) {
  if (n_samples < 2)
    throw ValidationError("monte_carlo_errors: need n_samples >= 2");
  const int d = joint ? 16 : 4;
  auto build = [&](const std::vector<CountRecord>& recs) {
    return joint ? joint_channels(recs, catalog, calib)
                 : conditional_channels(recs, catalog, outcome, calib);
  };
  const ReconstructionResult base = mle_fit(build(counts), d, opts);

  MleOptions warm = opts;
  warm.num_starts = 1;
  std::vector<double> fids, purities;
  std::array<std::vector<double>, 3> phases;
  int failures = 0;
  for (int s = 0; s < n_samples; ++s) {
    Rng rng = make_rng(seed, {0x3c5u, std::uint64_t(s)});
    auto resampled = detail::poisson_resample(counts, rng);
    try {
      auto fit = mle_fit(build(resampled), d, warm, &base.rho);
      purities.push_back(qcore::purity(fit.rho));
      if (target) fids.push_back(qcore::fidelity(fit.rho, *target));
      if (d == 4) {
        try {
          auto ph = qcore::extract_phases(fit.rho);
          const auto arr = ph.as_array();
          for (int i = 0; i < 3; ++i) phases[i].push_back(arr[i]);
        } catch (const UndefinedPhaseError&) {
          // phase spread undefined for this sample; fidelity/purity kept
        }
      }
    } catch (const Error&) {
      ++failures;
    }
  }
  if (failures * 5 > n_samples)
    throw Error("monte_carlo_errors: " + std::to_string(failures) + " of " +
                std::to_string(n_samples) + " refits failed");

  auto moments = [](const std::vector<double>& v) {
    double mean = 0.0, var = 0.0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    for (double x : v) var += (x - mean) * (x - mean);
    var /= double(v.size() > 1 ? v.size() - 1 : 1);
    return std::pair{mean, std::sqrt(var)};
  };
  ErrorBars bars;
  bars.n_samples = n_samples;
  bars.n_failures = failures;
  if (!purities.empty()) {
    auto [pm, ps] = moments(purities);
    bars.purity_mean = pm;
    bars.purity_std = ps;
  }
  if (!fids.empty()) {
    auto [fm, fs] = moments(fids);
    bars.fidelity_mean = fm;
    bars.fidelity_std = fs;
  }
  for (int i = 0; i < 3; ++i)
    if (phases[i].size() >= 2)
      bars.phase_std[i] = qcore::phase_error_stats(phases[i]).std_rad;
  return bars;
}

// ---------------------------------------------------------------------------
// Measurement-efficiency calibration

/// Estimate per-detector efficiency ratios from calibration tomography runs:
/// whenever detector B_j at one setting projects onto the same catalog state
/// that B1 projects onto at its home setting, the duration-normalized count
/// ratio samples ratio_j. Ratios average over settings and runs; B1 is 1.
inline EfficiencyCalibration calibrate_efficiencies(
    const std::vector<std::vector<CountRecord>>& runs,
    const SettingsCatalog& catalog) {
  if (runs.empty())
    throw CalibrationError("calibrate_efficiencies: no calibration runs");
  std::array<std::vector<double>, 4> samples;
  for (const auto& run : runs) {
    std::map<int, const CountRecord*> by_index;
    for (const auto& rec : run) {
      rec.validate(catalog.size());
      by_index[rec.setting_index] = &rec;
    }
    for (const auto& rec : run) {
      const auto& det_targets = catalog.detector_targets[rec.setting_index - 1];
      for (int j = 1; j < 4; ++j) {
        const int target = det_targets[j];
        if (target < 1) continue;
        auto home = by_index.find(target);  // B1 covers target T at setting T
        if (home == by_index.end()) continue;
        double denom = 0.0, numer = 0.0;
        for (int k = 0; k < 4; ++k) {
          denom += double(home->second->coincidences(k, 0));
          numer += double(rec.coincidences(k, j));
        }
        if (denom <= 0.0)
          throw CalibrationError(
              "calibrate_efficiencies: zero B1 counts at setting " +
              std::to_string(target));
        samples[j].push_back((numer / rec.duration) /
                             (denom / home->second->duration));
      }
    }
  }
  EfficiencyCalibration calib;
  for (int j = 1; j < 4; ++j) {
    if (samples[j].empty())
      throw CalibrationError(
          "calibrate_efficiencies: no cross reference for detector B" +
          std::to_string(j + 1));
    double mean = 0.0;
    for (double v : samples[j]) mean += v;
    calib.bob_ratios[j] = mean / double(samples[j].size());
  }
  calib.validate();
  return calib;
}

}  // namespace sdt::tomo
