#pragma once

// Exact state algebra of the superdense-teleportation protocol: equimodular
// state construction, phase encoding on the shared entangled pair, the
// mutually-unbiased measurement basis, outcome-conditioned states, the
// diagonal correction unitaries, and the fidelity/purity/phase metrics.
//
// Conventions used throughout the library:
//   * Computational basis order for the ququart is
//       |0> = |H t1>, |1> = |V t1>, |2> = |H t2>, |3> = |V t2>,
//     i.e. polarization varies fastest within a time bin.
//   * Joint two-photon states order the short-wavelength (Alice/Charles)
//     photon first: index = 4 * i_AC + i_B.
//   * All angles are radians inside the library; degrees appear only at the
//     file-format and CLI boundaries.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sdt/common.hpp"

namespace sdt::qcore {

inline std::vector<std::string> default_basis_labels(int dim) {
  if (dim == 4) return {"Ht1", "Vt1", "Ht2", "Vt2"};
  if (dim == 16) {
    std::vector<std::string> out;
    const std::array<std::string, 4> one = {"Ht1", "Vt1", "Ht2", "Vt2"};
    for (const auto& a : one)
      for (const auto& b : one) out.push_back(a + "." + b);
    return out;
  }
  std::vector<std::string> out;
  for (int i = 0; i < dim; ++i) out.push_back(std::to_string(i));
  return out;
}

/// Normalized complex amplitude vector over a computational basis.
class StateVector {
 public:
  explicit StateVector(Vec amplitudes, std::vector<std::string> labels = {})
      : amps_(std::move(amplitudes)), labels_(std::move(labels)) {
    if (amps_.size() < 2) throw DimensionError("StateVector: dim must be >= 2");
    if (labels_.empty()) labels_ = default_basis_labels(int(amps_.size()));
    if (int(labels_.size()) != amps_.size())
      throw DimensionError("StateVector: label count != amplitude count");
    const double norm = amps_.norm();
    if (std::abs(norm - 1.0) > kNormTol)
      throw ValidationError("StateVector: norm " + std::to_string(norm) +
                            " is not 1 within tolerance");
  }

  int dim() const { return int(amps_.size()); }
  const Vec& amplitudes() const { return amps_; }
  const std::vector<std::string>& basis_labels() const { return labels_; }
  cplx operator[](int i) const { return amps_(i); }

 private:
  Vec amps_;
  std::vector<std::string> labels_;
};

/// Fix the global phase so the first amplitude above `tol` is real positive.
/// Makes "equal up to global phase" comparisons exact.
inline StateVector canonical_global_phase(const StateVector& psi,
                                          double tol = 1e-9) {
  const Vec& a = psi.amplitudes();
  for (int i = 0; i < a.size(); ++i) {
    if (std::abs(a(i)) > tol) {
      cplx phase = std::abs(a(i)) / a(i);
      return StateVector(phase * a, psi.basis_labels());
    }
  }
  throw ValidationError("canonical_global_phase: zero vector");
}

/// Hermitian, unit-trace, positive-semidefinite operator.
class DensityOperator {
 public:
  explicit DensityOperator(Mat m) : m_(std::move(m)) {
    if (m_.rows() != m_.cols() || m_.rows() < 2)
      throw DimensionError("DensityOperator: matrix must be square, dim >= 2");
    if ((m_ - m_.adjoint()).cwiseAbs().maxCoeff() > kHermitianTol)
      throw ValidationError("DensityOperator: not Hermitian within tolerance");
    if (std::abs(m_.trace().real() - 1.0) > kTraceTol ||
        std::abs(m_.trace().imag()) > kTraceTol)
      throw ValidationError("DensityOperator: trace is not 1 within tolerance");
    Eigen::SelfAdjointEigenSolver<Mat> es(m_, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -kEigenvalueTol)
      throw ValidationError("DensityOperator: negative eigenvalue " +
                            std::to_string(es.eigenvalues().minCoeff()));
  }

  static DensityOperator from_pure(const StateVector& psi) {
    return DensityOperator(psi.amplitudes() * psi.amplitudes().adjoint());
  }

  int dim() const { return int(m_.rows()); }
  const Mat& matrix() const { return m_; }
  cplx operator()(int i, int j) const { return m_(i, j); }

 private:
  Mat m_;
};

/// The three free phases of a ququart equimodular state, canonicalized to
/// [0, 2*pi). The same struct carries liquid-crystal, calibration and target
/// phase triples in the simulation layer.
struct EquimodularPhases {
  double phi1 = 0.0;
  double phi2 = 0.0;
  double phi3 = 0.0;

  EquimodularPhases() = default;
  EquimodularPhases(double p1, double p2, double p3)
      : phi1(wrap_2pi(p1)), phi2(wrap_2pi(p2)), phi3(wrap_2pi(p3)) {}

  std::array<double, 3> as_array() const { return {phi1, phi2, phi3}; }
};

enum class AliceOutcome : int { A1 = 1, A2 = 2, A3 = 3, A4 = 4 };

inline int outcome_index(AliceOutcome o) { return static_cast<int>(o); }

inline constexpr std::array<AliceOutcome, 4> kAllOutcomes = {
    AliceOutcome::A1, AliceOutcome::A2, AliceOutcome::A3, AliceOutcome::A4};

/// |psi> = (|0> + e^{i phi_1}|1> + ... + e^{i phi_{d-1}}|d-1>)/sqrt(d).
inline StateVector make_equimodular_ket(std::span<const double> phases,
                                        int dim) {
  if (dim < 2) throw DimensionError("make_equimodular_ket: dim must be >= 2");
  if (int(phases.size()) != dim - 1)
    throw DimensionError("make_equimodular_ket: need dim-1 phases, got " +
                         std::to_string(phases.size()));
  Vec a(dim);
  a(0) = 1.0;
  for (int i = 1; i < dim; ++i)
    a(i) = std::exp(cplx(0.0, phases[i - 1]));
  a /= std::sqrt(double(dim));
  return StateVector(std::move(a));
}

inline StateVector make_equimodular_ket(const EquimodularPhases& p,
                                        int dim = 4) {
  auto arr = p.as_array();
  return make_equimodular_ket(std::span<const double>(arr), dim);
}

/// Maximally entangled pair sum_i |ii>/sqrt(d) on a d*d-dim space.
inline StateVector make_shared_entangled_state(int d) {
  if (d != 2 && d != 4)
    throw DimensionError("make_shared_entangled_state: d must be 2 or 4");
  Vec a = Vec::Zero(d * d);
  for (int i = 0; i < d; ++i) a(i * d + i) = 1.0 / std::sqrt(double(d));
  return StateVector(std::move(a));
}

/// Diagonal phase encoding on the shared ququart pair: term |ii> picks up
/// e^{i phi_i} (phi_0 = 0). Norm-preserving.
inline StateVector encode_phases(const StateVector& joint,
                                 const EquimodularPhases& phases) {
  if (joint.dim() != 16)
    throw DimensionError("encode_phases: expected the d=4 joint state (dim 16)");
  Vec a = joint.amplitudes();
  const auto p = phases.as_array();
  for (int i = 1; i < 4; ++i) {
    const cplx f = std::exp(cplx(0.0, p[i - 1]));
    for (int j = 0; j < 4; ++j) a(i * 4 + j) *= f;
  }
  return StateVector(std::move(a), joint.basis_labels());
}

/// The four-detector measurement basis, mutually unbiased with respect to the
/// computational basis: each |A_k> has one negative sign, |<i|A_k>|^2 = 1/4.
inline const std::array<StateVector, 4>& alice_basis() {
  static const std::array<StateVector, 4> basis = [] {
    auto make = [](double s0, double s1, double s2, double s3) {
      Vec a(4);
      a << s0, s1, s2, s3;
      return StateVector(a / 2.0);
    };
    return std::array<StateVector, 4>{
        make(+1, +1, +1, -1), make(+1, +1, -1, +1), make(+1, -1, +1, +1),
        make(-1, +1, +1, +1)};
  }();
  return basis;
}

struct OutcomeBranch {
  AliceOutcome outcome;
  double probability;
  StateVector state;  // Bob's conditional state, normalized
};

/// Project the phase-encoded joint state onto the four measurement outcomes.
/// Derived from inner products with alice_basis(), not transcribed.
inline std::array<OutcomeBranch, 4> decompose_joint_state(
    const EquimodularPhases& phases) {
  const StateVector joint =
      encode_phases(make_shared_entangled_state(4), phases);
  const auto& basis = alice_basis();
  auto branch = [&](int k) {
    const Vec& b = basis[k].amplitudes();
    Vec cond = Vec::Zero(4);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        cond(j) += std::conj(b(i)) * joint.amplitudes()(i * 4 + j);
    const double p = cond.squaredNorm();
    return OutcomeBranch{kAllOutcomes[k], p, StateVector(cond / cond.norm())};
  };
  return {branch(0), branch(1), branch(2), branch(3)};
}

/// Diagonal sign unitary; value type so corrections compose and apply cheaply.
class DiagonalUnitary {
 public:
  explicit DiagonalUnitary(Vec diag) : d_(std::move(diag)) {
    for (int i = 0; i < d_.size(); ++i)
      if (std::abs(std::abs(d_(i)) - 1.0) > kNormTol)
        throw ValidationError("DiagonalUnitary: entries must have modulus 1");
  }

  int dim() const { return int(d_.size()); }
  const Vec& diagonal() const { return d_; }
  Mat matrix() const { return d_.asDiagonal(); }

  StateVector apply(const StateVector& psi) const {
    check(psi.dim());
    return StateVector(d_.cwiseProduct(psi.amplitudes()), psi.basis_labels());
  }

  DensityOperator apply(const DensityOperator& rho) const {
    check(rho.dim());
    Mat m = d_.asDiagonal() * rho.matrix() * d_.conjugate().asDiagonal();
    return DensityOperator(std::move(m));
  }

 private:
  void check(int dim) const {
    if (dim != d_.size())
      throw DimensionError("DiagonalUnitary: dimension mismatch");
  }
  Vec d_;
};

/// Bob's correction for outcome A_k: a pi phase flip on basis term 4-k.
/// The sign patterns follow from the outcome-conditioned states, so that
/// correction(A_k) applied to branch k reproduces the equimodular target.
inline DiagonalUnitary correction_unitary(AliceOutcome outcome) {
  Vec d = Vec::Ones(4);
  d(4 - outcome_index(outcome)) = -1.0;
  return DiagonalUnitary(std::move(d));
}

namespace detail {

inline Mat psd_sqrt(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() *
         es.eigenvectors().adjoint();
}

}  // namespace detail

/// Uhlmann fidelity F = (Tr sqrt(sqrt(sigma) rho sqrt(sigma)))^2.
inline double fidelity(const DensityOperator& rho,
                       const DensityOperator& sigma) {
  if (rho.dim() != sigma.dim())
    throw DimensionError("fidelity: dimension mismatch");
  const Mat s = detail::psd_sqrt(sigma.matrix());
  const Mat inner = s * rho.matrix() * s;
  Eigen::SelfAdjointEigenSolver<Mat> es(inner, Eigen::EigenvaluesOnly);
  double sum = 0.0;
  for (int i = 0; i < es.eigenvalues().size(); ++i)
    sum += std::sqrt(std::max(0.0, es.eigenvalues()(i)));
  return std::min(1.0, sum * sum);
}

/// Fidelity against a pure target reduces to <psi|rho|psi>.
inline double fidelity(const DensityOperator& rho, const StateVector& psi) {
  if (rho.dim() != psi.dim())
    throw DimensionError("fidelity: dimension mismatch");
  const cplx v =
      (psi.amplitudes().adjoint() * rho.matrix() * psi.amplitudes())(0);
  return std::clamp(v.real(), 0.0, 1.0);
}

/// Fidelity of the entrywise modulus |rho| with a pure target. Non-standard
/// metric (|rho| is generally not a state); provided separately because some
/// full-state characterizations quote it.
inline double entrywise_abs_fidelity(const DensityOperator& rho,
                                     const StateVector& psi) {
  if (rho.dim() != psi.dim())
    throw DimensionError("entrywise_abs_fidelity: dimension mismatch");
  const Mat abs_rho = rho.matrix().cwiseAbs().cast<cplx>();
  const cplx v = (psi.amplitudes().adjoint() * abs_rho * psi.amplitudes())(0);
  return v.real();
}

inline double purity(const DensityOperator& rho) {
  return rho.matrix().squaredNorm();  // Tr rho^2 for Hermitian rho
}

/// Phases of basis terms 1..3 relative to term 0, read from the first-column
/// coherences. Requires coherent support on all four terms.
inline EquimodularPhases extract_phases(const DensityOperator& rho,
                                        double tol = 1e-6) {
  if (rho.dim() != 4)
    throw DimensionError("extract_phases: expected a 4-dim operator");
  std::array<double, 3> out{};
  for (int i = 1; i < 4; ++i) {
    const cplx c = rho(i, 0);
    if (std::abs(c) <= tol)
      throw UndefinedPhaseError("extract_phases: coherence rho(" +
                                std::to_string(i) + ",0) below tolerance");
    out[i - 1] = wrap_2pi(std::arg(c));
  }
  return EquimodularPhases(out[0], out[1], out[2]);
}

struct CircularStats {
  double mean_rad = 0.0;  // in (-pi, pi]
  double std_rad = 0.0;

  double mean_deg() const { return rad2deg(mean_rad); }
  double std_deg() const { return rad2deg(std_rad); }
};

/// Mean and standard deviation on the unit circle via the mean resultant
/// vector; immune to 0/2pi wraparound. std = sqrt(-2 ln Rbar).
inline CircularStats phase_error_stats(std::span<const double> deltas_rad) {
  if (deltas_rad.empty())
    throw ValidationError("phase_error_stats: empty sample");
  cplx resultant(0.0, 0.0);
  for (double d : deltas_rad) resultant += std::exp(cplx(0.0, d));
  resultant /= double(deltas_rad.size());
  CircularStats s;
  const double rbar = std::abs(resultant);
  s.mean_rad = rbar > 0.0 ? std::arg(resultant) : 0.0;
  s.std_rad = rbar >= 1.0 ? 0.0 : std::sqrt(-2.0 * std::log(rbar));
  return s;
}

/// Trace out one photon of a joint (dA*dB)-dim state.
/// keep_first selects the Alice/Charles side, otherwise Bob's.
inline DensityOperator partial_trace(const DensityOperator& joint, int d_a,
                                     int d_b, bool keep_first) {
  if (joint.dim() != d_a * d_b)
    throw DimensionError("partial_trace: dimension mismatch");
  const Mat& m = joint.matrix();
  if (keep_first) {
    Mat out = Mat::Zero(d_a, d_a);
    for (int i = 0; i < d_a; ++i)
      for (int k = 0; k < d_a; ++k)
        for (int j = 0; j < d_b; ++j) out(i, k) += m(i * d_b + j, k * d_b + j);
    return DensityOperator(std::move(out));
  }
  Mat out = Mat::Zero(d_b, d_b);
  for (int j = 0; j < d_b; ++j)
    for (int l = 0; l < d_b; ++l)
      for (int i = 0; i < d_a; ++i) out(j, l) += m(i * d_b + j, i * d_b + l);
  return DensityOperator(std::move(out));
}

/// Condition a joint 16-dim operator on an Alice-side projection.
/// Returns (outcome probability, Bob's normalized conditional state).
inline std::pair<double, DensityOperator> condition_on_alice(
    const Mat& joint16, const StateVector& alice_ket) {
  if (joint16.rows() != 16 || joint16.cols() != 16 || alice_ket.dim() != 4)
    throw DimensionError("condition_on_alice: dimension mismatch");
  const Vec& a = alice_ket.amplitudes();
  Mat cond = Mat::Zero(4, 4);
  for (int j = 0; j < 4; ++j)
    for (int l = 0; l < 4; ++l) {
      cplx acc(0.0, 0.0);
      for (int i = 0; i < 4; ++i)
        for (int k = 0; k < 4; ++k)
          acc += std::conj(a(i)) * joint16(i * 4 + j, k * 4 + l) * a(k);
      cond(j, l) = acc;
    }
  const double p = cond.trace().real();
  if (p <= 0.0)
    throw ValidationError("condition_on_alice: zero outcome probability");
  cond /= p;
  cond = (cond + cond.adjoint().eval()) / 2.0;  // scrub rounding asymmetry
  return {p, DensityOperator(std::move(cond))};
}

}  // namespace sdt::qcore
