#pragma once

// Jones-calculus model of the time-bin/polarization analyzer: waveplate
// matrices, the unbalanced-interferometer port injections, the removable
// polarizer, the induced four-detector measurement operators, and the
// 36-projection tomography catalog (plus its 36x36 two-photon product).
//
// Polarization conventions, fixed and used by every consumer:
//   H = (1,0), V = (0,1), D = (H+V)/sqrt2, A = (H-V)/sqrt2,
//   R = (H-iV)/sqrt2, L = (H+iV)/sqrt2.
//
// A detector ket is the back-propagated state its detector projects onto,
//
//   ket = Pol * HWP1 * QWP1 * S * Port_k * QWP_arm * HWP_arm * e_pol,
//
// where S = diag(1,-1,1,-1) is the analyzer's fixed V-phase convention and
// Port_1/Port_2 inject the 2-dim arm state into the 4-dim pol x time-bin
// space. With the polarizer open the four kets of a setting are orthonormal
// and their projectors resolve the identity.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "sdt/common.hpp"
#include "sdt/qcore.hpp"

namespace sdt::optics {

using qcore::StateVector;

/// One analyzer configuration: three half-wave and three quarter-wave plate
/// angles (radians), the removable-polarizer amplitude transmissions, and the
/// relative integration-time multiplier for the setting.
struct TomographySetting {
  double alpha1 = 0.0, alpha2 = 0.0, alpha3 = 0.0;  // HWP angles
  double beta1 = 0.0, beta2 = 0.0, beta3 = 0.0;     // QWP angles
  double t_h = 1.0, t_v = 1.0;
  double duration_scale = 1.0;

  void validate() const {
    if (t_h < 0.0 || t_h > 1.0 || t_v < 0.0 || t_v > 1.0)
      throw ValidationError("TomographySetting: t_h, t_v must lie in [0,1]");
    if (duration_scale <= 0.0)
      throw ValidationError("TomographySetting: duration_scale must be > 0");
  }
};

inline Mat2 jones_hwp(double alpha) {
  const double c = std::cos(2.0 * alpha);
  const double s = 2.0 * std::cos(alpha) * std::sin(alpha);
  Mat2 m;
  m << c, -s, -s, -c;
  return m;
}

inline Mat2 jones_qwp(double beta) {
  const double c = std::cos(beta), s = std::sin(beta);
  const cplx i(0.0, 1.0);
  Mat2 m;
  m << c * c + i * s * s, (i - 1.0) * c * s, (i - 1.0) * c * s,
      i * c * c + s * s;
  return m;
}

namespace detail {

inline Mat4 block_diag(const Mat2& b) {
  Mat4 m = Mat4::Zero();
  m.block<2, 2>(0, 0) = b;
  m.block<2, 2>(2, 2) = b;
  return m;
}

}  // namespace detail

/// Waveplates ahead of the interferometer act on polarization within each
/// time bin, hence block-diagonal on (Ht1,Vt1,Ht2,Vt2).
inline Mat4 block_hwp(double alpha) { return detail::block_diag(jones_hwp(alpha)); }
inline Mat4 block_qwp(double beta) { return detail::block_diag(jones_qwp(beta)); }

/// Fixed V-phase sign convention of the analyzer.
inline Mat4 v_sign_flip() {
  Mat4 m = Mat4::Zero();
  m(0, 0) = 1.0;
  m(1, 1) = -1.0;
  m(2, 2) = 1.0;
  m(3, 3) = -1.0;
  return m;
}

/// Removable-polarizer diagonal. t_h = t_v = 1 is the open (absent) polarizer
/// and gives the identity; (1,0)/(0,1) are the H-pass/V-pass positions.
inline Mat4 removable_polarizer(double t_h, double t_v) {
  const double ah = (2.0 * t_h - t_v) * t_h;
  const double av = (2.0 * t_v - t_h) * t_v;
  Mat4 m = Mat4::Zero();
  m(0, 0) = ah;
  m(1, 1) = av;
  m(2, 2) = ah;
  m(3, 3) = av;
  return m;
}

using PortMatrix = Eigen::Matrix<cplx, 4, 2>;

/// Output-port injections of the unbalanced interferometer: port 1 maps the
/// arm's H to |Ht1> and V to |Vt2>; port 2 maps H to |Vt1> and V to |Ht2>.
inline PortMatrix port1_injection() {
  PortMatrix m = PortMatrix::Zero();
  m(0, 0) = 1.0;
  m(3, 1) = 1.0;
  return m;
}

inline PortMatrix port2_injection() {
  PortMatrix m = PortMatrix::Zero();
  m(1, 0) = 1.0;
  m(2, 1) = 1.0;
  return m;
}

/// Back-propagated kets for detectors B1..B4 at one setting (unnormalized;
/// the polarizer convention scales engaged settings).
inline std::array<Vec4, 4> detector_kets(const TomographySetting& s) {
  s.validate();
  const Mat4 prefix = removable_polarizer(s.t_h, s.t_v) * block_hwp(s.alpha1) *
                      block_qwp(s.beta1) * v_sign_flip();
  const PortMatrix arm1 =
      prefix * port1_injection() * jones_qwp(s.beta2) * jones_hwp(s.alpha2);
  const PortMatrix arm2 =
      prefix * port2_injection() * jones_qwp(s.beta3) * jones_hwp(s.alpha3);
  return {Vec4(arm1.col(0)), Vec4(arm1.col(1)), Vec4(arm2.col(0)),
          Vec4(arm2.col(1))};
}

/// The four positive measurement operators of one setting, one per detector.
struct ProjectorSet {
  std::array<Mat4, 4> ops;
};

inline ProjectorSet build_projector_set(const TomographySetting& s) {
  const auto kets = detector_kets(s);
  ProjectorSet p;
  for (int i = 0; i < 4; ++i) p.ops[i] = kets[i] * kets[i].adjoint();
  return p;
}

/// One of the 36 catalog projections.
struct TargetState {
  int index;  // 1-based
  StateVector state;
  std::string name;
};

namespace detail {

inline Vec2 pol_vec(char p) {
  const double s = 1.0 / std::sqrt(2.0);
  const cplx i(0.0, 1.0);
  Vec2 v;
  switch (p) {
    case 'H': v << 1.0, 0.0; break;
    case 'V': v << 0.0, 1.0; break;
    case 'D': v << s, s; break;
    case 'A': v << s, -s; break;
    case 'R': v << s, -i * s; break;
    case 'L': v << s, i * s; break;
    default: throw ConfigError("pol_vec: unknown polarization label");
  }
  return v;
}

inline Vec4 in_bin(const Vec2& p, int bin) {
  Vec4 v = Vec4::Zero();
  v(2 * bin) = p(0);
  v(2 * bin + 1) = p(1);
  return v;
}

/// |overlap|^2 between normalized directions; 1 iff equal up to global phase.
inline double direction_overlap2(const Vec4& a, const Vec4& b) {
  const double na = a.norm(), nb = b.norm();
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  const cplx ip = (a.adjoint() * b)(0);
  return std::norm(ip) / (na * na * nb * nb);
}

}  // namespace detail

/// The informationally overcomplete 36-state catalog:
///   1-12   {H,V,D,A,R,L} x {t1,t2}
///   13-20  {H,V} x (t1 +- i t2)/sqrt2, (t1 +- t2)/sqrt2
///   21-28  (Dt1 +- iAt2)/sqrt2, (Dt1 +- At2)/sqrt2, and with D<->A swapped
///   29-36  same as 21-28 with D,A -> R,L
inline const std::vector<TargetState>& standard_36_targets() {
  static const std::vector<TargetState> targets = [] {
    std::vector<TargetState> out;
    const double s = 1.0 / std::sqrt(2.0);
    const std::array<cplx, 4> sigmas = {cplx(0, 1), cplx(0, -1), cplx(1, 0),
                                        cplx(-1, 0)};
    const std::array<std::string, 4> signs = {"+i", "-i", "+", "-"};
    auto push = [&out](Vec4 v, std::string name) {
      const int idx = int(out.size()) + 1;
      out.push_back({idx, StateVector(Vec(v)), std::move(name)});
    };
    for (char p : {'H', 'V', 'D', 'A', 'R', 'L'})
      for (int bin : {0, 1})
        push(detail::in_bin(detail::pol_vec(p), bin),
             std::string(1, p) + "t" + std::to_string(bin + 1));
    for (char p : {'H', 'V'})
      for (int k = 0; k < 4; ++k) {
        Vec4 v = s * (detail::in_bin(detail::pol_vec(p), 0) +
                      sigmas[k] * detail::in_bin(detail::pol_vec(p), 1));
        push(v, std::string(1, p) + "(t1" + signs[k] + "t2)");
      }
    auto pairs = std::array<std::pair<char, char>, 4>{
        std::pair{'D', 'A'}, {'A', 'D'}, {'R', 'L'}, {'L', 'R'}};
    for (const auto& [p1, p2] : pairs)
      for (int k = 0; k < 4; ++k) {
        Vec4 v = s * (detail::in_bin(detail::pol_vec(p1), 0) +
                      sigmas[k] * detail::in_bin(detail::pol_vec(p2), 1));
        push(v, std::string(1, p1) + "t1" + signs[k] + p2 + "t2");
      }
    return out;
  }();
  return targets;
}

/// Settings plus derived per-setting data consumed by the tomography stack:
/// unnormalized detector kets and the detector -> catalog-target map
/// (-1 where a detector does not project onto a catalog state).
struct SettingsCatalog {
  std::vector<TomographySetting> settings;
  std::vector<std::array<Vec4, 4>> kets;
  std::vector<std::array<int, 4>> detector_targets;

  int size() const { return int(settings.size()); }
};

/// Recompute kets and the detector-target map for externally supplied
/// settings (e.g. loaded from the catalog file).
inline SettingsCatalog catalog_from_settings(
    std::vector<TomographySetting> settings, double match_tol = 1e-9) {
  SettingsCatalog cat;
  cat.settings = std::move(settings);
  const auto& targets = standard_36_targets();
  for (const auto& s : cat.settings) {
    auto kets = detector_kets(s);
    std::array<int, 4> map = {-1, -1, -1, -1};
    for (int d = 0; d < 4; ++d) {
      if (kets[d].norm() < 1e-12) continue;
      for (const auto& t : targets) {
        if (detail::direction_overlap2(kets[d], Vec4(t.state.amplitudes())) >=
            1.0 - match_tol) {
          map[d] = t.index;
          break;
        }
      }
    }
    cat.kets.push_back(kets);
    cat.detector_targets.push_back(map);
  }
  return cat;
}

namespace detail {

/// Derive, for every catalog target, waveplate angles that point detector B1
/// at the target, searching HWPs over {0,+-22.5,45} deg and QWPs over
/// {0,+-45,90} deg, polarizer open before engaged. The second arm is then
/// chosen to land the remaining detectors on catalog states where possible.
inline std::vector<TomographySetting> derive_36_settings() {
  const auto& targets = standard_36_targets();
  const std::array<double, 4> hwp = {0.0, deg2rad(22.5), deg2rad(-22.5),
                                     deg2rad(45.0)};
  const std::array<double, 4> qwp = {0.0, deg2rad(45.0), deg2rad(-45.0),
                                     deg2rad(90.0)};
  const std::array<std::pair<double, double>, 3> pols = {
      std::pair{1.0, 1.0}, {1.0, 0.0}, {0.0, 1.0}};

  std::vector<TomographySetting> out;
  for (const auto& target : targets) {
    const Vec4 tv = Vec4(target.state.amplitudes());
    const auto found = [&]() -> std::optional<TomographySetting> {
      for (const auto& [th, tvv] : pols)
        for (double a1 : hwp)
          for (double b1 : qwp)
            for (double a2 : hwp)
              for (double b2 : qwp) {
                TomographySetting s;
                s.alpha1 = a1;
                s.beta1 = b1;
                s.alpha2 = a2;
                s.beta2 = b2;
                s.t_h = th;
                s.t_v = tvv;
                s.duration_scale = (th < 1.0 || tvv < 1.0) ? 2.0 : 1.0;
                const auto kets = detector_kets(s);
                if (direction_overlap2(kets[0], tv) >= 1.0 - 1e-9) return s;
              }
      return std::nullopt;
    }();
    if (!found)
      throw ConfigError("derive_36_settings: no setting found for target " +
                        target.name);
    // Pick the second-arm plates that land the most detectors on catalog
    // states; keeps the efficiency-calibration cross references dense.
    int best_matches = -1;
    TomographySetting best = *found;
    for (double a3 : hwp)
      for (double b3 : qwp) {
        TomographySetting s = *found;
        s.alpha3 = a3;
        s.beta3 = b3;
        const auto kets = detector_kets(s);
        int matches = 0;
        for (int d = 1; d < 4; ++d) {
          if (kets[d].norm() < 1e-12) continue;
          for (const auto& t : targets)
            if (direction_overlap2(kets[d], Vec4(t.state.amplitudes())) >=
                1.0 - 1e-9) {
              ++matches;
              break;
            }
        }
        if (matches > best_matches) {
          best_matches = matches;
          best = s;
        }
      }
    out.push_back(best);
  }
  return out;
}

}  // namespace detail

/// The derived 36-setting catalog; computed once and shared read-only.
/// Setting i points detector B1 at target i (verified in tests and again by
/// catalog_from_settings' target map).
inline const SettingsCatalog& settings_for_36() {
  static const SettingsCatalog cat = [] {
    SettingsCatalog c = catalog_from_settings(detail::derive_36_settings());
    for (int i = 0; i < c.size(); ++i)
      if (c.detector_targets[i][0] != i + 1)
        throw ConfigError("settings_for_36: detector B1 of setting " +
                          std::to_string(i + 1) + " missed its target");
    return c;
  }();
  return cat;
}

/// Index pairs (Alice/Charles setting, Bob setting) for the full two-photon
/// tomography: the Cartesian product of the single-side catalog with itself.
inline std::vector<std::pair<int, int>> joint_settings_1296() {
  std::vector<std::pair<int, int>> out;
  out.reserve(36 * 36);
  for (int a = 0; a < 36; ++a)
    for (int b = 0; b < 36; ++b) out.emplace_back(a, b);
  return out;
}

}  // namespace sdt::optics
