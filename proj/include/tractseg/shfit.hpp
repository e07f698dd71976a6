#pragma once

/// Real, symmetric, even-order spherical harmonics and the per-voxel
/// least-squares projection of b0-normalized signals onto them.
///
/// Basis (no Condon-Shortley phase), with K_l^m = sqrt((2l+1)/(4pi) (l-m)!/(l+m)!):
///   m = 0 : K_l^0 P_l^0(cos theta)
///   m < 0 : sqrt(2) K_l^|m| P_l^|m|(cos theta) sin(|m| phi)
///   m > 0 : sqrt(2) K_l^m  P_l^m(cos theta)  cos(m phi)
/// Coefficients are ordered by l, then m from -l to l. For l_max = 2 that is
/// (0,0), (2,-2), (2,-1), (2,0), (2,1), (2,2).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tractseg/core.hpp"
#include "tractseg/error.hpp"
#include "tractseg/parallel.hpp"

namespace tractseg {

struct ShBasisSpec {
  int l_max = 2;

  std::size_t coefficient_count() const {
    return static_cast<std::size_t>((l_max + 1) * (l_max + 2) / 2);
  }
  void validate() const {
    if (l_max < 0 || l_max % 2 != 0) fail(ErrorKind::domain, "l_max must be even and >= 0");
  }
};

/// Channel c holds the c-th coefficient in the ordering above.
using ShCoeffMap = Volume;

inline std::vector<double> sh_basis_row(const Vec3& dir, ShBasisSpec spec = {}) {
  spec.validate();
  const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
  if (std::abs(norm - 1.0) > 1e-4) fail(ErrorKind::domain, "direction is not unit length");
  const double z = std::clamp(dir[2] / norm, -1.0, 1.0);
  const double phi = std::atan2(dir[1], dir[0]);
  std::vector<double> row;
  row.reserve(spec.coefficient_count());
  for (int l = 0; l <= spec.l_max; l += 2) {
    for (int m = -l; m <= l; ++m) {
      const int am = std::abs(m);
      double ratio = 1.0;  // (l-|m|)! / (l+|m|)!
      for (int f = l - am + 1; f <= l + am; ++f) ratio /= f;
      const double k = std::sqrt((2.0 * l + 1.0) / (4.0 * std::numbers::pi) * ratio);
      const double p = std::assoc_legendre(static_cast<unsigned>(l), static_cast<unsigned>(am), z);
      if (m == 0)
        row.push_back(k * p);
      else if (m < 0)
        row.push_back(std::numbers::sqrt2 * k * p * std::sin(am * phi));
      else
        row.push_back(std::numbers::sqrt2 * k * p * std::cos(am * phi));
    }
  }
  return row;
}

inline Eigen::MatrixXd sh_design_matrix(std::span<const Vec3> dirs, ShBasisSpec spec = {}) {
  Eigen::MatrixXd b(static_cast<Eigen::Index>(dirs.size()),
                    static_cast<Eigen::Index>(spec.coefficient_count()));
  for (std::size_t r = 0; r < dirs.size(); ++r) {
    const auto row = sh_basis_row(dirs[r], spec);
    for (std::size_t c = 0; c < row.size(); ++c)
      b(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
  }
  return b;
}

struct NormalizedDwi {
  Volume signal;
  BinaryMask background;  // voxels whose b0 fell below eps
};

/// Default eps: 1e-3 of the 99th-percentile b0 intensity.
inline double default_b0_eps(const Volume& b0) {
  std::vector<float> v(b0.channel(0).begin(), b0.channel(0).end());
  if (v.empty()) return 1e-3;
  const std::size_t at = static_cast<std::size_t>(0.99 * static_cast<double>(v.size() - 1));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(at), v.end());
  const double p99 = v[at];
  return p99 > 0.0 ? 1e-3 * p99 : 1e-3;
}

inline NormalizedDwi b0_normalize(const Volume& dwi, const Volume& b0, double eps,
                                  double clamp_max = 2.0) {
  if (!dwi.grid().same_shape(b0.grid()) || b0.channels() != 1)
    fail(ErrorKind::grid_mismatch, "dwi and b0 grids differ");
  NormalizedDwi out{Volume(dwi.grid(), dwi.channels()), BinaryMask(dwi.grid())};
  for (std::size_t v = 0; v < dwi.voxels(); ++v) {
    const double base = b0(v);
    if (base < eps) {
      out.background.set(v, true);
      continue;  // stays zero
    }
    for (std::size_t c = 0; c < dwi.channels(); ++c) {
      const double s = static_cast<double>(dwi(v, c)) / std::max(base, eps);
      out.signal(v, c) = static_cast<float>(std::clamp(s, 0.0, clamp_max));
    }
  }
  return out;
}

/// Least-squares projector for one measurement subset. The design matrix is
/// factorized once; fitting a volume is then one small mat-vec per voxel.
///
/// Directions are put into a canonical (lexicographic) order before the
/// factorization, so supplying the same subset in any order gives bit-identical
/// coefficients.
class ShFitter {
 public:
  static constexpr double kTruncation = 1e-8;

  ShFitter(std::span<const Vec3> dirs, ShBasisSpec spec = {}) : spec_(spec) {
    spec_.validate();
    if (dirs.empty()) fail(ErrorKind::empty_input, "no directions to fit");
    order_.resize(dirs.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::stable_sort(order_.begin(), order_.end(),
                     [&](std::size_t a, std::size_t b) { return dirs[a] < dirs[b]; });
    std::vector<Vec3> sorted;
    for (auto i : order_) sorted.push_back(dirs[i]);
    const Eigen::MatrixXd b = sh_design_matrix(sorted, spec_);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(sv.size());
    const double cutoff = kTruncation * (sv.size() ? sv(0) : 0.0);
    for (Eigen::Index i = 0; i < sv.size(); ++i)
      if (sv(i) > cutoff) inv(i) = 1.0 / sv(i);
    pinv_ = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
  }

  std::size_t measurements() const { return order_.size(); }
  std::size_t coefficients() const { return spec_.coefficient_count(); }

  /// Pseudo-inverse in the caller's measurement order (coefficients x measurements).
  Eigen::MatrixXd pseudo_inverse() const {
    Eigen::MatrixXd p(pinv_.rows(), pinv_.cols());
    for (std::size_t s = 0; s < order_.size(); ++s)
      p.col(static_cast<Eigen::Index>(order_[s])) = pinv_.col(static_cast<Eigen::Index>(s));
    return p;
  }

  /// Coefficients for one voxel. `signal` is in the caller's measurement order.
  void fit_voxel(std::span<const double> signal, std::span<double> coeffs) const {
    for (Eigen::Index r = 0; r < pinv_.rows(); ++r) {
      double acc = 0.0;
      for (std::size_t s = 0; s < order_.size(); ++s)
        acc += pinv_(r, static_cast<Eigen::Index>(s)) * signal[order_[s]];
      coeffs[static_cast<std::size_t>(r)] = acc;
    }
  }

  ShCoeffMap fit(const Volume& normalized, Exec exec = {}) const {
    if (normalized.channels() != order_.size())
      fail(ErrorKind::shape_mismatch, "channel count differs from direction count");
    ShCoeffMap out(normalized.grid(), coefficients());
    parallel_for(0, normalized.voxels(), exec, [&](std::size_t lo, std::size_t hi) {
      std::vector<double> s(order_.size()), c(coefficients());
      for (std::size_t v = lo; v < hi; ++v) {
        for (std::size_t m = 0; m < s.size(); ++m) s[m] = normalized(v, m);
        fit_voxel(s, c);
        for (std::size_t r = 0; r < c.size(); ++r) out(v, r) = static_cast<float>(c[r]);
      }
    });
    return out;
  }

 private:
  ShBasisSpec spec_;
  std::vector<std::size_t> order_;
  Eigen::MatrixXd pinv_;
};

inline ShCoeffMap fit_sh(const Volume& normalized, std::span<const Vec3> dirs,
                         ShBasisSpec spec = {}, Exec exec = {}) {
  return ShFitter(dirs, spec).fit(normalized, exec);
}

/// Evaluates B c per voxel for the given directions.
inline Volume sh_reconstruct(const ShCoeffMap& coeffs, std::span<const Vec3> dirs,
                             ShBasisSpec spec = {}) {
  if (coeffs.channels() != spec.coefficient_count())
    fail(ErrorKind::shape_mismatch, "coefficient channels do not match basis");
  const Eigen::MatrixXd b = sh_design_matrix(dirs, spec);
  Volume out(coeffs.grid(), dirs.size());
  for (std::size_t v = 0; v < coeffs.voxels(); ++v)
    for (Eigen::Index m = 0; m < b.rows(); ++m) {
      double acc = 0.0;
      for (Eigen::Index c = 0; c < b.cols(); ++c)
        acc += b(m, c) * coeffs(v, static_cast<std::size_t>(c));
      out(v, static_cast<std::size_t>(m)) = static_cast<float>(acc);
    }
  return out;
}

}  // namespace tractseg
