#pragma once

/// Overlap and surface-distance scores for binary segmentations, and the
/// statistics used to judge a failure detector.
///
/// Surface distances are measured between surface-voxel centres in mm. The
/// distances from A's surface to B's and from B's surface to A's are pooled
/// into one list; HD95 is its 95th percentile (linear interpolation between
/// order statistics) and ASSD its mean.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "tractseg/core.hpp"
#include "tractseg/error.hpp"

namespace tractseg {

struct SegScores {
  double dsc = 0.0;
  double hd95 = 0.0;  // mm
  double assd = 0.0;  // mm
};

namespace detail {
inline void check_grids(const BinaryMask& a, const BinaryMask& b) {
  if (!a.grid().same_shape(b.grid())) fail(ErrorKind::grid_mismatch, "masks live on different grids");
}
}  // namespace detail

/// 2|A∩B| / (|A|+|B|), and 1 when both masks are empty.
inline double dsc(const BinaryMask& a, const BinaryMask& b) {
  detail::check_grids(a, b);
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t v = 0; v < a.voxels(); ++v) {
    na += a(v);
    nb += b(v);
    inter += a(v) && b(v);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

/// Foreground voxels with at least one background 6-neighbour; the outside of
/// the grid counts as background. Linear indices, ascending.
inline std::vector<std::size_t> surface_voxels(const BinaryMask& m) {
  const Grid3& g = m.grid();
  const Index3 d = g.dims;
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < d[2]; ++k)
    for (std::size_t j = 0; j < d[1]; ++j)
      for (std::size_t i = 0; i < d[0]; ++i) {
        const std::size_t v = i + d[0] * (j + d[1] * k);
        if (!m(v)) continue;
        const bool surface = i == 0 || j == 0 || k == 0 || i + 1 == d[0] || j + 1 == d[1] ||
                             k + 1 == d[2] || !m(v - 1) || !m(v + 1) || !m(v - d[0]) ||
                             !m(v + d[0]) || !m(v - d[0] * d[1]) || !m(v + d[0] * d[1]);
        if (surface) out.push_back(v);
      }
  if (out.empty()) fail(ErrorKind::empty_input, "empty mask has no surface");
  return out;
}

namespace detail {

// Exact 1-D squared distance transform (lower envelope of parabolas) with
// sample spacing `h`. Infinite f entries are not sites.
inline void edt_line(std::span<const double> f, double h, std::span<double> d,
                     std::vector<std::size_t>& v, std::vector<double>& z) {
  const std::size_t n = f.size();
  const double w = h * h;
  v.resize(n);
  z.resize(n + 1);
  std::ptrdiff_t k = -1;
  const auto meet = [&](std::size_t a, std::size_t b) {
    const double fa = f[a] + w * static_cast<double>(a) * static_cast<double>(a);
    const double fb = f[b] + w * static_cast<double>(b) * static_cast<double>(b);
    return (fb - fa) / (2.0 * w * (static_cast<double>(b) - static_cast<double>(a)));
  };
  for (std::size_t q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    double s = -std::numeric_limits<double>::infinity();
    while (k >= 0) {
      s = meet(v[static_cast<std::size_t>(k)], q);
      if (s <= z[static_cast<std::size_t>(k)])
        --k;
      else
        break;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = k == 0 ? -std::numeric_limits<double>::infinity() : s;
    z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), std::numeric_limits<double>::infinity());
    return;
  }
  std::size_t j = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[j + 1] < static_cast<double>(q)) ++j;
    const double dq = static_cast<double>(q) - static_cast<double>(v[j]);
    d[q] = w * dq * dq + f[v[j]];
  }
}

}  // namespace detail

/// Squared Euclidean distance (mm^2) from every voxel to the nearest listed site.
inline std::vector<double> squared_distance_transform(const Grid3& g, std::span<const std::size_t> sites) {
  const Index3 d = g.dims;
  std::vector<double> f(g.voxels(), std::numeric_limits<double>::infinity());
  for (auto s : sites) f[s] = 0.0;
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const std::size_t n = d[axis];
    const std::size_t step = axis == 0 ? 1 : axis == 1 ? d[0] : d[0] * d[1];
    std::vector<double> line(n), out(n);
    const std::size_t lines = g.voxels() / n;
    for (std::size_t l = 0; l < lines; ++l) {
      // Enumerate line starts: all voxels whose coordinate along `axis` is 0.
      std::size_t base;
      if (axis == 0) {
        base = l * d[0];
      } else if (axis == 1) {
        base = (l % d[0]) + (l / d[0]) * d[0] * d[1];
      } else {
        base = l;
      }
      for (std::size_t q = 0; q < n; ++q) line[q] = f[base + q * step];
      detail::edt_line(line, g.spacing[axis], out, v, z);
      for (std::size_t q = 0; q < n; ++q) f[base + q * step] = out[q];
    }
  }
  return f;
}

/// Pooled surface distances (mm): A's surface to B's, then B's to A's.
inline std::vector<double> pooled_surface_distances(const BinaryMask& a, const BinaryMask& b) {
  detail::check_grids(a, b);
  if (a.empty() || b.empty()) fail(ErrorKind::undefined_metric, "surface distance needs two nonempty masks");
  const auto sa = surface_voxels(a);
  const auto sb = surface_voxels(b);
  const auto da = squared_distance_transform(a.grid(), sa);
  const auto db = squared_distance_transform(b.grid(), sb);
  std::vector<double> out;
  out.reserve(sa.size() + sb.size());
  for (auto v : sa) out.push_back(std::sqrt(db[v]));
  for (auto v : sb) out.push_back(std::sqrt(da[v]));
  return out;
}

/// q-th percentile (q in [0,100]) with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) fail(ErrorKind::empty_input, "percentile of an empty list");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double t = pos - static_cast<double>(lo);
  return values[lo] + t * (values[hi] - values[lo]);
}

inline double hd95(const BinaryMask& a, const BinaryMask& b) {
  return percentile(pooled_surface_distances(a, b), 95.0);
}

inline double assd(const BinaryMask& a, const BinaryMask& b) {
  const auto d = pooled_surface_distances(a, b);
  return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
}

/// All three scores. Surface metrics are NaN when either mask is empty.
inline SegScores seg_scores(const BinaryMask& pred, const BinaryMask& truth) {
  SegScores s;
  s.dsc = dsc(pred, truth);
  if (pred.empty() || truth.empty()) {
    s.hd95 = s.assd = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  const auto d = pooled_surface_distances(pred, truth);
  s.hd95 = percentile(d, 95.0);
  s.assd = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  return s;
}

// Failure-detection statistics -------------------------------------------------

struct DetectionStats {
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  double balanced_accuracy() const { return 0.5 * (sensitivity + specificity); }
};

inline constexpr double kDefaultDscCut = 0.70;
inline constexpr double kDefaultTau = 0.30;

/// Positive = inaccurate segmentation (dsc <= dsc_cut); predicted positive =
/// u > tau. A rate whose denominator is zero is reported as 1.
inline DetectionStats detection_stats(std::span<const double> u, std::span<const double> dsc_values,
                                      double tau = kDefaultTau, double dsc_cut = kDefaultDscCut) {
  if (u.size() != dsc_values.size()) fail(ErrorKind::length_mismatch, "u and DSC lists differ in length");
  if (u.empty()) fail(ErrorKind::empty_input, "no detection samples");
  DetectionStats s;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const bool positive = dsc_values[i] <= dsc_cut;
    const bool flagged = u[i] > tau;
    if (positive && flagged) ++s.tp;
    else if (positive) ++s.fn;
    else if (flagged) ++s.fp;
    else ++s.tn;
  }
  const auto rate = [](std::size_t num, std::size_t den) {
    return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  s.sensitivity = rate(s.tp, s.tp + s.fn);
  s.specificity = rate(s.tn, s.tn + s.fp);
  s.accuracy = rate(s.tp + s.tn, u.size());
  return s;
}

struct Calibration {
  double tau = kDefaultTau;
  DetectionStats stats;
};

/// Candidate thresholds: one below the smallest score, midpoints between
/// consecutive distinct finite scores, and the largest finite score. Returns
/// the first (smallest) candidate maximizing balanced accuracy.
inline std::vector<double> threshold_sweep_grid(std::span<const double> u) {
  std::vector<double> finite;
  for (double x : u)
    if (std::isfinite(x)) finite.push_back(x);
  std::sort(finite.begin(), finite.end());
  finite.erase(std::unique(finite.begin(), finite.end()), finite.end());
  if (finite.empty()) return {0.0};
  std::vector<double> grid{finite.front() - 1.0};
  for (std::size_t i = 0; i + 1 < finite.size(); ++i) grid.push_back(0.5 * (finite[i] + finite[i + 1]));
  grid.push_back(finite.back());
  return grid;
}

inline Calibration calibrate_threshold(std::span<const double> u, std::span<const double> dsc_values,
                                       double dsc_cut = kDefaultDscCut) {
  Calibration best;
  double best_ba = -1.0;
  for (double tau : threshold_sweep_grid(u)) {
    const auto s = detection_stats(u, dsc_values, tau, dsc_cut);
    if (s.balanced_accuracy() > best_ba) {
      best_ba = s.balanced_accuracy();
      best = {tau, s};
    }
  }
  return best;
}

/// Area under the ROC curve of `score` for detecting inaccurate segmentations
/// (dsc <= dsc_cut); ties count half.
inline double roc_auc(std::span<const double> score, std::span<const double> dsc_values,
                      double dsc_cut = kDefaultDscCut) {
  if (score.size() != dsc_values.size()) fail(ErrorKind::length_mismatch, "score and DSC lists differ");
  double wins = 0.0;
  std::size_t np = 0, nn = 0;
  for (std::size_t i = 0; i < score.size(); ++i) {
    if (dsc_values[i] > dsc_cut) {
      ++nn;
      continue;
    }
    ++np;
    for (std::size_t j = 0; j < score.size(); ++j) {
      if (dsc_values[j] <= dsc_cut) continue;
      if (score[i] > score[j]) wins += 1.0;
      else if (score[i] == score[j]) wins += 0.5;
    }
  }
  if (np == 0 || nn == 0) fail(ErrorKind::undefined_metric, "ROC-AUC needs both classes");
  return wins / (static_cast<double>(np) * static_cast<double>(nn));
}

namespace detail {
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
    i = j + 1;
  }
  return r;
}
}  // namespace detail

/// Spearman rank correlation (Pearson correlation of average ranks).
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) fail(ErrorKind::length_mismatch, "spearman inputs differ in length");
  if (x.size() < 3) fail(ErrorKind::domain, "spearman needs at least three pairs");
  const auto rx = detail::average_ranks(x);
  const auto ry = detail::average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) fail(ErrorKind::undefined_metric, "spearman of a constant input");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace tractseg
