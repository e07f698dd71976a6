#pragma once

/// Gradient tables and selection of well-spread measurement subsets.
///
/// Spread is scored by the antipodally symmetrized electrostatic energy
///   E = sum_{i<j} 1/|g_i - g_j|^2 + 1/|g_i + g_j|^2
/// and subsets are improved by greedy pairwise exchange from a random start.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tractseg/core.hpp"
#include "tractseg/error.hpp"
#include "tractseg/rng.hpp"
#include "tractseg/shfit.hpp"

namespace tractseg {

inline constexpr double kDefaultB0Tol = 50.0;     // s/mm^2
inline constexpr double kDefaultShellTol = 100.0; // s/mm^2

struct GradientEntry {
  Vec3 dir{0.0, 0.0, 0.0};
  double bval = 0.0;
  bool is_b0 = true;
};

struct GradientTable {
  std::vector<GradientEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  std::vector<std::size_t> b0_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].is_b0) out.push_back(i);
    return out;
  }

  /// Non-b0 entries with |b - b_target| <= b_tol, in table order.
  std::vector<std::size_t> shell(double b_target, double b_tol = kDefaultShellTol) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (!entries[i].is_b0 && std::abs(entries[i].bval - b_target) <= b_tol) out.push_back(i);
    return out;
  }

  std::vector<Vec3> directions(std::span<const std::size_t> which) const {
    std::vector<Vec3> out;
    out.reserve(which.size());
    for (auto i : which) out.push_back(entries.at(i).dir);
    return out;
  }
};

/// Builds a table from raw b-values and directions. Entries with |b| <= b0_tol
/// are flagged b0 and keep their direction as given; all others are
/// renormalized to unit length (to within 1e-12).
inline GradientTable make_gradient_table(std::span<const double> bvals,
                                         std::span<const Vec3> dirs,
                                         double b0_tol = kDefaultB0Tol) {
  if (bvals.size() != dirs.size())
    fail(ErrorKind::length_mismatch, "bvals and bvecs have different lengths");
  GradientTable t;
  for (std::size_t i = 0; i < bvals.size(); ++i) {
    GradientEntry e;
    e.bval = bvals[i];
    if (!(e.bval >= 0.0)) fail(ErrorKind::domain, "negative b-value");
    e.is_b0 = std::abs(e.bval) <= b0_tol;
    e.dir = dirs[i];
    if (!e.is_b0) {
      const double n = std::sqrt(e.dir[0] * e.dir[0] + e.dir[1] * e.dir[1] + e.dir[2] * e.dir[2]);
      if (!(n > 0.0)) fail(ErrorKind::domain, "zero gradient direction with b > 0");
      // Already-unit vectors are kept bit-for-bit so that text round trips are stable.
      if (std::abs(n - 1.0) > 1e-12)
        for (auto& x : e.dir) x /= n;
    }
    t.entries.push_back(e);
  }
  return t;
}

/// Well-spread half-sphere directions from a Fibonacci lattice (z >= 0).
inline std::vector<Vec3> fibonacci_hemisphere(std::size_t m) {
  std::vector<Vec3> dirs;
  dirs.reserve(m);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < m; ++i) {
    const double z = 1.0 - (static_cast<double>(i) + 0.5) / static_cast<double>(m);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * static_cast<double>(i);
    dirs.push_back({r * std::cos(phi), r * std::sin(phi), z});
  }
  return dirs;
}

namespace detail {

inline double pair_energy(const Vec3& a, const Vec3& b) {
  double dm = 0.0, dp = 0.0;
  for (int c = 0; c < 3; ++c) {
    dm += (a[c] - b[c]) * (a[c] - b[c]);
    dp += (a[c] + b[c]) * (a[c] + b[c]);
  }
  if (dm < 1e-12 || dp < 1e-12) return std::numeric_limits<double>::infinity();
  return 1.0 / dm + 1.0 / dp;
}

}  // namespace detail

inline double electrostatic_energy(std::span<const Vec3> dirs) {
  if (dirs.size() < 2) fail(ErrorKind::domain, "energy needs at least two directions");
  double e = 0.0;
  for (std::size_t i = 0; i < dirs.size(); ++i)
    for (std::size_t j = i + 1; j < dirs.size(); ++j) {
      const double p = detail::pair_energy(dirs[i], dirs[j]);
      if (std::isinf(p)) fail(ErrorKind::degenerate_pair, "coincident or antipodal directions");
      e += p;
    }
  return e;
}

/// Ratio of extreme singular values of the SH design matrix; +inf when the
/// design is rank deficient.
inline double sh_design_condition(std::span<const Vec3> dirs, int l_max = 2) {
  const ShBasisSpec spec{l_max};
  if (dirs.size() < spec.coefficient_count())
    fail(ErrorKind::insufficient_directions, "fewer directions than SH coefficients");
  const Eigen::MatrixXd b = sh_design_matrix(dirs, spec);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(b);
  const auto& sv = svd.singularValues();
  const double smax = sv(0), smin = sv(sv.size() - 1);
  if (!(smin > 1e-10 * smax)) return std::numeric_limits<double>::infinity();
  return smax / smin;
}

struct SubsetSelection {
  std::vector<std::size_t> indices;  // table indices, ascending
  double energy = 0.0;
  double cond = 1.0;
};

namespace detail {

// Exchange optimizer over a candidate pool with a precomputed pair matrix.
class SubsetSearch {
 public:
  SubsetSearch(const GradientTable& table, std::vector<std::size_t> pool)
      : table_(table), pool_(std::move(pool)), n_(pool_.size()), pair_(n_ * n_, 0.0) {
    for (std::size_t a = 0; a < n_; ++a)
      for (std::size_t b = a + 1; b < n_; ++b) {
        const double e = pair_energy(table.entries[pool_[a]].dir, table.entries[pool_[b]].dir);
        pair_[a * n_ + b] = pair_[b * n_ + a] = e;
      }
  }

  // Partial Fisher-Yates draw of k pool positions.
  std::vector<std::size_t> random_start(std::size_t k, Rng& rng) const {
    std::vector<std::size_t> perm(n_);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(uniform_below(rng, n_ - i));
      std::swap(perm[i], perm[j]);
    }
    perm.resize(k);
    return perm;
  }

  double energy(const std::vector<std::size_t>& chosen) const {
    double e = 0.0;
    for (std::size_t i = 0; i < chosen.size(); ++i)
      for (std::size_t j = i + 1; j < chosen.size(); ++j) e += pair_[chosen[i] * n_ + chosen[j]];
    return e;
  }

  // One sweep over subset positions; each position takes the best improving
  // swap with an outside candidate. Returns true if anything changed.
  bool exchange_pass(std::vector<std::size_t>& chosen) const {
    std::vector<char> inside(n_, 0);
    for (auto c : chosen) inside[c] = 1;
    bool changed = false;
    for (std::size_t p = 0; p < chosen.size(); ++p) {
      const auto contribution = [&](std::size_t cand) {
        double e = 0.0;
        for (std::size_t q = 0; q < chosen.size(); ++q)
          if (q != p) e += pair_[cand * n_ + chosen[q]];
        return e;
      };
      const double current = contribution(chosen[p]);
      double best = current;
      std::size_t best_cand = chosen[p];
      for (std::size_t cand = 0; cand < n_; ++cand) {
        if (inside[cand]) continue;
        const double e = contribution(cand);
        // Relative margin keeps round-off from cycling between equal-energy sets.
        if (e < best - 1e-12 * std::max(1.0, std::abs(best))) {
          best = e;
          best_cand = cand;
        }
      }
      if (best_cand != chosen[p]) {
        inside[chosen[p]] = 0;
        inside[best_cand] = 1;
        chosen[p] = best_cand;
        changed = true;
      }
    }
    return changed;
  }

  void exchange_to_local_optimum(std::vector<std::size_t>& chosen) const {
    while (exchange_pass(chosen)) {
    }
  }

  SubsetSelection finish(const std::vector<std::size_t>& chosen) const {
    SubsetSelection s;
    for (auto c : chosen) s.indices.push_back(pool_[c]);
    std::sort(s.indices.begin(), s.indices.end());
    const auto dirs = table_.directions(s.indices);
    try {
      s.energy = electrostatic_energy(dirs);
    } catch (const Error&) {
      s.energy = std::numeric_limits<double>::infinity();
    }
    s.cond = dirs.size() >= 6 ? sh_design_condition(dirs)
                              : std::numeric_limits<double>::infinity();
    return s;
  }

  const std::vector<std::size_t>& pool() const { return pool_; }

 private:
  const GradientTable& table_;
  std::vector<std::size_t> pool_;
  std::size_t n_;
  std::vector<double> pair_;
};

inline void check_subset_size(std::size_t k) {
  if (k < 6 || k > 12) fail(ErrorKind::domain, "subset size must lie in [6,12]");
}

inline SubsetSelection select_from_pool(const GradientTable& table,
                                        std::vector<std::size_t> pool, std::size_t k,
                                        std::uint64_t seed) {
  if (pool.size() < k)
    fail(ErrorKind::insufficient_directions, "shell has fewer directions than requested");
  SubsetSearch search(table, std::move(pool));
  Rng rng(seed);
  auto chosen = search.random_start(k, rng);
  search.exchange_to_local_optimum(chosen);
  return search.finish(chosen);
}

}  // namespace detail

/// Random start followed by greedy exchange to a local optimum. The returned
/// energy never exceeds that of the random start.
inline SubsetSelection select_subset(const GradientTable& table, std::size_t k, double b_target,
                                     double b_tol, std::uint64_t seed) {
  detail::check_subset_size(k);
  return detail::select_from_pool(table, table.shell(b_target, b_tol), k, seed);
}

/// `count` pairwise-disjoint subsets, each optimized over the directions the
/// previous ones left unused.
inline std::vector<SubsetSelection> disjoint_subsets(const GradientTable& table, std::size_t k,
                                                     std::size_t count, double b_target,
                                                     double b_tol, std::uint64_t seed) {
  detail::check_subset_size(k);
  auto remaining = table.shell(b_target, b_tol);
  if (count == 0) fail(ErrorKind::domain, "subset count must be positive");
  if (remaining.size() < k * count)
    fail(ErrorKind::insufficient_directions, "shell too small for disjoint subsets");
  std::vector<SubsetSelection> out;
  for (std::size_t s = 0; s < count; ++s) {
    const std::uint64_t sub_seed = s == 0 ? seed : mix_seed(seed, s);
    auto sel = detail::select_from_pool(table, remaining, k, sub_seed);
    std::erase_if(remaining, [&](std::size_t i) {
      return std::binary_search(sel.indices.begin(), sel.indices.end(), i);
    });
    out.push_back(std::move(sel));
  }
  return out;
}

/// Training-time draw: size uniform in [k_min, k_max], random start, then a
/// single exchange pass. Advances `rng`.
inline SubsetSelection random_subset(const GradientTable& table, std::size_t k_min,
                                     std::size_t k_max, double b_target, double b_tol,
                                     Rng& rng) {
  if (k_min > k_max) fail(ErrorKind::domain, "empty subset size range");
  detail::check_subset_size(k_min);
  detail::check_subset_size(k_max);
  const std::size_t k = k_min + static_cast<std::size_t>(uniform_below(rng, k_max - k_min + 1));
  auto pool = table.shell(b_target, b_tol);
  if (pool.size() < k)
    fail(ErrorKind::insufficient_directions, "shell has fewer directions than requested");
  detail::SubsetSearch search(table, std::move(pool));
  auto chosen = search.random_start(k, rng);
  search.exchange_pass(chosen);
  return search.finish(chosen);
}

}  // namespace tractseg
