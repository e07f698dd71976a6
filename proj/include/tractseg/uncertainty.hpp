#pragma once

/// Disagreement between test-time predictions measured with an unfolded
/// Earth Mover's Distance, failure flagging, and voxel-std baseline scores.
///
/// A probability map is downsampled (factor 4, cubic), clamped at zero and
/// normalized to unit mass. It is then unfolded into a 1-D chain along a
/// serpentine path, so that consecutive chain entries are 6-neighbours. The
/// EMD of two chains compares their running cumulative sums.

#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tractseg/core.hpp"
#include "tractseg/error.hpp"
#include "tractseg/model.hpp"
#include "tractseg/segmetrics.hpp"

namespace tractseg {

inline constexpr std::size_t kMassDownsample = 4;
inline constexpr double kMassTolerance = 1e-6;

/// How the per-position CDF differences are aggregated.
enum class EmdScorer {
  l1,  // sum |P_t - Q_t|, the exact 1-D Wasserstein-1 distance
  l2,  // sqrt(sum (P_t - Q_t)^2)
};

struct UnfoldedMass {
  std::vector<double> values;
  double total = 0.0;
  Index3 dims{1, 1, 1};
};

/// Downsample, clamp negatives, normalize to unit sum. Throws zero_mass when
/// nothing is left to normalize.
inline Volume prepare_mass(const Volume& prob, std::size_t factor = kMassDownsample) {
  if (prob.channels() != 1) fail(ErrorKind::domain, "prepare_mass takes one channel");
  for (float p : prob.data())
    if (!(p >= 0.0f && p <= 1.0f)) fail(ErrorKind::domain, "probability outside [0,1]");
  Volume v = factor == 1 ? prob : resample_cubic(prob, factor);
  double total = 0.0;
  for (auto& x : v.data()) {
    if (x < 0.0f) x = 0.0f;
    total += x;
  }
  if (!(total > 0.0)) fail(ErrorKind::zero_mass, "probability map has zero mass");
  for (auto& x : v.data()) x = static_cast<float>(x / total);
  return v;
}

/// Serpentine order: x reverses on every successive row, y reverses on every
/// successive slab. Returns the linear voxel index of each chain position.
inline std::vector<std::size_t> serpentine_order(const Index3& d) {
  std::vector<std::size_t> order;
  order.reserve(d[0] * d[1] * d[2]);
  std::size_t row = 0;
  for (std::size_t k = 0; k < d[2]; ++k) {
    for (std::size_t jj = 0; jj < d[1]; ++jj, ++row) {
      const std::size_t j = k % 2 == 0 ? jj : d[1] - 1 - jj;
      for (std::size_t ii = 0; ii < d[0]; ++ii) {
        const std::size_t i = row % 2 == 0 ? ii : d[0] - 1 - ii;
        order.push_back(i + d[0] * (j + d[1] * k));
      }
    }
  }
  return order;
}

inline UnfoldedMass unfold(const Volume& v) {
  if (v.channels() != 1) fail(ErrorKind::domain, "unfold takes one channel");
  UnfoldedMass m;
  m.dims = v.grid().dims;
  const auto order = serpentine_order(m.dims);
  m.values.reserve(order.size());
  for (auto idx : order) {
    m.values.push_back(v(idx));
    m.total += v(idx);
  }
  return m;
}

inline UnfoldedMass unfold_values(std::vector<double> values) {
  UnfoldedMass m;
  m.dims = {values.size(), 1, 1};
  for (double x : values) m.total += x;
  m.values = std::move(values);
  return m;
}

inline double emd_unfolded(const UnfoldedMass& p, const UnfoldedMass& q, EmdScorer scorer = EmdScorer::l1) {
  if (p.values.size() != q.values.size()) fail(ErrorKind::length_mismatch, "unfolded chains differ in length");
  if (std::abs(p.total - q.total) > kMassTolerance) fail(ErrorKind::domain, "unfolded masses differ");
  double cp = 0.0, cq = 0.0, acc = 0.0;
  for (std::size_t t = 0; t < p.values.size(); ++t) {
    cp += p.values[t];
    cq += q.values[t];
    const double diff = cp - cq;
    acc += scorer == EmdScorer::l1 ? std::abs(diff) : diff * diff;
  }
  return scorer == EmdScorer::l1 ? acc : std::sqrt(acc);
}

/// EMD between two single-channel maps. With `prepare` the maps are first
/// downsampled and normalized; otherwise they must already be unit mass.
inline double emd3(const Volume& p, const Volume& q, bool prepare = true,
                   EmdScorer scorer = EmdScorer::l1) {
  if (!p.grid().same_shape(q.grid())) fail(ErrorKind::grid_mismatch, "EMD inputs live on different grids");
  if (!prepare) return emd_unfolded(unfold(p), unfold(q), scorer);
  return emd_unfolded(unfold(prepare_mass(p)), unfold(prepare_mass(q)), scorer);
}

struct TractUncertainty {
  std::size_t tract = 0;
  double u = 0.0;  // +inf marks a zero-mass member
  std::vector<double> member_emd;
  std::size_t n = 0;
  bool flagged = false;
  std::optional<double> ensemble_score;
  std::optional<double> dropout_score;
};

inline bool detect(double u, double tau = kDefaultTau) { return std::isinf(u) || u > tau; }

/// u = (1/n) sum_k EMD(y_k, mean) for one tract channel.
inline TractUncertainty uncertainty_u(const TtaResult& tta, std::size_t channel,
                                      EmdScorer scorer = EmdScorer::l1, double tau = kDefaultTau) {
  if (tta.predictions.empty()) fail(ErrorKind::empty_input, "no TTA members");
  if (channel >= tta.mean.channels()) fail(ErrorKind::index, "tract channel out of range");
  TractUncertainty r;
  r.tract = channel;
  r.n = tta.predictions.size();
  try {
    const auto mean = unfold(prepare_mass(tta.mean.extract_channel(channel)));
    double sum = 0.0;
    for (const auto& y : tta.predictions) {
      const double e = emd_unfolded(unfold(prepare_mass(y.extract_channel(channel))), mean, scorer);
      r.member_emd.push_back(e);
      sum += e;
    }
    r.u = sum / static_cast<double>(tta.predictions.size());
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::zero_mass) throw;
    r.u = std::numeric_limits<double>::infinity();
    r.member_emd.clear();
  }
  r.flagged = detect(r.u, tau);
  return r;
}

/// Mean voxel-wise standard deviation across a prediction family, restricted
/// to the union of the members' 0.5-binarized supports (0 if that union is empty).
inline double voxel_std_score(std::span<const Volume> family, std::size_t channel) {
  if (family.size() < 2) fail(ErrorKind::empty_input, "baseline needs at least two predictions");
  const Volume& first = family.front();
  const double n = static_cast<double>(family.size());
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t v = 0; v < first.voxels(); ++v) {
    bool support = false;
    double mean = 0.0;
    for (const auto& m : family) {
      if (!m.grid().same_shape(first.grid()) || m.channels() != first.channels())
        fail(ErrorKind::shape_mismatch, "baseline members differ in shape");
      const double p = m(v, channel);
      support = support || p >= 0.5;
      mean += p;
    }
    if (!support) continue;
    mean /= n;
    double var = 0.0;
    for (const auto& m : family) {
      const double d = m(v, channel) - mean;
      var += d * d;
    }
    sum += std::sqrt(var / n);
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

struct BaselineScores {
  std::optional<double> ensemble;
  std::optional<double> dropout;
};

inline BaselineScores baseline_scores(std::size_t channel, std::span<const Volume> dropout_preds,
                                      std::span<const Volume> ensemble_preds) {
  if (dropout_preds.empty() && ensemble_preds.empty())
    fail(ErrorKind::empty_input, "no baseline prediction family given");
  BaselineScores s;
  if (!ensemble_preds.empty()) s.ensemble = voxel_std_score(ensemble_preds, channel);
  if (!dropout_preds.empty()) s.dropout = voxel_std_score(dropout_preds, channel);
  return s;
}

/// Monte-Carlo dropout family for a coefficient volume: `passes` stochastic
/// voxel-wise predictions of the reference model.
inline std::vector<Volume> dropout_predictions(const ReferenceModel& model, const ShCoeffMap& coeffs,
                                               std::size_t passes, double rate, std::uint64_t seed,
                                               Exec exec = {}) {
  ReferenceModel m = model;
  m.set_dropout_rate(rate);
  std::vector<Volume> out;
  for (std::size_t p = 0; p < passes; ++p) out.push_back(m.predict_volume(coeffs, exec, mix_seed(seed, p)));
  return out;
}

struct UncertaintyReport {
  std::string scan_id;
  double tau = kDefaultTau;
  EmdScorer scorer = EmdScorer::l1;
  std::vector<TractUncertainty> tracts;
};

inline UncertaintyReport uncertainty_report(const TtaResult& tta, std::string scan_id, double tau,
                                            EmdScorer scorer = EmdScorer::l1) {
  UncertaintyReport r{std::move(scan_id), tau, scorer, {}};
  for (std::size_t c = 0; c < tta.mean.channels(); ++c) r.tracts.push_back(uncertainty_u(tta, c, scorer, tau));
  return r;
}

namespace detail {
inline std::string number_text(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), r.ptr);
}

inline nlohmann::json number_json(double v) {
  if (std::isfinite(v)) return v;
  return number_text(v);
}
}  // namespace detail

inline std::string uncertainty_csv_header() { return "scan_id,tract,u,tau,flagged,ens_score,drp_score\n"; }

inline std::string uncertainty_csv_rows(const UncertaintyReport& r) {
  std::string out;
  for (const auto& t : r.tracts) {
    out += r.scan_id + "," + std::to_string(t.tract) + "," + detail::number_text(t.u) + "," +
           detail::number_text(r.tau) + "," + (t.flagged ? "1" : "0") + "," +
           detail::number_text(t.ensemble_score.value_or(std::nan(""))) + "," +
           detail::number_text(t.dropout_score.value_or(std::nan(""))) + "\n";
  }
  return out;
}

inline nlohmann::json uncertainty_json(const UncertaintyReport& r) {
  nlohmann::json j;
  j["scan_id"] = r.scan_id;
  j["tau"] = r.tau;
  j["scorer"] = r.scorer == EmdScorer::l1 ? "l1" : "l2";
  j["tracts"] = nlohmann::json::array();
  for (const auto& t : r.tracts) {
    nlohmann::json e;
    e["tract"] = t.tract;
    e["u"] = detail::number_json(t.u);
    e["n"] = t.n;
    e["member_emd"] = nlohmann::json::array();
    for (double x : t.member_emd) e["member_emd"].push_back(detail::number_json(x));
    e["flagged"] = t.flagged;
    e["ens_score"] = t.ensemble_score ? detail::number_json(*t.ensemble_score) : nlohmann::json(nullptr);
    e["drp_score"] = t.dropout_score ? detail::number_json(*t.dropout_score) : nlohmann::json(nullptr);
    j["tracts"].push_back(std::move(e));
  }
  return j;
}

}  // namespace tractseg
