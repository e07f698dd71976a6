#pragma once

/// Synthetic diffusion-weighted phantoms with known tract labels.
///
/// Each voxel carries one diffusion tensor; the signal for gradient (b, g) is
/// S0 exp(-b g^T D g) plus optional Gaussian noise. Voxels covered by several
/// tracts get the average of their tensors, which keeps the per-voxel signal
/// monoexponential.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "tractseg/core.hpp"
#include "tractseg/error.hpp"
#include "tractseg/parallel.hpp"
#include "tractseg/qspace.hpp"
#include "tractseg/rng.hpp"

namespace tractseg {

/// Symmetric 3x3 tensor in mm^2/s.
struct DiffusionTensor {
  std::array<std::array<double, 3>, 3> m{};

  static DiffusionTensor isotropic(double d) {
    DiffusionTensor t;
    for (int i = 0; i < 3; ++i) t.m[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = d;
    return t;
  }

  /// Tensor with eigenvalues (l1, l2, l3) and principal axis `axis`.
  static DiffusionTensor from_axis(const Vec3& axis, const Vec3& eigenvalues) {
    const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    if (!(n > 0.0)) fail(ErrorKind::domain, "tensor axis must be nonzero");
    const Vec3 e1{axis[0] / n, axis[1] / n, axis[2] / n};
    const Vec3 ref = std::abs(e1[2]) < 0.9 ? Vec3{0.0, 0.0, 1.0} : Vec3{1.0, 0.0, 0.0};
    Vec3 e2{e1[1] * ref[2] - e1[2] * ref[1], e1[2] * ref[0] - e1[0] * ref[2],
            e1[0] * ref[1] - e1[1] * ref[0]};
    const double n2 = std::sqrt(e2[0] * e2[0] + e2[1] * e2[1] + e2[2] * e2[2]);
    for (auto& x : e2) x /= n2;
    const Vec3 e3{e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2],
                  e1[0] * e2[1] - e1[1] * e2[0]};
    DiffusionTensor t;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        t.m[i][j] = eigenvalues[0] * e1[i] * e1[j] + eigenvalues[1] * e2[i] * e2[j] +
                    eigenvalues[2] * e3[i] * e3[j];
    return t;
  }

  double quadratic(const Vec3& g) const {
    double q = 0.0;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) q += g[i] * m[i][j] * g[j];
    return q;
  }
};

/// Stejskal-Tanner monoexponential signal.
inline double tensor_signal(const DiffusionTensor& d, double b, const Vec3& g, double s0) {
  if (b < 0.0) fail(ErrorKind::domain, "negative b-value");
  return s0 * std::exp(-b * d.quadratic(g));
}

inline constexpr Vec3 kTractEigenvalues{1.7e-3, 0.3e-3, 0.3e-3};
inline constexpr double kBackgroundDiffusivity = 0.8e-3;
inline constexpr double kCsfDiffusivity = 3.0e-3;

/// Capped cylinder between two points (voxel coordinates).
struct StraightTube {
  Vec3 start{};
  Vec3 end{};
  double radius = 1.0;
};

/// Tube following a circular arc in the plane normal to axis `normal_axis`.
/// Angles in radians, measured in that plane from the first in-plane axis.
struct ArcTube {
  Vec3 center{};
  double arc_radius = 1.0;
  double tube_radius = 1.0;
  int normal_axis = 2;
  double angle_begin = 0.0;
  double angle_end = 1.0;
};

using TubeShape = std::variant<StraightTube, ArcTube>;

struct TractSpec {
  int label = 1;
  std::string name;
  TubeShape shape;
  Vec3 eigenvalues = kTractEigenvalues;
};

struct PhantomSpec {
  Grid3 grid{{64, 64, 64}};
  std::vector<TractSpec> tracts;
  double background_diffusivity = kBackgroundDiffusivity;
  double csf_diffusivity = kCsfDiffusivity;
  std::size_t border_width = 2;  // CSF-like shell at the grid boundary, in voxels
  double s0 = 1000.0;
  double noise_sigma = 0.0;  // fraction of S0
  std::uint64_t seed = 0;
};

struct PhantomOutput {
  Volume dwi;                      // one channel per gradient-table entry
  Volume b0;                       // mean of the b0 channels
  std::vector<BinaryMask> labels;  // one per tract, may overlap
};

/// Two straight tubes crossing at the grid centre, along x and along y.
inline PhantomSpec crossing_tubes_spec(std::size_t size = 64, double noise_sigma = 0.0,
                                       std::uint64_t seed = 0) {
  PhantomSpec s;
  s.grid = Grid3({size, size, size});
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  const double lo = static_cast<double>(size) * 0.15;
  const double hi = static_cast<double>(size) - 1.0 - lo;
  const double r = static_cast<double>(size) * 0.11;
  s.tracts.push_back({1, "tube_x", StraightTube{{lo, c, c}, {hi, c, c}, r}, kTractEigenvalues});
  s.tracts.push_back({2, "tube_y", StraightTube{{c, lo, c}, {c, hi, c}, r}, kTractEigenvalues});
  s.noise_sigma = noise_sigma;
  s.seed = seed;
  return s;
}

namespace detail {

// Returns the fibre direction at p if p lies inside the shape.
inline std::optional<Vec3> tube_axis_at(const StraightTube& t, const Vec3& p) {
  const Vec3 d{t.end[0] - t.start[0], t.end[1] - t.start[1], t.end[2] - t.start[2]};
  const double len2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
  double s = 0.0;
  if (len2 > 0.0)
    s = ((p[0] - t.start[0]) * d[0] + (p[1] - t.start[1]) * d[1] + (p[2] - t.start[2]) * d[2]) / len2;
  if (s < 0.0 || s > 1.0) return std::nullopt;
  double dist2 = 0.0;
  for (std::size_t a = 0; a < 3; ++a) {
    const double q = t.start[a] + s * d[a] - p[a];
    dist2 += q * q;
  }
  if (dist2 > t.radius * t.radius) return std::nullopt;
  return d;
}

inline std::optional<Vec3> tube_axis_at(const ArcTube& t, const Vec3& p) {
  const auto n = static_cast<std::size_t>(t.normal_axis);
  const std::size_t u = (n + 1) % 3, v = (n + 2) % 3;
  const double du = p[u] - t.center[u], dv = p[v] - t.center[v], dn = p[n] - t.center[n];
  const double rho = std::sqrt(du * du + dv * dv);
  if (rho == 0.0) return std::nullopt;
  double ang = std::atan2(dv, du);
  const double two_pi = 2.0 * std::numbers::pi;
  while (ang < t.angle_begin) ang += two_pi;
  while (ang >= t.angle_begin + two_pi) ang -= two_pi;
  if (ang > t.angle_end) return std::nullopt;
  const double radial = rho - t.arc_radius;
  if (radial * radial + dn * dn > t.tube_radius * t.tube_radius) return std::nullopt;
  Vec3 tangent{};
  tangent[u] = -dv / rho;
  tangent[v] = du / rho;
  return tangent;
}

inline std::optional<Vec3> axis_at(const TubeShape& s, const Vec3& p) {
  return std::visit([&](const auto& shape) { return tube_axis_at(shape, p); }, s);
}

inline void check_within(const Vec3& p, double r, const Grid3& g, const std::string& name) {
  for (std::size_t a = 0; a < 3; ++a)
    if (p[a] - r < -0.5 || p[a] + r > static_cast<double>(g.dims[a]) - 0.5)
      fail(ErrorKind::domain, "tract '" + name + "' extends outside the grid");
}

}  // namespace detail

inline void validate(const PhantomSpec& spec) {
  std::set<int> labels;
  for (const auto& t : spec.tracts) {
    if (!labels.insert(t.label).second) fail(ErrorKind::config, "duplicate tract label");
    for (double l : t.eigenvalues)
      if (l < 0.0) fail(ErrorKind::domain, "tensor eigenvalues must be >= 0");
    if (const auto* s = std::get_if<StraightTube>(&t.shape)) {
      if (!(s->radius > 0.0)) fail(ErrorKind::domain, "tube radius must be positive");
      detail::check_within(s->start, s->radius, spec.grid, t.name);
      detail::check_within(s->end, s->radius, spec.grid, t.name);
    } else {
      const auto& a = std::get<ArcTube>(t.shape);
      if (a.normal_axis < 0 || a.normal_axis > 2) fail(ErrorKind::domain, "arc normal axis must be 0..2");
      if (!(a.tube_radius > 0.0 && a.arc_radius > 0.0)) fail(ErrorKind::domain, "arc radii must be positive");
      const auto n = static_cast<std::size_t>(a.normal_axis);
      Vec3 extent{a.arc_radius + a.tube_radius, a.arc_radius + a.tube_radius,
                  a.arc_radius + a.tube_radius};
      extent[n] = a.tube_radius;
      for (std::size_t ax = 0; ax < 3; ++ax)
        if (a.center[ax] - extent[ax] < -0.5 ||
            a.center[ax] + extent[ax] > static_cast<double>(spec.grid.dims[ax]) - 0.5)
          fail(ErrorKind::domain, "tract '" + t.name + "' extends outside the grid");
    }
  }
  if (spec.s0 <= 0.0) fail(ErrorKind::domain, "S0 must be positive");
  if (spec.noise_sigma < 0.0) fail(ErrorKind::domain, "noise sigma must be >= 0");
}

/// Per-voxel tensors and labels, without signal synthesis.
struct PhantomAnatomy {
  std::vector<DiffusionTensor> tensors;
  std::vector<BinaryMask> labels;
};

inline PhantomAnatomy phantom_anatomy(const PhantomSpec& spec) {
  validate(spec);
  const Grid3& g = spec.grid;
  PhantomAnatomy a;
  a.tensors.resize(g.voxels());
  for (std::size_t t = 0; t < spec.tracts.size(); ++t) a.labels.emplace_back(g);
  const auto bg = DiffusionTensor::isotropic(spec.background_diffusivity);
  const auto csf = DiffusionTensor::isotropic(spec.csf_diffusivity);
  const std::size_t bw = spec.border_width;
  for (std::size_t v = 0; v < g.voxels(); ++v) {
    const auto [i, j, k] = voxel_coords(g, v);
    const Vec3 p{static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)};
    DiffusionTensor sum;
    int covering = 0;
    for (std::size_t t = 0; t < spec.tracts.size(); ++t) {
      if (auto axis = detail::axis_at(spec.tracts[t].shape, p)) {
        a.labels[t].set(v, true);
        const auto d = DiffusionTensor::from_axis(*axis, spec.tracts[t].eigenvalues);
        for (std::size_t r = 0; r < 3; ++r)
          for (std::size_t c = 0; c < 3; ++c) sum.m[r][c] += d.m[r][c];
        ++covering;
      }
    }
    if (covering > 0) {
      for (auto& row : sum.m)
        for (auto& x : row) x /= covering;
      a.tensors[v] = sum;
    } else {
      const bool border = i < bw || j < bw || k < bw || i + bw >= g.dims[0] ||
                          j + bw >= g.dims[1] || k + bw >= g.dims[2];
      a.tensors[v] = border ? csf : bg;
    }
  }
  return a;
}

inline PhantomOutput simulate(const PhantomSpec& spec, const GradientTable& table, Exec exec = {}) {
  if (table.empty()) fail(ErrorKind::empty_input, "empty gradient table");
  const auto b0s = table.b0_indices();
  if (b0s.empty()) fail(ErrorKind::config, "gradient table needs at least one b0 entry");
  auto anatomy = phantom_anatomy(spec);
  const Grid3& g = spec.grid;
  const std::size_t nvox = g.voxels();
  PhantomOutput out{Volume(g, table.size()), Volume(g, 1), std::move(anatomy.labels)};
  const double sigma = spec.noise_sigma * spec.s0;
  parallel_for(0, nvox, exec, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t v = lo; v < hi; ++v) {
      double b0_sum = 0.0;
      for (std::size_t c = 0; c < table.size(); ++c) {
        const auto& e = table.entries[c];
        double s = e.is_b0 ? spec.s0 : tensor_signal(anatomy.tensors[v], e.bval, e.dir, spec.s0);
        if (sigma > 0.0) s += sigma * counter_normal(spec.seed, v + c * nvox);
        out.dwi(v, c) = static_cast<float>(s);
        if (e.is_b0) b0_sum += out.dwi(v, c);
      }
      out.b0(v) = static_cast<float>(b0_sum / static_cast<double>(b0s.size()));
    }
  });
  return out;
}

// JSON ----------------------------------------------------------------------

namespace detail {

inline Vec3 vec3_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) fail(ErrorKind::config, "expected a 3-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace detail

/// Schema:
/// {
///   "dims": [64,64,64], "spacing": [1,1,1], "origin": [0,0,0],
///   "s0": 1000, "noise_sigma": 0.05, "seed": 1, "border_width": 2,
///   "background_diffusivity": 0.0008, "csf_diffusivity": 0.003,
///   "tracts": [
///     {"label": 1, "name": "tube_x", "eigenvalues": [0.0017,0.0003,0.0003],
///      "shape": {"type": "straight", "start": [..], "end": [..], "radius": 7}},
///     {"label": 2, "name": "arc", "shape": {"type": "arc", "center": [..],
///      "arc_radius": 20, "tube_radius": 5, "normal_axis": 2,
///      "angle_begin": 0, "angle_end": 1.57}}
///   ]
/// }
/// Missing "tracts" yields the default crossing-tube layout for the grid size.
inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  try {
    PhantomSpec s;
    Index3 dims{64, 64, 64};
    if (j.contains("dims")) {
      const auto d = detail::vec3_from_json(j["dims"]);
      for (std::size_t a = 0; a < 3; ++a) {
        if (d[a] < 1.0) fail(ErrorKind::config, "dims must be >= 1");
        dims[a] = static_cast<std::size_t>(d[a]);
      }
    }
    const Vec3 spacing = j.contains("spacing") ? detail::vec3_from_json(j["spacing"]) : Vec3{1, 1, 1};
    const Vec3 origin = j.contains("origin") ? detail::vec3_from_json(j["origin"]) : Vec3{0, 0, 0};
    if (!j.contains("tracts")) {
      if (dims[0] != dims[1] || dims[1] != dims[2])
        fail(ErrorKind::config, "default tract layout needs a cubic grid");
      s = crossing_tubes_spec(dims[0]);
    }
    s.grid = Grid3(dims, spacing, origin);
    s.s0 = j.value("s0", s.s0);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.seed = j.value("seed", s.seed);
    s.border_width = j.value("border_width", s.border_width);
    s.background_diffusivity = j.value("background_diffusivity", s.background_diffusivity);
    s.csf_diffusivity = j.value("csf_diffusivity", s.csf_diffusivity);
    if (j.contains("tracts")) {
      for (const auto& t : j["tracts"]) {
        TractSpec tr;
        tr.label = t.at("label").get<int>();
        tr.name = t.value("name", "tract_" + std::to_string(tr.label));
        if (t.contains("eigenvalues")) tr.eigenvalues = detail::vec3_from_json(t["eigenvalues"]);
        const auto& sh = t.at("shape");
        const auto type = sh.at("type").get<std::string>();
        if (type == "straight") {
          tr.shape = StraightTube{detail::vec3_from_json(sh.at("start")),
                                  detail::vec3_from_json(sh.at("end")),
                                  sh.at("radius").get<double>()};
        } else if (type == "arc") {
          tr.shape = ArcTube{detail::vec3_from_json(sh.at("center")),
                             sh.at("arc_radius").get<double>(),
                             sh.at("tube_radius").get<double>(),
                             sh.value("normal_axis", 2),
                             sh.value("angle_begin", 0.0),
                             sh.value("angle_end", std::numbers::pi / 2)};
        } else {
          fail(ErrorKind::config, "unknown shape type '" + type + "'");
        }
        s.tracts.push_back(std::move(tr));
      }
    }
    validate(s);
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("phantom spec: ") + e.what());
  }
}

}  // namespace tractseg
