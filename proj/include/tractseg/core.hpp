#pragma once

/// Voxel grids, dense volumes and binary masks shared by every stage of the
/// pipeline, plus the downsampling and binarization primitives.
///
/// Storage order is x fastest, then y, then z, with the channel index slowest,
/// which is the NIfTI on-disk order.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tractseg/error.hpp"

namespace tractseg {

using Index3 = std::array<std::size_t, 3>;
using Vec3 = std::array<double, 3>;

struct Grid3 {
  Index3 dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};  // mm per voxel
  Vec3 origin{0.0, 0.0, 0.0};   // mm

  Grid3() = default;
  Grid3(Index3 d, Vec3 s = {1.0, 1.0, 1.0}, Vec3 o = {0.0, 0.0, 0.0})
      : dims(d), spacing(s), origin(o) {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) fail(ErrorKind::domain, "grid dims must be >= 1");
      if (!(spacing[a] > 0.0)) fail(ErrorKind::domain, "grid spacing must be > 0");
    }
  }

  std::size_t voxels() const { return dims[0] * dims[1] * dims[2]; }

  bool same_shape(const Grid3& o) const { return dims == o.dims; }

  friend bool operator==(const Grid3&, const Grid3&) = default;
};

inline std::size_t voxel_index(const Grid3& g, std::size_t i, std::size_t j,
                               std::size_t k) {
  if (i >= g.dims[0] || j >= g.dims[1] || k >= g.dims[2])
    fail(ErrorKind::index, "voxel coordinate out of range");
  return i + g.dims[0] * (j + g.dims[1] * k);
}

inline Index3 voxel_coords(const Grid3& g, std::size_t idx) {
  if (idx >= g.voxels()) fail(ErrorKind::index, "linear index out of range");
  const std::size_t i = idx % g.dims[0];
  const std::size_t rest = idx / g.dims[0];
  return {i, rest % g.dims[1], rest / g.dims[1]};
}

/// Dense multi-channel float volume.
class Volume {
 public:
  Volume() = default;
  Volume(Grid3 grid, std::size_t channels, float fill = 0.0f)
      : grid_(grid), channels_(channels), data_(grid.voxels() * channels, fill) {
    if (channels == 0) fail(ErrorKind::domain, "volume needs at least one channel");
  }
  Volume(Grid3 grid, std::size_t channels, std::vector<float> data)
      : grid_(grid), channels_(channels), data_(std::move(data)) {
    if (channels == 0) fail(ErrorKind::domain, "volume needs at least one channel");
    if (data_.size() != grid_.voxels() * channels_)
      fail(ErrorKind::length_mismatch, "volume data length does not match grid");
  }

  const Grid3& grid() const { return grid_; }
  std::size_t channels() const { return channels_; }
  std::size_t voxels() const { return grid_.voxels(); }
  std::size_t size() const { return data_.size(); }

  float& at(std::size_t i, std::size_t j, std::size_t k, std::size_t c = 0) {
    return data_[voxel_index(grid_, i, j, k) + c * voxels()];
  }
  float at(std::size_t i, std::size_t j, std::size_t k, std::size_t c = 0) const {
    return data_[voxel_index(grid_, i, j, k) + c * voxels()];
  }

  float& operator()(std::size_t voxel, std::size_t c = 0) {
    return data_[voxel + c * voxels()];
  }
  float operator()(std::size_t voxel, std::size_t c = 0) const {
    return data_[voxel + c * voxels()];
  }

  std::span<float> channel(std::size_t c) {
    return {data_.data() + c * voxels(), voxels()};
  }
  std::span<const float> channel(std::size_t c) const {
    return {data_.data() + c * voxels(), voxels()};
  }

  Volume extract_channel(std::size_t c) const {
    if (c >= channels_) fail(ErrorKind::index, "channel out of range");
    auto src = channel(c);
    return Volume(grid_, 1, std::vector<float>(src.begin(), src.end()));
  }

  /// Gathers the listed channels, in order, into a new volume.
  Volume select_channels(std::span<const std::size_t> which) const {
    Volume out(grid_, which.size());
    for (std::size_t n = 0; n < which.size(); ++n) {
      if (which[n] >= channels_) fail(ErrorKind::index, "channel out of range");
      auto src = channel(which[n]);
      std::copy(src.begin(), src.end(), out.channel(n).begin());
    }
    return out;
  }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  Grid3 grid_;
  std::size_t channels_ = 1;
  std::vector<float> data_;
};

/// Single-channel boolean mask.
class BinaryMask {
 public:
  BinaryMask() = default;
  explicit BinaryMask(Grid3 grid, bool fill = false)
      : grid_(grid), data_(grid.voxels(), fill ? 1 : 0) {}

  const Grid3& grid() const { return grid_; }
  std::size_t voxels() const { return grid_.voxels(); }

  bool operator()(std::size_t voxel) const { return data_[voxel] != 0; }
  void set(std::size_t voxel, bool v) { data_[voxel] = v ? 1 : 0; }

  bool at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[voxel_index(grid_, i, j, k)] != 0;
  }
  void set(std::size_t i, std::size_t j, std::size_t k, bool v) {
    data_[voxel_index(grid_, i, j, k)] = v ? 1 : 0;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data_) n += v;
    return n;
  }
  bool empty() const { return count() == 0; }

  const std::vector<std::uint8_t>& data() const { return data_; }

 private:
  Grid3 grid_;
  std::vector<std::uint8_t> data_;
};

/// Packs a list of masks on one grid into a multi-channel 0/1 volume.
inline Volume masks_to_volume(std::span<const BinaryMask> masks) {
  if (masks.empty()) fail(ErrorKind::empty_input, "no masks");
  const Grid3& g = masks.front().grid();
  Volume out(g, masks.size());
  for (std::size_t c = 0; c < masks.size(); ++c) {
    if (!masks[c].grid().same_shape(g))
      fail(ErrorKind::grid_mismatch, "masks live on different grids");
    for (std::size_t v = 0; v < g.voxels(); ++v) out(v, c) = masks[c](v) ? 1.0f : 0.0f;
  }
  return out;
}

/// One mask per channel: voxel is set iff its value is >= thr.
/// Values must be probabilities.
inline std::vector<BinaryMask> argmax_threshold_binarize(const Volume& probs,
                                                         double thr = 0.5) {
  if (!(thr > 0.0 && thr < 1.0)) fail(ErrorKind::domain, "threshold must lie in (0,1)");
  std::vector<BinaryMask> masks;
  masks.reserve(probs.channels());
  for (std::size_t c = 0; c < probs.channels(); ++c) {
    BinaryMask m(probs.grid());
    auto ch = probs.channel(c);
    for (std::size_t v = 0; v < ch.size(); ++v) {
      const float p = ch[v];
      if (!(p >= 0.0f && p <= 1.0f)) fail(ErrorKind::domain, "probability outside [0,1]");
      m.set(v, p >= thr);
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

namespace detail {

inline double catmull_rom(double t, double p0, double p1, double p2, double p3) {
  const double t2 = t * t, t3 = t2 * t;
  return 0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 +
                (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3);
}

// Sample at integer index n of a line of `len` samples; outside the line the
// value is extrapolated linearly from the two nearest edge samples.
template <typename Get>
double sample_ext(Get&& get, std::ptrdiff_t n, std::ptrdiff_t len) {
  if (len == 1) return get(0);
  if (n < 0) return get(0) + static_cast<double>(n) * (get(1) - get(0));
  if (n >= len) {
    return get(len - 1) + static_cast<double>(n - len + 1) * (get(len - 1) - get(len - 2));
  }
  return get(n);
}

// Catmull-Rom interpolation of a line at fractional position x.
template <typename Get>
double interp_line(Get&& get, double x, std::ptrdiff_t len) {
  x = std::clamp(x, 0.0, static_cast<double>(len - 1));
  const auto base = static_cast<std::ptrdiff_t>(std::floor(x));
  const double t = x - static_cast<double>(base);
  return catmull_rom(t, sample_ext(get, base - 1, len), sample_ext(get, base, len),
                     sample_ext(get, base + 1, len), sample_ext(get, base + 2, len));
}

}  // namespace detail

/// Zero-pads each dimension up to the next multiple of `factor`.
inline Volume pad_to_multiple(const Volume& v, std::size_t factor) {
  const Index3 d = v.grid().dims;
  Index3 nd{};
  for (int a = 0; a < 3; ++a) nd[a] = (d[a] + factor - 1) / factor * factor;
  if (nd == d) return v;
  Grid3 g(nd, v.grid().spacing, v.grid().origin);
  Volume out(g, v.channels());
  for (std::size_t c = 0; c < v.channels(); ++c)
    for (std::size_t k = 0; k < d[2]; ++k)
      for (std::size_t j = 0; j < d[1]; ++j)
        for (std::size_t i = 0; i < d[0]; ++i) out.at(i, j, k, c) = v.at(i, j, k, c);
  return out;
}

/// Downsamples a single-channel volume by an integer factor per axis. Each
/// output voxel is the separable Catmull-Rom interpolant evaluated at the
/// centre of its factor^3 source block. Dimensions that are not multiples of
/// the factor are zero-padded first. Output may contain small negative values.
inline Volume resample_cubic(const Volume& input, std::size_t factor) {
  if (factor == 0) fail(ErrorKind::domain, "resample factor must be positive");
  if (input.channels() != 1) fail(ErrorKind::domain, "resample_cubic takes one channel");
  const Volume v = pad_to_multiple(input, factor);
  const Index3 d = v.grid().dims;
  const Index3 od{d[0] / factor, d[1] / factor, d[2] / factor};
  const double off = (static_cast<double>(factor) - 1.0) / 2.0;
  const auto pos = [&](std::size_t o) { return static_cast<double>(o * factor) + off; };

  // Separable passes: x, then y, then z, in double precision.
  std::vector<double> a(od[0] * d[1] * d[2]);
  for (std::size_t k = 0; k < d[2]; ++k)
    for (std::size_t j = 0; j < d[1]; ++j) {
      auto get = [&](std::ptrdiff_t n) {
        return static_cast<double>(v.at(static_cast<std::size_t>(n), j, k));
      };
      for (std::size_t o = 0; o < od[0]; ++o)
        a[o + od[0] * (j + d[1] * k)] =
            detail::interp_line(get, pos(o), static_cast<std::ptrdiff_t>(d[0]));
    }
  std::vector<double> b(od[0] * od[1] * d[2]);
  for (std::size_t k = 0; k < d[2]; ++k)
    for (std::size_t i = 0; i < od[0]; ++i) {
      auto get = [&](std::ptrdiff_t n) {
        return a[i + od[0] * (static_cast<std::size_t>(n) + d[1] * k)];
      };
      for (std::size_t o = 0; o < od[1]; ++o)
        b[i + od[0] * (o + od[1] * k)] =
            detail::interp_line(get, pos(o), static_cast<std::ptrdiff_t>(d[1]));
    }
  Vec3 sp = v.grid().spacing;
  for (auto& s : sp) s *= static_cast<double>(factor);
  Volume out(Grid3(od, sp, v.grid().origin), 1);
  for (std::size_t j = 0; j < od[1]; ++j)
    for (std::size_t i = 0; i < od[0]; ++i) {
      auto get = [&](std::ptrdiff_t n) {
        return b[i + od[0] * (j + od[1] * static_cast<std::size_t>(n))];
      };
      for (std::size_t o = 0; o < od[2]; ++o)
        out.at(i, j, o) = static_cast<float>(
            detail::interp_line(get, pos(o), static_cast<std::ptrdiff_t>(d[2])));
    }
  return out;
}

}  // namespace tractseg
