#pragma once

/// Patch-based multi-label tract prediction: the predictor interface, a
/// voxel-wise logistic reference model, its soft-Dice/Adam training loop with
/// measurement-subset augmentation, sliding-window inference and test-time
/// averaging over measurement subsets.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tractseg/core.hpp"
#include "tractseg/error.hpp"
#include "tractseg/parallel.hpp"
#include "tractseg/qspace.hpp"
#include "tractseg/rng.hpp"
#include "tractseg/shfit.hpp"

namespace tractseg {

/// Maps an SH coefficient patch (p^3 x F) to independent per-class
/// probabilities (p^3 x C) in [0,1].
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::size_t classes() const = 0;
  virtual std::size_t features() const = 0;
  virtual Volume predict_patch(const ShCoeffMap& patch) const = 0;
};

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Per-class logistic regression on the SH coefficients of a single voxel.
class ReferenceModel final : public Predictor {
 public:
  ReferenceModel() = default;
  ReferenceModel(std::size_t classes, std::size_t features, double dropout_rate = 0.0)
      : classes_(classes), features_(features), weights_(classes * features, 0.0),
        bias_(classes, 0.0), dropout_(dropout_rate) {
    if (classes == 0 || features == 0) fail(ErrorKind::domain, "model needs classes and features");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) fail(ErrorKind::domain, "dropout rate must lie in [0,1)");
  }

  std::size_t classes() const override { return classes_; }
  std::size_t features() const override { return features_; }
  double dropout_rate() const { return dropout_; }
  void set_dropout_rate(double r) {
    if (r < 0.0 || r >= 1.0) fail(ErrorKind::domain, "dropout rate must lie in [0,1)");
    dropout_ = r;
  }

  /// Row-major C x F.
  std::vector<double>& weights() { return weights_; }
  const std::vector<double>& weights() const { return weights_; }
  std::vector<double>& bias() { return bias_; }
  const std::vector<double>& bias() const { return bias_; }

  double logit(std::size_t c, std::span<const double> x) const {
    double z = bias_[c];
    for (std::size_t f = 0; f < features_; ++f) z += weights_[c * features_ + f] * x[f];
    return z;
  }

  Volume predict_patch(const ShCoeffMap& patch) const override { return predict(patch, {}); }

  /// Monte-Carlo dropout pass: input features are dropped independently per
  /// voxel with the model's dropout rate (inverted scaling). Deterministic in seed.
  Volume predict_patch_dropout(const ShCoeffMap& patch, std::uint64_t seed) const {
    return predict(patch, seed);
  }

  /// Voxel-wise prediction over a whole coefficient volume.
  Volume predict_volume(const ShCoeffMap& coeffs, Exec exec = {},
                        std::optional<std::uint64_t> dropout_seed = {}) const {
    check_features(coeffs);
    Volume out(coeffs.grid(), classes_);
    parallel_for(0, coeffs.voxels(), exec, [&](std::size_t lo, std::size_t hi) {
      std::vector<double> x(features_);
      for (std::size_t v = lo; v < hi; ++v) {
        load_features(coeffs, v, x, dropout_seed);
        for (std::size_t c = 0; c < classes_; ++c) out(v, c) = static_cast<float>(sigmoid(logit(c, x)));
      }
    });
    return out;
  }

  void load_features(const ShCoeffMap& coeffs, std::size_t v, std::span<double> x,
                     std::optional<std::uint64_t> dropout_seed) const {
    for (std::size_t f = 0; f < features_; ++f) x[f] = coeffs(v, f);
    if (dropout_seed && dropout_ > 0.0) {
      const double keep = 1.0 - dropout_;
      for (std::size_t f = 0; f < features_; ++f) {
        const double u = unit_open(mix_seed(*dropout_seed, v * features_ + f));
        x[f] = u < dropout_ ? 0.0 : x[f] / keep;
      }
    }
  }

 private:
  void check_features(const ShCoeffMap& coeffs) const {
    if (coeffs.channels() != features_)
      fail(ErrorKind::shape_mismatch, "coefficient channels do not match model features");
  }

  Volume predict(const ShCoeffMap& patch, std::optional<std::uint64_t> seed) const {
    return predict_volume(patch, {}, seed);
  }

  std::size_t classes_ = 0;
  std::size_t features_ = 0;
  std::vector<double> weights_;
  std::vector<double> bias_;
  double dropout_ = 0.0;
};

// Loss ----------------------------------------------------------------------

namespace detail {
inline void check_same_shape(const Volume& a, const Volume& b) {
  if (!a.grid().same_shape(b.grid()) || a.channels() != b.channels())
    fail(ErrorKind::shape_mismatch, "prediction and target shapes differ");
}
}  // namespace detail

/// 1 - mean_c (2 sum(p t) + s) / (sum p + sum t + s)
inline double soft_dice_loss(const Volume& pred, const Volume& target, double smooth = 1.0) {
  detail::check_same_shape(pred, target);
  double dice_sum = 0.0;
  for (std::size_t c = 0; c < pred.channels(); ++c) {
    const auto p = pred.channel(c);
    const auto t = target.channel(c);
    double inter = 0.0, sp = 0.0, st = 0.0;
    for (std::size_t v = 0; v < p.size(); ++v) {
      inter += static_cast<double>(p[v]) * t[v];
      sp += p[v];
      st += t[v];
    }
    dice_sum += (2.0 * inter + smooth) / (sp + st + smooth);
  }
  return 1.0 - dice_sum / static_cast<double>(pred.channels());
}

/// Loss and its gradient with respect to every prediction value. Works on
/// double buffers laid out like Volume (channel-major).
inline double soft_dice_loss_grad(std::span<const double> pred, std::span<const double> target,
                                  std::size_t channels, std::span<double> grad,
                                  double smooth = 1.0) {
  if (pred.size() != target.size() || pred.size() != grad.size() || channels == 0 ||
      pred.size() % channels != 0)
    fail(ErrorKind::shape_mismatch, "prediction and target shapes differ");
  const std::size_t n = pred.size() / channels;
  double dice_sum = 0.0;
  for (std::size_t c = 0; c < channels; ++c) {
    double inter = 0.0, sp = 0.0, st = 0.0;
    for (std::size_t v = c * n; v < (c + 1) * n; ++v) {
      inter += pred[v] * target[v];
      sp += pred[v];
      st += target[v];
    }
    const double num = 2.0 * inter + smooth;
    const double den = sp + st + smooth;
    dice_sum += num / den;
    const double scale = -1.0 / (static_cast<double>(channels) * den * den);
    for (std::size_t v = c * n; v < (c + 1) * n; ++v)
      grad[v] = scale * (2.0 * target[v] * den - num);
  }
  return 1.0 - dice_sum / static_cast<double>(channels);
}

// Adam ----------------------------------------------------------------------

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                      double lr, AdamParams hp = {}) {
  if (params.size() != grads.size()) fail(ErrorKind::shape_mismatch, "parameter/gradient sizes differ");
  for (double g : grads)
    if (!std::isfinite(g)) fail(ErrorKind::divergence, "non-finite gradient");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) fail(ErrorKind::shape_mismatch, "optimizer state size differs");
  ++state.t;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * grads[i];
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
}

// Input features ------------------------------------------------------------

/// One scan: raw DWI (all table entries), its b0 image, gradient table and
/// ground-truth tract masks (may be empty at inference time).
struct Scan {
  Volume dwi;
  Volume b0;
  GradientTable table;
  std::vector<BinaryMask> labels;
};

/// b0-normalizes the subset's channels and projects them onto the order-2 basis.
inline ShCoeffMap subset_coefficients(const Volume& dwi, const Volume& b0, const GradientTable& table,
                                      std::span<const std::size_t> subset, Exec exec = {},
                                      std::optional<double> eps = {}) {
  if (dwi.channels() != table.size())
    fail(ErrorKind::shape_mismatch, "DWI channel count differs from gradient table size");
  const Volume picked = dwi.select_channels(subset);
  const auto norm = b0_normalize(picked, b0, eps.value_or(default_b0_eps(b0)));
  return fit_sh(norm.signal, table.directions(subset), {}, exec);
}

// Training ------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 1;  // patches per Adam step
  double plateau_factor = 0.5;
  double plateau_tol = 1e-6;   // "did not decrease": val(e) >= val(e-1) - tol
  std::size_t max_epochs = 50;
  std::size_t iterations_per_epoch = 0;  // 0: one per training scan
  std::size_t k_min = 6;
  std::size_t k_max = 12;
  std::size_t validation_k = 6;
  double validation_fraction = 0.25;
  std::size_t patch_size = 96;
  double b_target = 1000.0;
  double b_tol = kDefaultShellTol;
  double dropout_rate = 0.0;
  double smooth = 1.0;
  // Share of patches centred on a random labelled voxel instead of drawn
  // uniformly; near-empty patches otherwise dominate the soft-Dice gradient.
  double foreground_fraction = 1.0 / 3.0;
  std::uint64_t seed = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  ReferenceModel model;
  std::vector<EpochLog> log;
};

namespace detail {

inline Index3 clipped_patch(const Grid3& g, std::size_t p) {
  return {std::min(p, g.dims[0]), std::min(p, g.dims[1]), std::min(p, g.dims[2])};
}

inline Volume crop(const Volume& v, const Index3& start, const Index3& size) {
  Volume out(Grid3(size, v.grid().spacing, v.grid().origin), v.channels());
  for (std::size_t c = 0; c < v.channels(); ++c)
    for (std::size_t k = 0; k < size[2]; ++k)
      for (std::size_t j = 0; j < size[1]; ++j) {
        const std::size_t src = voxel_index(v.grid(), start[0], start[1] + j, start[2] + k) + c * v.voxels();
        const std::size_t dst = voxel_index(out.grid(), 0, j, k) + c * out.voxels();
        std::memcpy(&out.data()[dst], &v.data()[src], size[0] * sizeof(float));
      }
  return out;
}

inline BinaryMask crop(const BinaryMask& m, const Index3& start, const Index3& size) {
  BinaryMask out(Grid3(size, m.grid().spacing, m.grid().origin));
  for (std::size_t k = 0; k < size[2]; ++k)
    for (std::size_t j = 0; j < size[1]; ++j)
      for (std::size_t i = 0; i < size[0]; ++i)
        out.set(i, j, k, m.at(start[0] + i, start[1] + j, start[2] + k));
  return out;
}

inline std::vector<std::size_t> labelled_voxels(std::span<const BinaryMask> labels) {
  std::vector<std::size_t> out;
  if (labels.empty()) return out;
  for (std::size_t v = 0; v < labels.front().voxels(); ++v)
    for (const auto& m : labels)
      if (m(v)) {
        out.push_back(v);
        break;
      }
  return out;
}

// Uniform patch origin, or with probability `fg_fraction` a patch centred
// (then clipped to the grid) on a random labelled voxel.
inline Index3 sample_patch_start(const Scan& scan, const Index3& size, double fg_fraction,
                                 std::span<const std::size_t> foreground, Rng& rng) {
  const Grid3& g = scan.dwi.grid();
  Index3 start{};
  if (!foreground.empty() && uniform01(rng) < fg_fraction) {
    const auto centre = voxel_coords(g, foreground[uniform_below(rng, foreground.size())]);
    for (std::size_t a = 0; a < 3; ++a) {
      const std::size_t half = size[a] / 2;
      start[a] = std::min(centre[a] > half ? centre[a] - half : 0, g.dims[a] - size[a]);
    }
    return start;
  }
  for (std::size_t a = 0; a < 3; ++a) start[a] = uniform_below(rng, g.dims[a] - size[a] + 1);
  return start;
}

// Soft-Dice loss of a model on a coefficient volume; optionally accumulates
// parameter gradients (weights then biases).
inline double model_loss(const ReferenceModel& model, const ShCoeffMap& coeffs,
                         std::span<const BinaryMask> labels, double smooth,
                         std::vector<double>* grad, std::optional<std::uint64_t> dropout_seed) {
  const std::size_t n = coeffs.voxels(), C = model.classes(), F = model.features();
  if (labels.size() != C) fail(ErrorKind::shape_mismatch, "label count differs from model classes");
  std::vector<double> pred(n * C), target(n * C), x(n * F);
  std::vector<double> xv(F);
  for (std::size_t v = 0; v < n; ++v) {
    model.load_features(coeffs, v, xv, dropout_seed);
    std::copy(xv.begin(), xv.end(), x.begin() + static_cast<std::ptrdiff_t>(v * F));
    for (std::size_t c = 0; c < C; ++c) {
      pred[c * n + v] = sigmoid(model.logit(c, xv));
      target[c * n + v] = labels[c](v) ? 1.0 : 0.0;
    }
  }
  std::vector<double> dpred(n * C);
  const double loss = soft_dice_loss_grad(pred, target, C, dpred, smooth);
  if (grad) {
    grad->assign(C * F + C, 0.0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t v = 0; v < n; ++v) {
        const double p = pred[c * n + v];
        const double dz = dpred[c * n + v] * p * (1.0 - p);
        for (std::size_t f = 0; f < F; ++f) (*grad)[c * F + f] += dz * x[v * F + f];
        (*grad)[C * F + c] += dz;
      }
  }
  return loss;
}

}  // namespace detail

/// Trains the reference model. Each iteration draws a fresh measurement
/// subset (size uniform in [k_min, k_max]), fits SH on it, samples one patch
/// per batch element and takes one Adam step on the soft-Dice loss. After each
/// epoch the validation loss is computed on a fixed subset; the learning rate
/// is halved for the next epoch when it did not decrease.
inline TrainResult train_reference(std::span<const Scan> data, const TrainConfig& cfg, Exec exec = {}) {
  if (!(cfg.learning_rate > 0.0)) fail(ErrorKind::config, "learning rate must be positive");
  if (cfg.batch_size == 0 || cfg.max_epochs == 0) fail(ErrorKind::config, "batch size and epochs must be positive");
  if (data.size() < 2) fail(ErrorKind::config, "training needs at least one training and one validation scan");
  const std::size_t n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(cfg.validation_fraction * static_cast<double>(data.size()))), 1,
      data.size() - 1);
  const auto train = data.first(data.size() - n_val);
  const auto val = data.last(n_val);
  const std::size_t C = data.front().labels.size();
  if (C == 0) fail(ErrorKind::config, "scans carry no labels");
  for (const auto& s : data)
    if (s.labels.size() != C) fail(ErrorKind::config, "scans disagree on the number of tracts");

  constexpr std::size_t F = 6;
  TrainResult result{ReferenceModel(C, F, cfg.dropout_rate), {}};
  ReferenceModel& model = result.model;
  Rng rng(cfg.seed);
  // Small deterministic initialization breaks the symmetry between classes.
  for (auto& w : model.weights()) w = 0.01 * normal(rng);

  std::vector<ShCoeffMap> val_coeffs;
  for (std::size_t s = 0; s < val.size(); ++s) {
    const auto sel = select_subset(val[s].table, cfg.validation_k, cfg.b_target, cfg.b_tol,
                                   mix_seed(cfg.seed, 0xA11 + s));
    val_coeffs.push_back(subset_coefficients(val[s].dwi, val[s].b0, val[s].table, sel.indices, exec));
  }
  auto validation_loss = [&] {
    double sum = 0.0;
    for (std::size_t s = 0; s < val.size(); ++s)
      sum += detail::model_loss(model, val_coeffs[s], val[s].labels, cfg.smooth, nullptr, {});
    return sum / static_cast<double>(val.size());
  };

  std::vector<std::vector<std::size_t>> foreground;
  for (const auto& scan : train) foreground.push_back(detail::labelled_voxels(scan.labels));

  AdamState adam;
  double lr = cfg.learning_rate;
  double prev_val = std::numeric_limits<double>::infinity();
  const std::size_t iters = cfg.iterations_per_epoch ? cfg.iterations_per_epoch : train.size();
  std::vector<double> grad, step_grad;
  std::vector<double> params(C * F + C);
  std::uint64_t step_counter = 0;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    double train_sum = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
      step_grad.assign(C * F + C, 0.0);
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const std::size_t scan_index = uniform_below(rng, train.size());
        const Scan& scan = train[scan_index];
        const auto sel = random_subset(scan.table, cfg.k_min, cfg.k_max, cfg.b_target, cfg.b_tol, rng);
        const Index3 size = detail::clipped_patch(scan.dwi.grid(), cfg.patch_size);
        const Index3 start = detail::sample_patch_start(scan, size, cfg.foreground_fraction, foreground[scan_index], rng);
        const Volume dwi_patch = detail::crop(scan.dwi, start, size);
        const Volume b0_patch = detail::crop(scan.b0, start, size);
        const double eps = default_b0_eps(scan.b0);
        const auto coeffs = subset_coefficients(dwi_patch, b0_patch, scan.table, sel.indices, exec, eps);
        std::vector<BinaryMask> lab;
        for (const auto& m : scan.labels) lab.push_back(detail::crop(m, start, size));
        std::optional<std::uint64_t> drop;
        if (model.dropout_rate() > 0.0) drop = mix_seed(cfg.seed, 0xD00D0000ull + step_counter);
        ++step_counter;
        batch_loss += detail::model_loss(model, coeffs, lab, cfg.smooth, &grad, drop);
        for (std::size_t i = 0; i < grad.size(); ++i) step_grad[i] += grad[i] / static_cast<double>(cfg.batch_size);
      }
      batch_loss /= static_cast<double>(cfg.batch_size);
      if (!std::isfinite(batch_loss)) fail(ErrorKind::divergence, "training loss is not finite");
      std::copy(model.weights().begin(), model.weights().end(), params.begin());
      std::copy(model.bias().begin(), model.bias().end(), params.begin() + static_cast<std::ptrdiff_t>(C * F));
      adam_step(params, step_grad, adam, lr);
      std::copy(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(C * F), model.weights().begin());
      std::copy(params.begin() + static_cast<std::ptrdiff_t>(C * F), params.end(), model.bias().begin());
      train_sum += batch_loss;
    }
    const double val_loss = validation_loss();
    if (!std::isfinite(val_loss)) fail(ErrorKind::divergence, "validation loss is not finite");
    result.log.push_back({epoch, train_sum / static_cast<double>(iters), val_loss, lr});
    if (val_loss >= prev_val - cfg.plateau_tol) lr *= cfg.plateau_factor;
    prev_val = val_loss;
  }
  return result;
}

// Checkpoint and log files ---------------------------------------------------

inline constexpr std::array<char, 4> kCheckpointMagic{'T', 'S', 'R', 'M'};

/// Layout (little endian): "TSRM", uint32 C, uint32 F, C*F float64 weights
/// (row-major), C float64 biases.
inline void save_checkpoint(const ReferenceModel& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic.data(), 4);
  const auto C = static_cast<std::uint32_t>(m.classes());
  const auto F = static_cast<std::uint32_t>(m.features());
  out.write(reinterpret_cast<const char*>(&C), 4);
  out.write(reinterpret_cast<const char*>(&F), 4);
  out.write(reinterpret_cast<const char*>(m.weights().data()),
            static_cast<std::streamsize>(m.weights().size() * sizeof(double)));
  out.write(reinterpret_cast<const char*>(m.bias().data()),
            static_cast<std::streamsize>(m.bias().size() * sizeof(double)));
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

inline ReferenceModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || magic != kCheckpointMagic) fail(ErrorKind::bad_magic, "not a model checkpoint");
  std::uint32_t C = 0, F = 0;
  in.read(reinterpret_cast<char*>(&C), 4);
  in.read(reinterpret_cast<char*>(&F), 4);
  if (!in || C == 0 || F == 0) fail(ErrorKind::truncated, "checkpoint header is truncated");
  ReferenceModel m(C, F);
  in.read(reinterpret_cast<char*>(m.weights().data()),
          static_cast<std::streamsize>(m.weights().size() * sizeof(double)));
  in.read(reinterpret_cast<char*>(m.bias().data()), static_cast<std::streamsize>(m.bias().size() * sizeof(double)));
  if (!in) fail(ErrorKind::truncated, "checkpoint payload is truncated");
  for (double w : m.weights())
    if (!std::isfinite(w)) fail(ErrorKind::domain, "checkpoint holds non-finite weights");
  return m;
}

inline std::string training_log_csv(std::span<const EpochLog> log) {
  auto num = [](double v) {
    std::array<char, 64> buf{};
    const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), r.ptr);
  };
  std::string out = "epoch,train_loss,val_loss,lr\n";
  for (const auto& e : log)
    out += std::to_string(e.epoch) + "," + num(e.train_loss) + "," + num(e.val_loss) + "," + num(e.lr) + "\n";
  return out;
}

// Sliding-window inference ---------------------------------------------------

enum class BlendWindow { uniform, cosine };

struct PatchSpec {
  std::size_t size = 96;
  std::size_t stride = 48;
  BlendWindow blend = BlendWindow::cosine;

  void validate() const {
    if (size == 0 || stride == 0 || stride > size) fail(ErrorKind::config, "patch needs 0 < stride <= size");
  }
};

namespace detail {

// Mirror index into [0, n) without repeating the edge sample.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

inline Volume reflect_pad(const Volume& v, const Index3& size) {
  const Index3 d = v.grid().dims;
  if (size == d) return v;
  Volume out(Grid3(size, v.grid().spacing, v.grid().origin), v.channels());
  for (std::size_t c = 0; c < v.channels(); ++c)
    for (std::size_t k = 0; k < size[2]; ++k)
      for (std::size_t j = 0; j < size[1]; ++j)
        for (std::size_t i = 0; i < size[0]; ++i)
          out.at(i, j, k, c) = v.at(reflect_index(static_cast<std::ptrdiff_t>(i), d[0]),
                                    reflect_index(static_cast<std::ptrdiff_t>(j), d[1]),
                                    reflect_index(static_cast<std::ptrdiff_t>(k), d[2]), c);
  return out;
}

inline std::vector<std::size_t> window_starts(std::size_t n, std::size_t p, std::size_t stride) {
  std::vector<std::size_t> s;
  for (std::size_t x = 0; x + p <= n; x += stride) s.push_back(x);
  if (s.empty() || s.back() + p < n) s.push_back(n - p);
  return s;
}

inline std::vector<double> window_weights(std::size_t p, BlendWindow blend) {
  std::vector<double> w(p, 1.0);
  if (blend == BlendWindow::cosine)
    for (std::size_t i = 0; i < p; ++i)
      w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (static_cast<double>(i) + 0.5) /
                                  static_cast<double>(p));
  return w;
}

}  // namespace detail

/// Tiles the volume with overlapping p^3 patches, predicts each, and blends
/// them with normalized window weights. Volumes smaller than p are reflect
/// padded. Contributions are accumulated in fixed patch order, so the result
/// does not depend on the worker count.
inline Volume sliding_window_predict(const Predictor& model, const ShCoeffMap& coeffs,
                                     const PatchSpec& spec, Exec exec = {}) {
  spec.validate();
  if (coeffs.channels() != model.features())
    fail(ErrorKind::shape_mismatch, "coefficient channels do not match model features");
  const Index3 orig = coeffs.grid().dims;
  const std::size_t p = spec.size;
  const Index3 padded{std::max(orig[0], p), std::max(orig[1], p), std::max(orig[2], p)};
  const Volume input = detail::reflect_pad(coeffs, padded);
  const Grid3& pg = input.grid();
  const std::size_t C = model.classes();

  std::array<std::vector<std::size_t>, 3> starts;
  for (std::size_t a = 0; a < 3; ++a) starts[a] = detail::window_starts(padded[a], p, spec.stride);
  std::vector<Index3> patches;
  for (auto z : starts[2])
    for (auto y : starts[1])
      for (auto x : starts[0]) patches.push_back({x, y, z});

  const auto w1 = detail::window_weights(p, spec.blend);
  std::vector<double> acc(pg.voxels() * C, 0.0), wsum(pg.voxels(), 0.0);
  const std::size_t batch = std::max(1u, exec.threads);
  const Index3 psize{p, p, p};
  for (std::size_t first = 0; first < patches.size(); first += batch) {
    const std::size_t last = std::min(patches.size(), first + batch);
    std::vector<Volume> preds(last - first);
    parallel_for(first, last, exec, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t n = lo; n < hi; ++n) {
        preds[n - first] = model.predict_patch(detail::crop(input, patches[n], psize));
        if (preds[n - first].channels() != C || !preds[n - first].grid().same_shape(Grid3(psize)))
          fail(ErrorKind::shape_mismatch, "predictor returned a patch of the wrong shape");
      }
    });
    for (std::size_t n = first; n < last; ++n) {
      const Index3& s = patches[n];
      const Volume& pr = preds[n - first];
      parallel_for(0, p, exec, [&](std::size_t klo, std::size_t khi) {
        for (std::size_t k = klo; k < khi; ++k)
          for (std::size_t j = 0; j < p; ++j)
            for (std::size_t i = 0; i < p; ++i) {
              const double w = w1[i] * w1[j] * w1[k];
              const std::size_t gv = voxel_index(pg, s[0] + i, s[1] + j, s[2] + k);
              const std::size_t pv = i + p * (j + p * k);
              wsum[gv] += w;
              for (std::size_t c = 0; c < C; ++c) acc[gv + c * pg.voxels()] += w * pr(pv, c);
            }
      });
    }
  }

  Volume out(coeffs.grid(), C);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < orig[2]; ++k)
      for (std::size_t j = 0; j < orig[1]; ++j)
        for (std::size_t i = 0; i < orig[0]; ++i) {
          const std::size_t gv = voxel_index(pg, i, j, k);
          const double val = acc[gv + c * pg.voxels()] / wsum[gv];
          out.at(i, j, k, c) = static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
  return out;
}

// Test-time augmentation -------------------------------------------------------

struct TtaResult {
  std::vector<Volume> predictions;
  Volume mean;
  std::vector<SubsetSelection> subsets;
};

/// Voxel-wise arithmetic mean of same-shaped volumes.
inline Volume voxelwise_mean(std::span<const Volume> members) {
  if (members.empty()) fail(ErrorKind::empty_input, "no members to average");
  const Volume& first = members.front();
  for (const auto& m : members) detail::check_same_shape(m, first);
  Volume out(first.grid(), first.channels());
  const double n = static_cast<double>(members.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    double s = 0.0;
    for (const auto& m : members) s += m.data()[i];
    out.data()[i] = static_cast<float>(s / n);
  }
  return out;
}

struct TtaConfig {
  std::size_t n = 5;
  std::size_t k = 6;
  double b_target = 1000.0;
  double b_tol = kDefaultShellTol;
  std::uint64_t seed = 0;
  PatchSpec patch{};
};

/// Member m uses the subset select_subset(seed mixed with m); members are
/// drawn independently and may share directions.
inline std::vector<SubsetSelection> tta_subsets(const GradientTable& table, const TtaConfig& cfg) {
  if (cfg.n == 0) fail(ErrorKind::config, "TTA needs n >= 1");
  std::vector<SubsetSelection> subsets;
  for (std::size_t m = 0; m < cfg.n; ++m)
    subsets.push_back(select_subset(table, cfg.k, cfg.b_target, cfg.b_tol, mix_seed(cfg.seed, m)));
  return subsets;
}

inline TtaResult tta_predict(const Predictor& model, const Volume& dwi, const Volume& b0,
                             const GradientTable& table, const TtaConfig& cfg, Exec exec = {}) {
  TtaResult r;
  r.subsets = tta_subsets(table, cfg);
  const double eps = default_b0_eps(b0);
  for (const auto& sel : r.subsets) {
    const auto coeffs = subset_coefficients(dwi, b0, table, sel.indices, exec, eps);
    r.predictions.push_back(sliding_window_predict(model, coeffs, cfg.patch, exec));
  }
  r.mean = voxelwise_mean(r.predictions);
  return r;
}

}  // namespace tractseg
