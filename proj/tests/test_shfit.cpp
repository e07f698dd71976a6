#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Dense>

#include "tractseg/dwi_io.hpp"
#include "tractseg/qspace.hpp"
#include "tractseg/shfit.hpp"

using namespace tractseg;

namespace {

const double kPi = std::numbers::pi;

std::vector<Vec3> fixture_dirs() {
  const auto t = read_gradients(TRACTSEG_TEST_DATA "/shell90.bval", TRACTSEG_TEST_DATA "/shell90.bvec");
  return t.directions(t.shell(1000.0));
}

// Gauss-Legendre nodes and weights on [-1,1] by Golub-Welsch.
void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) j(i, i - 1) = j(i - 1, i) = i / std::sqrt(4.0 * i * i - 1.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(j);
  x.resize(n);
  w.resize(n);
  for (int i = 0; i < n; ++i) {
    x[i] = es.eigenvalues()(i);
    w[i] = 2.0 * es.eigenvectors()(0, i) * es.eigenvectors()(0, i);
  }
}

// Closed-form Cartesian order-2 real harmonics (same sign convention).
std::vector<double> cartesian_sh(const Vec3& d) {
  const double x = d[0], y = d[1], z = d[2];
  const double c0 = 0.5 / std::sqrt(kPi);
  const double c2 = 0.5 * std::sqrt(15.0 / kPi);
  return {c0,
          c2 * x * y,
          c2 * y * z,
          0.25 * std::sqrt(5.0 / kPi) * (3.0 * z * z - 1.0),
          c2 * x * z,
          0.5 * c2 * (x * x - y * y)};
}

Eigen::MatrixXd cartesian_design(const std::vector<Vec3>& dirs) {
  Eigen::MatrixXd b(static_cast<Eigen::Index>(dirs.size()), 6);
  for (std::size_t r = 0; r < dirs.size(); ++r) {
    const auto row = cartesian_sh(dirs[r]);
    for (int c = 0; c < 6; ++c) b(static_cast<Eigen::Index>(r), c) = row[c];
  }
  return b;
}

Volume signal_volume(const std::vector<std::vector<double>>& rows) {
  Volume v(Grid3({rows.size(), 1, 1}), rows.front().size());
  for (std::size_t n = 0; n < rows.size(); ++n)
    for (std::size_t c = 0; c < rows[n].size(); ++c) v(n, c) = static_cast<float>(rows[n][c]);
  return v;
}

}  // namespace

TEST(ShBasis, CoefficientCount) {
  EXPECT_EQ(ShBasisSpec{2}.coefficient_count(), 6u);
  EXPECT_EQ(ShBasisSpec{4}.coefficient_count(), 15u);
  EXPECT_THROW(ShBasisSpec{3}.validate(), Error);
}

TEST(ShBasis, ConstantTermAndPole) {
  const auto r = sh_basis_row({0.0, 0.0, 1.0});
  EXPECT_NEAR(r[0], 1.0 / std::sqrt(4.0 * kPi), 1e-15);
  EXPECT_NEAR(r[0], 0.28209479, 1e-8);
  EXPECT_NEAR(r[3], std::sqrt(5.0 / (4.0 * kPi)), 1e-14);
  for (int c : {1, 2, 4, 5}) EXPECT_NEAR(r[c], 0.0, 1e-15);
}

TEST(ShBasis, AntipodalRowsAreIdentical) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  for (int t = 0; t < 50; ++t) {
    Vec3 g{n(rng), n(rng), n(rng)};
    const double s = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
    for (auto& x : g) x /= s;
    const auto a = sh_basis_row(g), b = sh_basis_row({-g[0], -g[1], -g[2]});
    for (int c = 0; c < 6; ++c) EXPECT_NEAR(a[c], b[c], 1e-14);
  }
}

TEST(ShBasis, MatchesCartesianClosedForm) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  for (int t = 0; t < 50; ++t) {
    Vec3 g{n(rng), n(rng), n(rng)};
    const double s = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
    for (auto& x : g) x /= s;
    const auto a = sh_basis_row(g), b = cartesian_sh(g);
    for (int c = 0; c < 6; ++c) EXPECT_NEAR(a[c], b[c], 1e-12) << c;
  }
}

TEST(ShBasis, RejectsNonUnitDirection) {
  EXPECT_THROW(sh_basis_row({0.0, 0.0, 1.01}), Error);
  EXPECT_NO_THROW(sh_basis_row({0.0, 0.0, 1.00005}));
}

TEST(ShBasis, OrthonormalUnderQuadrature) {
  std::vector<double> x, w;
  gauss_legendre(12, x, w);
  const int nphi = 24;
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(6, 6);
  for (std::size_t a = 0; a < x.size(); ++a)
    for (int p = 0; p < nphi; ++p) {
      const double phi = 2.0 * kPi * p / nphi, st = std::sqrt(1.0 - x[a] * x[a]);
      const auto r = sh_basis_row({st * std::cos(phi), st * std::sin(phi), x[a]});
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) gram(i, j) += w[a] * (2.0 * kPi / nphi) * r[i] * r[j];
    }
  EXPECT_LT((gram - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(B0Normalize, HandCases) {
  const Grid3 g({3, 1, 1});
  Volume dwi(g, 1), b0(g, 1);
  dwi(0) = 1000.0f; b0(0) = 1000.0f;
  dwi(1) = 500.0f;  b0(1) = 1000.0f;
  dwi(2) = 300.0f;  b0(2) = 0.0f;
  const auto n = b0_normalize(dwi, b0, 1.0);
  EXPECT_EQ(n.signal(0), 1.0f);
  EXPECT_EQ(n.signal(1), 0.5f);
  EXPECT_EQ(n.signal(2), 0.0f);
  EXPECT_TRUE(n.background(2));
  EXPECT_FALSE(n.background(1));
}

TEST(B0Normalize, ClampsAndChecksGrid) {
  const Grid3 g({1, 1, 1});
  Volume dwi(g, 1, 5000.0f), b0(g, 1, 1000.0f);
  EXPECT_EQ(b0_normalize(dwi, b0, 1.0).signal(0), 2.0f);
  EXPECT_THROW(b0_normalize(dwi, Volume(Grid3({2, 1, 1}), 1), 1.0), Error);
}

TEST(B0Normalize, DefaultEpsFollowsUpperPercentile) {
  Volume b0(Grid3({100, 1, 1}), 1);
  for (std::size_t i = 0; i < 100; ++i) b0(i) = static_cast<float>(i * 10);
  EXPECT_NEAR(default_b0_eps(b0), 1e-3 * 980.0, 1e-9);
}

TEST(FitSh, RecoversInModelCoefficients) {
  const auto dirs = fixture_dirs();
  ASSERT_EQ(dirs.size(), 90u);
  const ShFitter fit(dirs);
  const Eigen::MatrixXd b = sh_design_matrix(dirs);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    Eigen::VectorXd c(6);
    for (int i = 0; i < 6; ++i) c(i) = u(rng);
    const Eigen::VectorXd s = b * c;
    std::vector<double> sig(s.data(), s.data() + s.size()), out(6);
    fit.fit_voxel(sig, out);
    for (int i = 0; i < 6; ++i) EXPECT_NEAR(out[i], c(i), 1e-9);
  }
}

TEST(FitSh, ConstantSignalProjectsOntoConstantTerm) {
  const auto dirs = fixture_dirs();
  const ShFitter fit(dirs);
  for (double s : {0.25, 1.0, 1.7}) {
    std::vector<double> sig(dirs.size(), s), out(6);
    fit.fit_voxel(sig, out);
    EXPECT_NEAR(out[0], s * std::sqrt(4.0 * kPi), 1e-9);
    for (int i = 1; i < 6; ++i) EXPECT_LT(std::abs(out[i]), 1e-9);
  }
}

TEST(FitSh, IdenticalDirectionsGiveMinimumNormFit) {
  const Vec3 g{0.6, 0.0, 0.8};
  const std::vector<Vec3> dirs(6, g);
  const ShFitter fit(dirs);
  const std::vector<double> sig{0.3, 0.5, 0.4, 0.6, 0.2, 0.4};
  std::vector<double> out(6);
  fit.fit_voxel(sig, out);
  // Rank one: the minimum-norm solution is b * mean(s) / |b|^2.
  const auto b = sh_basis_row(g);
  double bb = 0.0;
  for (double x : b) bb += x * x;
  const double mean = 0.4;
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(out[i], b[i] * mean / bb, 1e-12);
}

TEST(FitSh, PseudoInverseMatchesEigenOracle) {
  // Independent route: pinv = (sum over nonzero eigenpairs of B^T B of v v^T / lambda) B^T.
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Vec3> dirs;
    for (int i = 0; i < 6 + 2 * trial; ++i) {
      Vec3 g{n(rng), n(rng), n(rng)};
      const double s = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
      for (auto& x : g) x /= s;
      dirs.push_back(g);
    }
    if (trial == 4) dirs[1] = dirs[0];  // rank deficient by one
    const Eigen::MatrixXd b = cartesian_design(dirs);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(b.transpose() * b);
    const double lmax = es.eigenvalues().maxCoeff();
    Eigen::MatrixXd inv = Eigen::MatrixXd::Zero(6, 6);
    for (int i = 0; i < 6; ++i) {
      const double l = es.eigenvalues()(i);
      if (l > 1e-12 * lmax) inv += es.eigenvectors().col(i) * es.eigenvectors().col(i).transpose() / l;
    }
    const Eigen::MatrixXd oracle = inv * b.transpose();
    EXPECT_LT((ShFitter(dirs).pseudo_inverse() - oracle).cwiseAbs().maxCoeff(), 1e-8) << trial;
  }
}

TEST(FitSh, PermutationEquivarianceIsExact) {
  const auto all = fixture_dirs();
  std::vector<Vec3> dirs(all.begin(), all.begin() + 9);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::vector<std::vector<double>> rows(20, std::vector<double>(9));
  for (auto& r : rows)
    for (auto& x : r) x = u(rng);
  const auto base = fit_sh(signal_volume(rows), dirs);

  std::vector<std::size_t> perm{4, 0, 8, 2, 7, 1, 6, 3, 5};
  std::vector<Vec3> pdirs;
  auto prows = rows;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    pdirs.push_back(dirs[perm[i]]);
    for (std::size_t v = 0; v < rows.size(); ++v) prows[v][i] = rows[v][perm[i]];
  }
  EXPECT_EQ(fit_sh(signal_volume(prows), pdirs).data(), base.data());
}

TEST(FitSh, Linearity) {
  const auto all = fixture_dirs();
  std::vector<Vec3> dirs(all.begin(), all.begin() + 12);
  const ShFitter fit(dirs);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> s(12), as(12), c(6), ac(6);
  for (int i = 0; i < 12; ++i) {
    s[i] = u(rng);
    as[i] = 3.5 * s[i];
  }
  fit.fit_voxel(s, c);
  fit.fit_voxel(as, ac);
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(ac[i], 3.5 * c[i], 1e-12);
}

TEST(FitSh, ParallelFitIsIdentical) {
  const auto dirs = fixture_dirs();
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Volume v(Grid3({7, 6, 5}), dirs.size());
  for (auto& x : v.data()) x = u(rng);
  EXPECT_EQ(fit_sh(v, dirs, {}, Exec{1}).data(), fit_sh(v, dirs, {}, Exec{3}).data());
}

TEST(FitSh, ChannelMismatchThrows) {
  const auto dirs = fixture_dirs();
  EXPECT_THROW(fit_sh(Volume(Grid3({2, 2, 2}), 5), dirs), Error);
}

TEST(ShReconstruct, HandCasesAndRoundTrip) {
  const auto dirs = fixture_dirs();
  ShCoeffMap zero(Grid3({2, 1, 1}), 6);
  const auto from_zero = sh_reconstruct(zero, dirs);
  for (float x : from_zero.data()) EXPECT_EQ(x, 0.0f);

  ShCoeffMap c00(Grid3({1, 1, 1}), 6);
  c00(0, 0) = 1.0f;
  const auto from_c00 = sh_reconstruct(c00, dirs);
  for (float x : from_c00.data()) EXPECT_NEAR(x, 1.0 / std::sqrt(4.0 * kPi), 1e-7);

  ShCoeffMap c(Grid3({3, 1, 1}), 6);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f);
  for (auto& x : c.data()) x = u(rng);
  const auto back = fit_sh(sh_reconstruct(c, dirs), dirs);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(back.data()[i], c.data()[i], 1e-6);
}
