#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "spectral_rnn/diagnostics.hpp"

using namespace srnn;

namespace {

RnnParams planted(std::uint64_t seed) {
  Rng rng(seed);
  RnnParams p;
  p.A1 = random_gaussian_matrix(3, 5, rng);
  for (Index i = 0; i < 3; ++i) p.A1.row(i).normalize();
  p.U = with_spectral_norm(random_gaussian_matrix(3, 3, rng), 0.3);
  p.A2 = random_gaussian_matrix(3, 4, rng);
  p.act = Activation{2, {}};
  return p;
}

RnnEstimate exact_estimate(const RnnParams& p) {
  RnnEstimate e;
  e.A1_hat = p.A1;
  e.A2_hat = p.A2;
  e.U_hat = p.U;
  return e;
}

MarkovChainSpec scalar_chain(double w, double sigma) {
  MarkovChainSpec s;
  s.W = Matrix::Constant(1, 1, w);
  s.sigma = sigma;
  return s;
}

}  // namespace

TEST(Hungarian, MatchesBruteForce) {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix C = random_gaussian_matrix(5, 5, rng);
    const auto m = detail::hungarian(C);
    double got = 0;
    for (Index i = 0; i < 5; ++i) got += C(i, m[i]);
    std::vector<Index> p{0, 1, 2, 3, 4};
    double best = 1e300;
    do {
      double c = 0;
      for (Index i = 0; i < 5; ++i) c += C(i, p[i]);
      best = std::min(best, c);
    } while (std::next_permutation(p.begin(), p.end()));
    EXPECT_NEAR(got, best, 1e-12);
  }
}

TEST(Align, ExactEstimateHasZeroError) {
  const RnnParams p = planted(1);
  const auto r = align(exact_estimate(p), p);
  EXPECT_LT(r.max_error, 1e-12);
  EXPECT_EQ(r.per_row_errors.at("A1").size(), 3u);
  EXPECT_EQ(r.per_row_errors.at("U").size(), 3u);
  EXPECT_NEAR(r.sigma_min_A1, detail::sigma_min(p.A1), 1e-12);
  EXPECT_GT(r.sigma_min_U, 0.0);
}

TEST(Align, InvariantUnderAmbiguityGroup) {
  const RnnParams p = planted(2);
  const RnnEstimate moved = act_on(exact_estimate(p), {2, 0, 1}, {-1.0, 1.0, -1.0});
  const auto r = align(moved, p);
  EXPECT_LT(r.max_error, 1e-12);
  // truth unit i sits at estimate row permutation[i]
  for (Index i = 0; i < 3; ++i)
    EXPECT_LT((r.signs[i] * moved.A1_hat.row(r.permutation[i]) - p.A1.row(i)).norm(), 1e-12);
}

TEST(Align, Idempotent) {
  const RnnParams p = planted(4);
  Rng rng(9);
  RnnEstimate noisy = exact_estimate(p);
  noisy.A1_hat += 0.05 * random_gaussian_matrix(3, 5, rng);
  noisy.U_hat += 0.05 * random_gaussian_matrix(3, 3, rng);
  noisy = act_on(noisy, {1, 2, 0}, {1.0, -1.0, 1.0});
  const auto r1 = align(noisy, p);
  const RnnEstimate fixed = [&] {
    // inverse action: row i of the result is estimate row permutation[i]
    RnnEstimate e = noisy;
    for (Index i = 0; i < 3; ++i) {
      e.A1_hat.row(i) = r1.signs[i] * noisy.A1_hat.row(r1.permutation[i]);
      e.A2_hat.row(i) = noisy.A2_hat.row(r1.permutation[i]);
      for (Index j = 0; j < 3; ++j)
        e.U_hat(i, j) = r1.signs[i] * noisy.U_hat(r1.permutation[i], r1.permutation[j]);
    }
    return e;
  }();
  const auto r2 = align(fixed, p);
  for (Index i = 0; i < 3; ++i) {
    EXPECT_EQ(r2.permutation[i], i);
    EXPECT_EQ(r2.signs[i], 1.0);
  }
  EXPECT_NEAR(r2.max_error, r1.max_error, 1e-12);
  EXPECT_NEAR(r2.median_error, r1.median_error, 1e-12);
}

TEST(Align, CanonicalizesTruth) {
  RnnParams p = planted(5);
  p.A1.row(1) *= 2.0;
  RnnParams c = p;
  canonicalize(c);
  EXPECT_LT(align(exact_estimate(c), p).max_error, 1e-12);
  EXPECT_GT(align(exact_estimate(p), p).max_error, 0.1);
}

TEST(Align, NoSignFreedomForOddOrder) {
  const RnnParams p = planted(6);
  RnnEstimate e = exact_estimate(p);
  e.A1_hat.row(0) *= -1.0;
  AlignOptions o;
  o.signs = SignSymmetry::none;
  EXPECT_NEAR(align(e.A1_hat, e.A2_hat, Matrix(), p.A1, p.A2, Matrix(), o).max_of("A1"), 2.0,
              1e-12);
}

TEST(Align, FitsPositiveScaleForDirections) {
  const RnnParams p = planted(7);
  RnnEstimate e = exact_estimate(p);
  e.A2_hat.row(1) *= 3.0;
  AlignOptions o;
  o.fit_scale = true;
  const auto r = align(e, p, o, false);
  EXPECT_LT(r.max_error, 1e-12);
  EXPECT_NEAR(r.scales[1], 1.0 / 3.0, 1e-12);
  EXPECT_EQ(r.per_row_errors.count("U"), 0u);
}

TEST(Align, RejectsShapeMismatch) {
  const RnnParams p = planted(8);
  RnnEstimate e = exact_estimate(p);
  e.A1_hat = Matrix::Zero(2, 5);
  EXPECT_THROW(align(e, p), Error);
}

TEST(Bounds, LipschitzExample) {
  RnnParams p;
  p.A1 = Matrix::Constant(1, 1, 0.5);
  p.U = Matrix::Constant(1, 1, 0.25);
  p.A2 = Matrix::Constant(1, 1, 1.0);
  p.act = Activation{2, {}};
  EXPECT_NEAR(lipschitz_bound(p, 2.0, 1.0, 100.0), 0.05, 1e-15);
}

TEST(Bounds, LipschitzRejectsNonContraction) {
  RnnParams p;
  p.A1 = Matrix::Constant(1, 1, 0.5);
  p.U = Matrix::Constant(1, 1, 0.6);
  p.A2 = Matrix::Constant(1, 1, 1.0);
  p.act = Activation{2, {}};
  try {
    lipschitz_bound(p, 1.0, 1.0, 10.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("contraction assumption violated"), std::string::npos);
  }
}

TEST(Bounds, ConcentrationMatchesLogForm) {
  const double G = 1.7, th = 0.4, c = 0.3, n = 1e4, d1 = 6, d2 = 36, dl = 0.05;
  const double b = concentration_bound(G, th, c, n, d1, d2, dl);
  const double lg = std::log(G) + std::log1p(1.0 / (std::sqrt(8.0) * c * std::pow(n, 1.5))) -
                    std::log1p(-th) +
                    0.5 * (std::log(8.0) + 2 * std::log(c) + std::log(n) +
                           std::log(std::log((d1 + d2) / dl)));
  EXPECT_NEAR(std::log(b), lg, 1e-12);
  EXPECT_GT(concentration_bound(G, 0.8, c, n, d1, d2, dl), b);
  EXPECT_THROW(concentration_bound(G, 1.0, c, n, d1, d2, dl), Error);
  EXPECT_THROW(concentration_bound(G, th, c, n, d1, d2, 1.5), Error);
}

TEST(Mixing, IidChainMixesInOneStep) {
  const auto m = mixing_estimate(iid_standard(3), 10);
  EXPECT_EQ(m.theta_hat, 0.0);
  EXPECT_GT(m.curve[0], 0.5);
  for (std::size_t t = 1; t < m.curve.size(); ++t) EXPECT_LT(m.curve[t], 1e-12);
}

TEST(Mixing, ScalarChainRate) {
  const auto m = mixing_estimate(scalar_chain(0.5, 1.0), 20);
  EXPECT_TRUE(m.fit_ok);
  EXPECT_NEAR(m.theta_hat, 0.5, 0.05);
  const auto slow = mixing_estimate(scalar_chain(0.8, 1.0), 20);
  EXPECT_GT(slow.theta_hat, m.theta_hat);
}

TEST(Mixing, MonotoneInTransitionNorm) {
  Rng rng(2);
  const Matrix W0 = with_spectral_norm(random_gaussian_matrix(3, 3, rng), 1.0);
  double prev = -1;
  for (double s : {0.2, 0.5, 0.8}) {
    MarkovChainSpec spec;
    spec.W = s * W0;
    const auto m = mixing_estimate(spec, 25, 32, 5);
    EXPECT_GT(m.theta_hat, prev);
    prev = m.theta_hat;
  }
}

TEST(Gamma, StandardScalarQuantile) {
  // W = 0, sigma = 1: |grad S_2| = 2 |x_t|, so gamma = 2 * z_{0.9995}
  const MarkovChainSpec spec = iid_standard(1);
  const Matrix x = sample_markov_chain(spec, 1000000, 11);
  EXPECT_NEAR(gamma_estimate(x, spec), 2.0 * 3.2905, 0.1);
}

TEST(Sweep, SlopeCsvAndDeterminism) {
  SweepConfig cfg;
  cfg.truth = planted(12);
  cfg.truth.U.setZero();
  cfg.spec = iid_standard(5);
  cfg.n_grid = {2000, 20000, 200000};
  cfg.seeds = {1, 2, 3};
  cfg.gloree.recover_u = false;
  cfg.workers = 1;
  const auto r1 = sample_sweep(cfg);
  cfg.workers = 4;
  const auto r4 = sample_sweep(cfg);
  EXPECT_EQ(r1.csv(), r4.csv());
  EXPECT_EQ(r1.csv().rfind("n,seed,matrix,row,error\n", 0), 0u);
  EXPECT_TRUE(r1.cell_errors.empty());
  EXPECT_EQ(r1.rows.size(), 3u * 3u * 2u * 3u);
  EXPECT_NEAR(r1.slope, -0.5, 0.2);
  EXPECT_GT(r1.median_max_error[0], r1.median_max_error[2]);
}

TEST(Sweep, RecordsFailedCellsAndContinues) {
  SweepConfig cfg;
  cfg.truth = planted(13);
  cfg.truth.U.setZero();
  cfg.spec = iid_standard(5);
  cfg.n_grid = {5, 5000, 50000};
  cfg.seeds = {1};
  cfg.gloree.recover_u = false;
  const auto r = sample_sweep(cfg);
  ASSERT_EQ(r.cell_errors.size(), 1u);
  EXPECT_EQ(r.cell_errors[0].rfind("n=5,seed=1: ", 0), 0u);
  EXPECT_FALSE(r.rows.empty());
  EXPECT_TRUE(std::isnan(r.median_max_error[0]));
}

TEST(Sweep, RejectsShortGrid) {
  SweepConfig cfg;
  cfg.truth = planted(1);
  cfg.spec = iid_standard(5);
  cfg.n_grid = {100, 1000};
  cfg.seeds = {1};
  EXPECT_THROW(sample_sweep(cfg), Error);
}
