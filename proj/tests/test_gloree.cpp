#include <gtest/gtest.h>

#include <cmath>

#include "spectral_rnn/gloree.hpp"

using namespace srnn;

namespace {

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

Matrix unit_rows(Index r, Index c, Rng& rng) {
  Matrix A = random_gaussian_matrix(r, c, rng);
  for (Index i = 0; i < r; ++i) A.row(i).normalize();
  return A;
}

// Permutation by greedy |cos| on A1 rows, then per-unit signs from A1.
struct Aligned {
  double a1 = 0, a2 = 0, u = 0;
};

Aligned align_to(const Matrix& A1h, const Matrix& A2h, const Matrix& Uh, const Matrix& A1,
                 const Matrix& A2, const Matrix& U) {
  const Index k = A1.rows();
  std::vector<Index> p(k);
  std::vector<bool> used(k, false);
  for (Index i = 0; i < k; ++i) {
    double best = -1;
    for (Index j = 0; j < k; ++j) {
      if (used[j]) continue;
      const double c = std::abs(A1.row(i).dot(A1h.row(j))) /
                       std::max(1e-300, A1.row(i).norm() * A1h.row(j).norm());
      if (c > best) {
        best = c;
        p[i] = j;
      }
    }
    used[p[i]] = true;
  }
  Aligned e;
  for (Index i = 0; i < k; ++i) {
    const double s = A1.row(i).dot(A1h.row(p[i])) >= 0 ? 1.0 : -1.0;
    e.a1 = std::max(e.a1, (s * A1h.row(p[i]) - A1.row(i)).norm());
    e.a2 = std::max(e.a2, (A2h.row(p[i]) - A2.row(i)).norm());
    Vector ur(k);
    for (Index j = 0; j < k; ++j) ur(j) = s * Uh(p[i], p[j]);
    e.u = std::max(e.u, (ur - U.row(i).transpose()).norm());
  }
  return e;
}

Aligned align_to(const RnnEstimate& est, const RnnParams& truth) {
  return align_to(est.A1_hat, est.A2_hat, est.U_hat, truth.A1, truth.A2, truth.U);
}

MarkovChainSpec scaled_iid(Index d, double sd) {
  MarkovChainSpec s = iid_standard(d);
  s.sigma = sd;
  return s;
}

// d_x = 6, d_h = 3, d_y = 4 with unit A1 rows.
RnnParams planted(double u_norm, std::uint64_t seed) {
  Rng rng(seed);
  RnnParams p;
  p.A1 = unit_rows(3, 6, rng);
  p.U = u_norm > 0 ? with_spectral_norm(random_gaussian_matrix(3, 3, rng), u_norm)
                   : Matrix::Zero(3, 3);
  p.A2 = random_gaussian_matrix(3, 4, rng);
  p.act = Activation{2, {}};
  return p;
}

}  // namespace

TEST(RecoverU, InvertsRowwiseKronecker) {
  Rng rng(1);
  Matrix A1 = unit_rows(3, 4, rng);
  Matrix U = random_gaussian_matrix(3, 3, rng);
  Matrix Rt = U * rowwise_kron(A1, A1);
  EXPECT_LT((recover_u(Rt, A1) - U).norm(), 1e-10);
  EXPECT_EQ(recover_u(Matrix::Zero(3, 16), A1).norm(), 0.0);
}

TEST(RecoverU, ScalarUnitDirection) {
  Rng rng(2);
  Matrix a = unit_rows(1, 5, rng);
  Matrix Rt = 0.37 * rowwise_kron(a, a);
  EXPECT_NEAR(recover_u(Rt, a)(0, 0), 0.37, 1e-12);
}

TEST(RecoverU, RankDeficiencyIsReported) {
  Matrix A1(2, 3);
  A1 << 1, 0, 0, 1, 0, 0;
  EXPECT_THROW(recover_u(Matrix::Zero(2, 9), A1), Error);
}

TEST(GloreeQuadratic, OracleMomentsAreExact) {
  RnnParams p = planted(0.3, 3);
  MarkovChainSpec s = scaled_iid(6, 0.3);
  auto m = oracle_quadratic_moments(p, s, {300, 4, 1, 20});
  auto est = gloree_quadratic(m, 3);
  auto e = align_to(est, p);
  EXPECT_LT(e.a1, 1e-6);
  EXPECT_LT(e.a2, 1e-6);
  EXPECT_LT(e.u, 1e-6);
  EXPECT_FALSE(est.no_recurrence);
  for (Index i = 0; i < 3; ++i) EXPECT_NEAR(est.A1_hat.row(i).norm(), 1.0, 1e-12);
}

TEST(GloreeQuadratic, CpWeightIsTwiceOutputNorm) {
  RnnParams p = planted(0.0, 4);
  auto m = oracle_quadratic_moments(p, iid_standard(6), {50, 5, 1, 20});
  auto est = gloree_quadratic(m, 3);
  std::vector<double> w(est.weights.data(), est.weights.data() + 3), t;
  for (Index i = 0; i < 3; ++i) t.push_back(2.0 * p.A2.row(i).norm());
  std::sort(w.begin(), w.end());
  std::sort(t.begin(), t.end());
  for (Index i = 0; i < 3; ++i) EXPECT_NEAR(w[i], t[i], 1e-9);
}

TEST(GloreeQuadratic, SignOfRecurrenceComesFromMixedMoment) {
  RnnParams p = planted(0.3, 5);
  MarkovChainSpec s = scaled_iid(6, 0.3);
  for (double sign : {1.0, -1.0}) {
    RnnParams q = p;
    q.U *= sign;
    auto est = gloree_quadratic(oracle_quadratic_moments(q, s, {200, 6, 1, 20}), 3);
    EXPECT_LT(align_to(est, q).u, 1e-6);
    GloreeOptions no_sign;
    no_sign.fix_signs = false;
    auto raw = gloree_quadratic(oracle_quadratic_moments(q, s, {200, 6, 1, 20}), 3, no_sign);
    // without the mixed moment each row is only known up to sign
    auto e = align_to(raw, q);
    EXPECT_LT(e.a1, 1e-6);
  }
}

TEST(GloreeQuadratic, PinvAndLeastSquaresAgreeForOneUnit) {
  Rng rng(7);
  RnnParams p{unit_rows(1, 3, rng), scalar(0.4),
              Matrix::Constant(1, 2, 0.8), Activation{2, {}}};
  MarkovChainSpec s = scaled_iid(3, 0.5);
  auto m = oracle_quadratic_moments(p, s, {100, 7, 1, 20});
  GloreeOptions pin;
  pin.u_method = UMethod::pinv;
  auto a = gloree_quadratic(m, 1);
  auto b = gloree_quadratic(m, 1, pin);
  EXPECT_NEAR(a.U_hat(0, 0), 0.4, 1e-9);
  EXPECT_NEAR(b.U_hat(0, 0), 0.4, 1e-9);
  EXPECT_GT(b.diagnostics.at("t2_factor_min_cos"), 1.0 - 1e-9);
}

TEST(GloreeQuadratic, PinvPathDeviatesWithSeveralUnits) {
  // The paper-faithful formula ignores the cross pairings; it is kept as a
  // path but is not exact once units interact.
  RnnParams p = planted(0.3, 8);
  MarkovChainSpec s = scaled_iid(6, 0.3);
  auto m = oracle_quadratic_moments(p, s, {200, 8, 1, 20});
  GloreeOptions pin;
  pin.u_method = UMethod::pinv;
  auto b = gloree_quadratic(m, 3, pin);
  EXPECT_LT(align_to(b, p).a1, 1e-6);
  EXPECT_GT(align_to(b, p).u, 1e-3);
}

TEST(GloreeQuadratic, NoRecurrenceFromData) {
  RnnParams p = planted(0.0, 9);
  MarkovChainSpec s = iid_standard(6);
  auto data = rnn_forward(p, sample_markov_chain(s, 500000, 10));
  GloreeOptions o;
  o.moments.workers = 4;
  auto est = gloree_quadratic(data, s, 3, o);
  auto e = align_to(est, p);
  EXPECT_LT(e.a1, 0.1);
  EXPECT_LT(e.a2, 0.1);
  EXPECT_TRUE(est.no_recurrence);
  EXPECT_EQ(est.U_hat.norm(), 0.0);
}

TEST(GloreeQuadratic, NoRecurrenceFromOracle) {
  RnnParams p = planted(0.0, 11);
  auto est = gloree_quadratic(oracle_quadratic_moments(p, iid_standard(6), {50, 1, 1, 20}), 3);
  EXPECT_TRUE(est.no_recurrence);
  EXPECT_LT(align_to(est, p).a1, 1e-9);
}

TEST(GloreeQuadratic, ScalarChainRecoversU) {
  // unit-row convention: (a, u, A2) = (0.5, 0.4, 1) is (1, 0.2, 0.25)
  RnnParams p{scalar(0.5), scalar(0.4), scalar(1.0), Activation{2, {}}};
  MarkovChainSpec s;
  s.W = scalar(0.5);
  s.sigma = 0.4 * std::sqrt(0.75);
  RnnParams c = p;
  canonicalize(c);
  EXPECT_NEAR(c.U(0, 0), 0.2, 1e-15);
  auto data = rnn_forward(p, sample_markov_chain(s, 1000000, 12));
  GloreeOptions o;
  o.moments.workers = 4;
  auto est = gloree_quadratic(data, s, 1, o);
  EXPECT_NEAR(est.U_hat(0, 0), c.U(0, 0), 1e-2);
  EXPECT_NEAR(est.A2_hat(0, 0), c.A2(0, 0), 1e-2);
  // oracle-validated model: exact from population moments
  auto exact = gloree_quadratic(oracle_quadratic_moments(p, s, {100, 1, 1, 20}), 1);
  EXPECT_NEAR(exact.U_hat(0, 0), 0.2, 1e-12);
}

TEST(GloreeQuadratic, RankDeficientOutputIsReported) {
  RnnParams p = planted(0.0, 13);
  p.A2.row(2) = p.A2.row(0);
  auto m = oracle_quadratic_moments(p, iid_standard(6), {20, 1, 1, 20});
  EXPECT_THROW(gloree_quadratic(m, 3), Error);
}

TEST(GloreeQuadratic, HiddenWiderThanOutputIsRejected) {
  RnnParams p = planted(0.0, 14);
  auto m = oracle_quadratic_moments(p, iid_standard(6), {20, 1, 1, 20});
  EXPECT_THROW(gloree_quadratic(m, 5), Error);
}

TEST(GloreeGeneral, QuadraticPathIsIdentical) {
  RnnParams p = planted(0.2, 15);
  MarkovChainSpec s = scaled_iid(6, 0.3);
  auto data = rnn_forward(p, sample_markov_chain(s, 20000, 16));
  auto a = gloree_quadratic(data, s, 3);
  auto b = gloree_general(data, s, 3, 2);
  EXPECT_EQ(a.A1_hat, b.A1_hat);
  EXPECT_EQ(a.A2_hat, b.A2_hat);
  EXPECT_EQ(a.U_hat, b.U_hat);
}

TEST(GloreeGeneral, CubicDirectionsAndWeights) {
  Rng rng(17);
  RnnParams p{unit_rows(2, 3, rng), Matrix::Zero(2, 2), random_gaussian_matrix(2, 2, rng),
              Activation{3, {}}};
  MarkovChainSpec s = scaled_iid(3, 0.5);
  s.drift = Vector::Constant(3, 0.4);
  s.drift(1) = -0.2;
  GloreeOptions o;
  o.recover_u = false;
  auto est = gloree_general(general_moments(p, s, 3, {20000, 18, 4, 20}, false), 2, 3, o);
  EXPECT_TRUE(est.directions_only);
  auto e = align_to(est.A1_hat, est.A1_hat, Matrix::Zero(2, 2), p.A1, p.A1, Matrix::Zero(2, 2));
  EXPECT_LT(e.a1, 1e-6);
  // mu_i = 6 E[a_i x]: measured from a hidden-trajectory average
  const Matrix x = sample_markov_chain(s, 200000, 19);
  const Vector mean_pre = (p.A1 * x).rowwise().mean();
  std::vector<double> w, t;
  for (Index i = 0; i < 2; ++i) {
    Index j = std::abs(est.A1_hat.row(0).dot(p.A1.row(i))) > 0.99 ? 0 : 1;
    w.push_back(est.weights(j));
    t.push_back(6.0 * std::abs(mean_pre(i)) * p.A2.row(i).norm());
    EXPECT_GT(est.weights(j), 0.0);
  }
  EXPECT_NEAR((w[0] / w[1]) / (t[0] / t[1]), 1.0, 0.05);
}

TEST(GloreeGeneral, CubicRecurrenceSign) {
  MarkovChainSpec s = scaled_iid(2, 0.2);
  s.drift = Vector::Constant(2, 0.2);
  Rng rng(20);
  for (double u : {0.3, -0.3}) {
    RnnParams p{unit_rows(1, 2, rng), scalar(u), Matrix::Constant(1, 1, 1.0), Activation{3, {}}};
    auto est = gloree_general(general_moments(p, s, 3, {200, 21, 2, 20}), 1, 3);
    ASSERT_FALSE(est.no_recurrence);
    const double sa = est.A1_hat.row(0).dot(p.A1.row(0)) >= 0 ? 1.0 : -1.0;
    // odd activation: flipping a together with U is not a symmetry, so the
    // direction of U is fixed once A1 is
    EXPECT_NEAR(sa * est.U_hat(0, 0), u > 0 ? 1.0 : -1.0, 1e-9);
  }
}

TEST(GloreeGeneral, UnsupportedOrderIsRejected) {
  RnnParams p = planted(0.0, 22);
  auto data = rnn_forward(p, sample_markov_chain(iid_standard(6), 100, 23));
  EXPECT_THROW(gloree_general(data, iid_standard(6), 3, 4), Error);
}

TEST(GloreeScalar, CubicWeightIsSix) {
  RnnParams p{scalar(1.0), scalar(0.0), scalar(1.0), Activation{3, {}}};
  MarkovChainSpec s = iid_standard(1);
  auto data = scalar_output_forward(p, sample_markov_chain(s, 500000, 24));
  auto est = gloree_scalar(data, s, 1, 3);
  EXPECT_NEAR(est.weights(0), 6.0, 0.6);
  EXPECT_NEAR(std::abs(est.A1_hat(0, 0)), 1.0, 1e-12);
}

TEST(GloreeScalar, QuadraticIsRejected) {
  RnnParams p{scalar(1.0), scalar(0.0), scalar(1.0), Activation{2, {}}};
  auto data = rnn_forward(p, sample_markov_chain(iid_standard(1), 100, 25));
  try {
    gloree_scalar(data, iid_standard(1), 1, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "scalar output needs l ≥ 3: a matrix decomposition is not unique");
  }
}

TEST(GloreeScalar, ZeroOutputWeightDropsComponent) {
  Rng rng(26);
  RnnParams p{unit_rows(2, 3, rng), Matrix::Zero(2, 2), Matrix(2, 1), Activation{3, {}}};
  p.A2 << 1.0, 0.0;
  auto s3 = population_moment_oracle(p, iid_standard(3), MomentRequest::s3_scalar(), {50, 1, 1, 20});
  auto est = gloree_scalar(s3.value, 2, 3);
  EXPECT_EQ(est.diagnostics.at("detected_rank"), 1.0);
  EXPECT_EQ(est.A1_hat.row(1).norm(), 0.0);
  EXPECT_LT((est.A1_hat.row(0) - p.A1.row(0)).norm(), 1e-8);
}

TEST(GloreeScalar, PopulationTwoUnits) {
  Rng rng(27);
  RnnParams p{unit_rows(2, 3, rng), Matrix::Zero(2, 2), Matrix(2, 1), Activation{3, {}}};
  p.A2 << 1.0, -0.7;
  auto s3 = population_moment_oracle(p, iid_standard(3), MomentRequest::s3_scalar(), {50, 1, 1, 20});
  auto est = gloree_scalar(s3.value, 2, 3);
  for (Index i = 0; i < 2; ++i) {
    double best = 0;
    for (Index j = 0; j < 2; ++j) best = std::max(best, std::abs(est.A1_hat.row(j).dot(p.A1.row(i))));
    EXPECT_LT(std::acos(std::min(1.0, best)), 1e-6);
  }
}

TEST(GloreeLinear, ExactScalarBlocks) {
  auto est = gloree_linear(linear_blocks(scalar(0.5), scalar(0.5), scalar(1.0), 3), scalar(0.5));
  EXPECT_NEAR(est.A2_hat(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(est.U_hat(0, 0), 0.5, 1e-15);
}

TEST(GloreeLinear, NoRecurrenceGivesZeroU) {
  auto est = gloree_linear(linear_blocks(scalar(0.5), scalar(0.0), scalar(1.0), 2), scalar(0.5));
  EXPECT_EQ(est.U_hat(0, 0), 0.0);
}

TEST(GloreeLinear, EstimatedBlocksRecoverU) {
  RnnParams p{scalar(0.5), scalar(0.5), scalar(1.0), Activation{1, {}}};
  MarkovChainSpec s = iid_standard(1);
  auto data = rnn_forward(p, sample_markov_chain(s, 100000, 28));
  auto est = gloree_linear(data, s, 3, scalar(0.5));
  EXPECT_NEAR(est.U_hat(0, 0), 0.5, 0.025);
  // forward check on the blocks not used by the recovery
  auto pred = linear_blocks(est.A1_hat, est.U_hat, est.A2_hat, 3);
  for (Index k = 2; k <= 3; ++k) EXPECT_NEAR(pred[k](0, 0), est.blocks[k](0, 0), 0.02);
}

TEST(GloreeLinear, WithoutA1OnlyBlocks) {
  auto est = gloree_linear(linear_blocks(scalar(0.5), scalar(0.5), scalar(1.0), 2), std::nullopt);
  EXPECT_TRUE(est.blocks_only);
  EXPECT_EQ(est.blocks.size(), 3u);
}

TEST(GloreeLinear, SingularA1IsRejected) {
  EXPECT_THROW(gloree_linear(linear_blocks(scalar(0.5), scalar(0.5), scalar(1.0), 2), scalar(0.0)),
               Error);
}

namespace {

BrnnParams planted_brnn(double u, double v, std::uint64_t seed) {
  Rng rng(seed);
  BrnnParams p;
  p.A1 = unit_rows(2, 5, rng);
  p.B1 = unit_rows(2, 5, rng);
  p.U = u > 0 ? with_spectral_norm(random_gaussian_matrix(2, 2, rng), u) : Matrix::Zero(2, 2);
  p.V = v > 0 ? with_spectral_norm(random_gaussian_matrix(2, 2, rng), v) : Matrix::Zero(2, 2);
  p.A2 = random_gaussian_matrix(4, 4, rng);
  p.act = Activation{2, {}};
  return p;
}

Aligned brnn_error(const BrnnEstimate& e, const BrnnParams& p) {
  auto f = align_to(e.A1_hat, e.A2_hat.topRows(2), e.U_hat, p.A1, p.A2.topRows(2), p.U);
  auto b = align_to(e.B1_hat, e.A2_hat.bottomRows(2), e.V_hat, p.B1, p.A2.bottomRows(2), p.V);
  return {std::max(f.a1, b.a1), std::max(f.a2, b.a2), std::max(f.u, b.u)};
}

}  // namespace

TEST(GloreeBrnn, PopulationRecovery) {
  BrnnParams p = planted_brnn(0.3, 0.25, 29);
  MarkovChainSpec s = scaled_iid(5, 0.3);
  auto est = gloree_brnn(oracle_brnn_moments(p, s, {100, 30, 1, 20}), 2);
  auto e = brnn_error(est, p);
  EXPECT_LT(e.a1, 1e-6);
  EXPECT_LT(e.a2, 1e-6);
  EXPECT_LT(e.u, 1e-6);
  EXPECT_LT(est.diagnostics.at("t_tilde_offdiag"), 1e-8);
}

TEST(GloreeBrnn, IdentityPaddedOutputWithoutRecurrence) {
  BrnnParams p = planted_brnn(0.0, 0.0, 31);
  p.A2 = Matrix::Identity(4, 5);
  auto est = gloree_brnn(oracle_brnn_moments(p, scaled_iid(5, 0.5), {50, 32, 1, 20}), 2);
  EXPECT_TRUE(est.no_recurrence);
  // the halves follow the output coordinates, so the split is the planted one
  for (Index i = 0; i < 2; ++i) {
    EXPECT_LT(std::min((est.A1_hat.row(i) - p.A1.row(i)).norm(),
                       (est.A1_hat.row(i) + p.A1.row(i)).norm()), 1e-8);
    EXPECT_LT(std::min((est.B1_hat.row(i) - p.B1.row(i)).norm(),
                       (est.B1_hat.row(i) + p.B1.row(i)).norm()), 1e-8);
  }
}

TEST(GloreeBrnn, DegenerateBackwardMatchesQuadratic) {
  BrnnParams p = planted_brnn(0.3, 0.0, 33);
  p.B1.setZero();
  MarkovChainSpec s = scaled_iid(5, 0.3);
  auto est = gloree_brnn(oracle_brnn_moments(p, s, {100, 34, 1, 20}), 2);
  EXPECT_EQ(est.backward_rank, 0u);
  EXPECT_EQ(est.B1_hat.norm(), 0.0);
  auto q = gloree_quadratic(oracle_quadratic_moments(p.forward_half(), s, {100, 34, 1, 20}), 2);
  auto e = align_to(est.A1_hat, est.A2_hat.topRows(2), est.U_hat, q.A1_hat, q.A2_hat, q.U_hat);
  EXPECT_LT(e.a1, 1e-10);
  EXPECT_LT(e.a2, 1e-10);
  EXPECT_LT(e.u, 1e-10);
}

TEST(GloreeBrnn, TimeReversalSwapsHalves) {
  BrnnParams p = planted_brnn(0.3, 0.25, 35);
  MarkovChainSpec s = scaled_iid(5, 0.3);
  BrnnParams r = p;
  std::swap(r.A1, r.B1);
  std::swap(r.U, r.V);
  r.A2.topRows(2) = p.A2.bottomRows(2);
  r.A2.bottomRows(2) = p.A2.topRows(2);
  auto a = gloree_brnn(oracle_brnn_moments(p, s, {100, 36, 1, 20}), 2);
  auto b = gloree_brnn(oracle_brnn_moments(r, s, {100, 36, 1, 20}), 2);
  auto f = align_to(b.B1_hat, b.A2_hat.bottomRows(2), b.V_hat, a.A1_hat, a.A2_hat.topRows(2), a.U_hat);
  auto g = align_to(b.A1_hat, b.A2_hat.topRows(2), b.U_hat, a.B1_hat, a.A2_hat.bottomRows(2), a.V_hat);
  EXPECT_LT(std::max(f.a1, g.a1), 1e-8);
  EXPECT_LT(std::max(f.u, g.u), 1e-8);
}

TEST(GloreeBrnn, NarrowOutputIsRejected) {
  BrnnParams p = planted_brnn(0.0, 0.0, 37);
  Rng rng(38);
  p.A2 = random_gaussian_matrix(4, 3, rng);
  auto data = brnn_forward(p, sample_markov_chain(iid_standard(5), 100, 39));
  try {
    gloree_brnn(data, iid_standard(5), 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "output dimension insufficient for BRNN identifiability");
  }
}
