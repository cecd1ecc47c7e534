#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "spectral_rnn/cp.hpp"
#include "spectral_rnn/sequence.hpp"

using namespace srnn;

namespace {

DenseTensor planted(const Vector& w, const Matrix& A, const Matrix& B, const Matrix& C) {
  DenseTensor T({static_cast<Index>(A.rows()), static_cast<Index>(B.rows()),
                 static_cast<Index>(C.rows())});
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    DenseTensor o = outer({A.col(i), B.col(i), C.col(i)});
    o *= w(i);
    T += o;
  }
  return T;
}

Matrix unit_cols(Matrix M) {
  for (Eigen::Index j = 0; j < M.cols(); ++j) M.col(j).normalize();
  return M;
}

// Max column error of est against truth over the best permutation and
// per-column sign (exhaustive; k is small here).
double aligned_error(const Matrix& est, const Matrix& truth) {
  const Index k = truth.cols();
  std::vector<Index> p(k);
  std::iota(p.begin(), p.end(), Index{0});
  double best = INFINITY;
  do {
    double worst = 0.0;
    for (Index j = 0; j < k; ++j) {
      const double e = std::min((est.col(p[j]) - truth.col(j)).norm(),
                                (est.col(p[j]) + truth.col(j)).norm());
      worst = std::max(worst, e);
    }
    best = std::min(best, worst);
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

// Permutation that aligns est to truth (by the first factor).
std::vector<Index> match(const Matrix& est, const Matrix& truth) {
  const Index k = truth.cols();
  std::vector<Index> p(k), best_p;
  std::iota(p.begin(), p.end(), Index{0});
  double best = INFINITY;
  do {
    double tot = 0.0;
    for (Index j = 0; j < k; ++j)
      tot += std::min((est.col(p[j]) - truth.col(j)).norm(), (est.col(p[j]) + truth.col(j)).norm());
    if (tot < best) {
      best = tot;
      best_p = p;
    }
  } while (std::next_permutation(p.begin(), p.end()));
  return best_p;
}

double angle(const Vector& a, const Vector& b) {
  return std::acos(std::min(1.0, std::abs(a.dot(b)) / (a.norm() * b.norm())));
}

}  // namespace

TEST(Symmetrize, IdentityLeavesTensorUnchanged) {
  Rng rng(1);
  DenseTensor T({3, 3, 3});
  for (double& v : T.data) v = std::normal_distribution<double>()(rng);
  EXPECT_EQ(symmetrize(T, Matrix::Identity(3, 3)).data, T.data);
}

TEST(Symmetrize, DimensionMismatchIsRejected) {
  DenseTensor T({3, 2, 2});
  EXPECT_THROW(symmetrize(T, Matrix::Identity(2, 2)), Error);
}

TEST(Symmetrize, PlantedMapToSymmetricComponents) {
  Rng rng(2);
  Matrix B = random_gaussian_matrix(2, 2, rng);
  Matrix C = unit_cols(random_gaussian_matrix(2, 2, rng));
  Vector w(2);
  w << 1.5, 0.7;
  DenseTensor T = planted(w, B, C, C);
  // D^T b_i = c_i / w_i
  Matrix D = (C * pinv(B * w.asDiagonal())).transpose();
  DenseTensor S = symmetrize(T, D);
  EXPECT_LT((S - planted(Vector::Ones(2), C, C, C)).norm(), 1e-12);
  EXPECT_LT(symmetry_residual(S), 1e-8);
}

TEST(Symmetrize, FirstMomentRouteWithOrthonormalComponents) {
  Rng rng(3);
  Matrix B = random_gaussian_matrix(4, 3, rng);
  Matrix C = random_orthonormal(5, 3, rng);
  Vector w(3), beta(3);
  w << 2.0, 1.0, 0.5;
  beta << 0.8, -1.1, 0.6;
  DenseTensor T = planted(w, B, C, C);
  Matrix M1 = B * beta.asDiagonal() * C.transpose();
  DenseTensor S = symmetrize(T, symmetrization_matrix(M1));
  EXPECT_LT(symmetry_residual(S), 1e-8);
}

TEST(Whiten, OrthonormalPlantedGivesOrthogonalCore) {
  Rng rng(4);
  Matrix C = random_orthonormal(5, 3, rng);
  Vector w(3);
  w << 3.0, 2.0, 1.0;
  auto wh = whiten(planted(w, C, C, C), 3);
  Matrix V = unit_cols(wh.W.transpose() * C);
  EXPECT_LT((V.transpose() * V - Matrix::Identity(3, 3)).norm(), 1e-10);
}

TEST(Whiten, NonOrthogonalPlantedBecomesOrthonormal) {
  Rng rng(5);
  Matrix C = unit_cols(random_gaussian_matrix(6, 3, rng));
  Vector w(3);
  w << 1.0, 2.0, 1.5;
  auto wh = whiten(planted(w, C, C, C), 3);
  EXPECT_TRUE(wh.sign_definite);
  Matrix V = unit_cols(wh.W.transpose() * C);
  EXPECT_LT((V.transpose() * V - Matrix::Identity(3, 3)).norm(), 1e-8);
}

TEST(Whiten, SingularSurrogateIsReported) {
  Rng rng(6);
  Matrix C = unit_cols(random_gaussian_matrix(3, 2, rng));
  DenseTensor T = planted(Vector::Ones(2), C, C, C);
  try {
    whiten(T, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "rank deficiency; check full-rank assumption");
  }
}

TEST(PowerMethod, OrthogonalPlantedPair) {
  DenseTensor T = planted((Vector(2) << 3.0, 1.0).finished(), Matrix::Identity(2, 2),
                          Matrix::Identity(2, 2), Matrix::Identity(2, 2));
  auto pr = power_method(T, 2, 20, 200, 1e-12);
  EXPECT_NEAR(pr.lambda(0), 3.0, 1e-12);
  EXPECT_NEAR(pr.lambda(1), 1.0, 1e-12);
  EXPECT_LT((pr.vectors.col(0) - Vector::Unit(2, 0)).norm(), 1e-12);
  EXPECT_LT((pr.vectors.col(1) - Vector::Unit(2, 1)).norm(), 1e-12);
}

TEST(PowerMethod, RankOneConvergesQuickly) {
  Rng rng(7);
  Vector u = random_gaussian_matrix(4, 1, rng).col(0).normalized();
  DenseTensor T = outer({u, u, u});
  T *= 2.5;
  auto pr = power_method(T, 1, 1, 30, 1e-13);
  EXPECT_TRUE(pr.converged);
  EXPECT_LE(pr.iterations, 30);
  EXPECT_NEAR(std::abs(pr.lambda(0)), 2.5, 1e-10);
  EXPECT_LT(angle(pr.vectors.col(0), u), 1e-10);
}

TEST(PowerMethod, OrthogonalRankFour) {
  Rng rng(8);
  Matrix Q = random_orthonormal(4, 4, rng);
  Vector w(4);
  w << 4.0, 3.0, 2.0, 1.0;
  DenseTensor T = planted(w, Q, Q, Q);
  auto pr = power_method(T, 4, 40, 200, 1e-12, 9, 3);
  for (Index j = 0; j < 4; ++j) {
    EXPECT_NEAR(std::abs(pr.lambda(j)), w(j), 1e-9);
    EXPECT_LT(angle(pr.vectors.col(j), Q.col(j)), 1e-8);
  }
  // Deflated terms plus remainder rebuild the input.
  DenseTensor R = pr.deflated;
  for (Index j = 0; j < 4; ++j) {
    DenseTensor o = outer({pr.vectors.col(j), pr.vectors.col(j), pr.vectors.col(j)});
    o *= pr.lambda(j);
    R += o;
  }
  EXPECT_LT((R - T).norm(), 1e-10);
}

TEST(PowerMethod, DeterministicAcrossWorkers) {
  Rng rng(10);
  Matrix Q = random_orthonormal(5, 3, rng);
  DenseTensor T = planted((Vector(3) << 2.0, 1.5, 1.0).finished(), Q, Q, Q);
  auto a = power_method(T, 3, 30, 100, 1e-12, 4, 1);
  auto b = power_method(T, 3, 30, 100, 1e-12, 4, 6);
  EXPECT_EQ(a.lambda, b.lambda);
  EXPECT_EQ(a.vectors, b.vectors);
}

TEST(Decompose, PartiallySymmetricPlanted) {
  Rng rng(11);
  Matrix B = unit_cols(random_gaussian_matrix(4, 2, rng));
  Matrix C = unit_cols(random_gaussian_matrix(5, 2, rng));
  Vector w(2);
  w << 2.0, 1.3;
  DenseTensor T = planted(w, B, C, C);
  CpOptions o;
  o.rank = 2;
  auto cp = decompose(T, std::nullopt, o);
  EXPECT_LT(aligned_error(cp.R1, B), 1e-6);
  EXPECT_LT(aligned_error(cp.R2, C), 1e-6);
  EXPECT_LT(cp.residual, 1e-8);
  EXPECT_LT((cp.R2 - cp.R3).norm(), 1e-8);  // symmetric pairs come out equal
  for (Index j = 0; j < 2; ++j) EXPECT_GT(cp.weights(j), 0.0);
}

TEST(Decompose, AsymmetricRankThree) {
  Rng rng(12);
  Matrix A = unit_cols(random_gaussian_matrix(8, 3, rng));
  Matrix B = unit_cols(random_gaussian_matrix(8, 3, rng));
  Matrix C = unit_cols(random_gaussian_matrix(8, 3, rng));
  Vector w(3);
  w << 3.0, 2.0, 1.0;
  DenseTensor T = planted(w, A, B, C);
  CpOptions o;
  o.rank = 3;
  auto cp = decompose(T, std::nullopt, o);
  EXPECT_LT(aligned_error(cp.R1, A), 1e-6);
  EXPECT_LT(aligned_error(cp.R2, B), 1e-6);
  EXPECT_LT(aligned_error(cp.R3, C), 1e-6);
  EXPECT_LT(cp.residual, 1e-8);
  EXPECT_LT((cp.reconstruct() - T).norm() / T.norm(), 1e-8);
}

TEST(Decompose, OrthogonalPlantedIsExact) {
  Rng rng(13);
  Matrix Q = random_orthonormal(6, 3, rng);
  Vector w(3);
  w << 3.0, 2.0, 1.0;
  DenseTensor T = planted(w, Q, Q, Q);
  CpOptions o;
  o.rank = 3;
  auto cp = decompose(T, std::nullopt, o);
  EXPECT_LT(aligned_error(cp.R1, Q), 1e-10);
  for (Index j = 0; j < 3; ++j) EXPECT_NEAR(std::abs(cp.weights(j)), w(j), 1e-10);
}

TEST(Decompose, NoiseRobustness) {
  Rng rng(14);
  Matrix A = unit_cols(random_gaussian_matrix(8, 3, rng));
  Matrix B = unit_cols(random_gaussian_matrix(8, 3, rng));
  Matrix C = unit_cols(random_gaussian_matrix(8, 3, rng));
  DenseTensor T = planted((Vector(3) << 3.0, 2.0, 1.0).finished(), A, B, C);
  DenseTensor N(T.dims);
  std::normal_distribution<double> nd;
  for (double& v : N.data) v = nd(rng);
  N *= 1e-3 * T.norm() / N.norm();
  CpOptions o;
  o.rank = 3;
  auto cp = decompose(T + N, std::nullopt, o);
  EXPECT_LT(aligned_error(cp.R1, A), 1e-2);
  EXPECT_LT(aligned_error(cp.R2, B), 1e-2);
  EXPECT_LT(aligned_error(cp.R3, C), 1e-2);
}

TEST(Decompose, ZeroTensorHasRankZero) {
  DenseTensor T({3, 3, 3});
  auto cp = decompose(T, std::nullopt);
  EXPECT_EQ(cp.rank, 0u);
  EXPECT_EQ(cp.R1.cols(), 0);
}

TEST(Decompose, AutomaticRank) {
  Rng rng(15);
  Matrix B = unit_cols(random_gaussian_matrix(4, 2, rng));
  Matrix C = unit_cols(random_gaussian_matrix(4, 2, rng));
  DenseTensor T = planted((Vector(2) << 1.0, 0.5).finished(), B, C, C);
  auto cp = decompose(T, std::nullopt);
  EXPECT_EQ(cp.rank, 2u);
  EXPECT_LT(cp.residual, 1e-8);
}

TEST(Decompose, SymmetricInputKeepsSignInWeight) {
  Rng rng(16);
  Matrix C = unit_cols(random_gaussian_matrix(5, 3, rng));
  Vector w(3);
  w << 2.0, -1.5, 1.0;
  DenseTensor T = planted(w, C, C, C);
  CpOptions o;
  o.rank = 3;
  auto cp = decompose(T, std::nullopt, o);
  EXPECT_LT(cp.residual, 1e-8);
  EXPECT_EQ(cp.R1, cp.R2);
  EXPECT_EQ(cp.R2, cp.R3);
  auto p = match(cp.R2, C);
  for (Index j = 0; j < 3; ++j) {
    const double s = cp.R2.col(p[j]).dot(C.col(j)) > 0 ? 1.0 : -1.0;
    EXPECT_NEAR(cp.weights(p[j]), s * w(j), 1e-8);  // odd order: sign moves with the vector
  }
}

TEST(Decompose, PermutedSymmetricTensorGivesSameComponents) {
  Rng rng(17);
  Matrix C = unit_cols(random_gaussian_matrix(4, 2, rng));
  DenseTensor T = planted((Vector(2) << 1.0, 2.0).finished(), C, C, C);
  DenseTensor P = permute(T, {2, 0, 1});
  CpOptions o;
  o.rank = 2;
  auto a = decompose(T, std::nullopt, o);
  auto b = decompose(P, std::nullopt, o);
  EXPECT_LT((a.weights - b.weights).norm(), 1e-10);
  EXPECT_LT((a.R1 - b.R1).norm(), 1e-8);
}

TEST(Decompose, UsesSymmetrizationRouteWhenItIsExact) {
  Rng rng(18);
  Matrix B = random_gaussian_matrix(4, 3, rng);
  Matrix C = random_orthonormal(5, 3, rng);
  Vector w(3);
  w << 2.0, 1.0, 0.5;
  DenseTensor T = planted(w, B, C, C);
  Matrix M1 = B * (Vector(3) << 0.8, -1.1, 0.6).finished().asDiagonal() * C.transpose();
  CpOptions o;
  o.rank = 3;
  auto cp = decompose(T, M1, o);
  EXPECT_EQ(cp.path, "symmetrization");
  EXPECT_LT(cp.residual, 1e-8);
  EXPECT_LT(aligned_error(cp.R2, C), 1e-8);
}

TEST(Decompose, IllConditionedFirstMomentFallsBack) {
  Rng rng(19);
  Matrix B = unit_cols(random_gaussian_matrix(4, 2, rng));
  Matrix C = unit_cols(random_gaussian_matrix(4, 2, rng));
  DenseTensor T = planted((Vector(2) << 1.0, 0.6).finished(), B, C, C);
  CpOptions o;
  o.rank = 2;
  auto cp = decompose(T, Matrix::Zero(4, 4), o);
  EXPECT_NE(cp.path, "symmetrization");
  EXPECT_LT(aligned_error(cp.R2, C), 1e-6);
}

TEST(Decompose, RankAboveDimensionsIsRejected) {
  DenseTensor T({3, 2, 2});
  T.data[0] = 1.0;
  CpOptions o;
  o.rank = 3;
  EXPECT_THROW(decompose(T, std::nullopt, o), Error);
}

TEST(Decompose, DeterministicAcrossWorkers) {
  Rng rng(20);
  Matrix B = unit_cols(random_gaussian_matrix(4, 3, rng));
  Matrix C = unit_cols(random_gaussian_matrix(5, 3, rng));
  DenseTensor T = planted((Vector(3) << 2.0, 1.0, 0.5).finished(), B, C, C);
  CpOptions o;
  o.rank = 3;
  auto a = decompose(T, std::nullopt, o);
  o.workers = 5;
  auto b = decompose(T, std::nullopt, o);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.R1, b.R1);
}
