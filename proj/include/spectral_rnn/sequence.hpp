#pragma once

// Ground-truth generators: linear-Gaussian Markov inputs and forward passes
// of the IO-RNN, the bidirectional RNN and the linear RNN.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "error.hpp"
#include "parallel.hpp"
#include "tensor.hpp"

namespace srnn {

// x_t = W x_{t-1} + b + sigma * eps_t. The drift b is empty unless a
// non-centred chain is requested.
struct MarkovChainSpec {
  Matrix W;
  double sigma = 1.0;
  Vector drift;
  bool stationary_init = true;
  Vector init_mean;
  Matrix init_cov;

  Index d_x() const { return static_cast<Index>(W.rows()); }
  bool has_drift() const { return drift.size() > 0; }
  Vector drift_or_zero() const { return has_drift() ? drift : Vector::Zero(W.rows()); }

  void validate() const {
    require(W.rows() > 0 && W.rows() == W.cols(), "sequence_models",
            "transition matrix W must be square and non-empty", ErrorKind::config);
    require(W.allFinite(), "sequence_models", "W has non-finite entries", ErrorKind::config);
    require(sigma > 0.0 && std::isfinite(sigma), "sequence_models",
            "noise scale sigma must be positive", ErrorKind::config);
    require(spectral_norm(W) < 1.0, "sequence_models",
            "spectral norm of W must be below 1", ErrorKind::config);
    require(!has_drift() || drift.size() == W.rows(), "sequence_models",
            "drift has the wrong dimension", ErrorKind::config);
    if (!stationary_init) {
      require(init_mean.size() == W.rows() && init_cov.rows() == W.rows() &&
                  init_cov.cols() == W.rows(),
              "sequence_models", "explicit init has the wrong dimension",
              ErrorKind::config);
    }
  }
};

inline MarkovChainSpec iid_standard(Index d) {
  MarkovChainSpec s;
  s.W = Matrix::Zero(d, d);
  s.sigma = 1.0;
  return s;
}

inline Vector stationary_mean(const MarkovChainSpec& spec) {
  const Index d = spec.d_x();
  if (!spec.has_drift()) return Vector::Zero(d);
  return (Matrix::Identity(d, d) - spec.W).partialPivLu().solve(spec.drift);
}

inline Matrix stationary_covariance(const MarkovChainSpec& spec) {
  require(spectral_norm(spec.W) < 1.0, "sequence_models",
          "spectral norm of W must be below 1");
  const Index d = spec.d_x();
  const Matrix Q = spec.sigma * spec.sigma * Matrix::Identity(d, d);
  Matrix S = Q;
  for (long it = 0; it < 1000000; ++it) {
    Matrix next = spec.W * S * spec.W.transpose() + Q;
    const double delta = (next - S).cwiseAbs().maxCoeff();
    S = std::move(next);
    if (delta < 1e-12) return 0.5 * (S + S.transpose());
  }
  fail("sequence_models",
       "stationary covariance did not converge; ||W|| is too close to 1");
}

inline Matrix sample_gaussian(const Vector& mean, const Matrix& cov, Index n, Rng& rng) {
  const Index d = mean.size();
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  Matrix L = es.eigenvectors() *
             es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix X(d, n);
  for (Index t = 0; t < n; ++t) {
    Vector z(d);
    for (Index i = 0; i < d; ++i) z(i) = nd(rng);
    X.col(t) = mean + L * z;
  }
  return X;
}

// Returns a d_x x n matrix; column t is x_{t+1}.
inline Matrix sample_markov_chain(const MarkovChainSpec& spec, Index n, std::uint64_t seed) {
  spec.validate();
  require(n >= 1, "sequence_models", "sequence length must be at least 1", ErrorKind::config);
  const Index d = spec.d_x();
  Rng rng(seed);
  Matrix X(d, n);
  if (spec.stationary_init) {
    X.col(0) = sample_gaussian(stationary_mean(spec), stationary_covariance(spec), 1, rng);
  } else {
    X.col(0) = sample_gaussian(spec.init_mean, spec.init_cov, 1, rng);
  }
  std::normal_distribution<double> nd(0.0, 1.0);
  const Vector b = spec.drift_or_zero();
  Vector eps(d);
  for (Index t = 1; t < n; ++t) {
    for (Index i = 0; i < d; ++i) eps(i) = nd(rng);
    X.col(t) = spec.W * X.col(t - 1) + b + spec.sigma * eps;
  }
  return X;
}

// Activation poly_l. An empty coefficient list is the monomial z^l;
// otherwise coefficients c_0..c_l of a general polynomial.
struct Activation {
  int l = 2;
  std::vector<double> coeffs;

  double operator()(double z) const {
    if (coeffs.empty()) {
      double r = 1.0;
      for (int i = 0; i < l; ++i) r *= z;
      return r;
    }
    double r = 0.0;
    for (std::size_t i = coeffs.size(); i-- > 0;) r = r * z + coeffs[i];
    return r;
  }
  bool monomial() const { return coeffs.empty(); }
};

struct RnnParams {
  Matrix A1;  // d_h x d_x
  Matrix U;   // d_h x d_h
  Matrix A2;  // d_h x d_y
  Activation act;

  Index d_h() const { return A1.rows(); }
  Index d_x() const { return A1.cols(); }
  Index d_y() const { return A2.cols(); }
  int l() const { return act.l; }

  void validate_shapes() const {
    require(A1.rows() > 0 && A1.cols() > 0, "sequence_models", "A1 is empty", ErrorKind::config);
    require(U.rows() == A1.rows() && U.cols() == A1.rows(), "sequence_models",
            "U must be d_h x d_h", ErrorKind::config);
    require(A2.rows() == A1.rows() && A2.cols() > 0, "sequence_models",
            "A2 must be d_h x d_y", ErrorKind::config);
    require(act.l >= 1, "sequence_models", "activation order must be at least 1",
            ErrorKind::config);
    require(act.coeffs.empty() || act.coeffs.size() == static_cast<std::size_t>(act.l) + 1,
            "sequence_models", "polynomial coefficients must number l+1", ErrorKind::config);
  }
  double constraint_value() const { return spectral_norm(A1) + spectral_norm(U); }
  bool satisfies_contraction() const { return act.l < 2 || constraint_value() <= 1.0 + 1e-12; }
};

struct BrnnParams {
  Matrix A1, B1;  // d_h x d_x
  Matrix U, V;    // d_h x d_h
  Matrix A2;      // 2 d_h x d_y
  Activation act;

  Index d_h() const { return A1.rows(); }
  Index d_x() const { return A1.cols(); }
  Index d_y() const { return A2.cols(); }

  void validate_shapes() const {
    const Index dh = A1.rows();
    require(dh > 0 && B1.rows() == dh && B1.cols() == A1.cols(), "sequence_models",
            "A1 and B1 must both be d_h x d_x", ErrorKind::config);
    require(U.rows() == dh && U.cols() == dh && V.rows() == dh && V.cols() == dh,
            "sequence_models", "U and V must be d_h x d_h", ErrorKind::config);
    require(A2.rows() == 2 * dh && A2.cols() > 0, "sequence_models",
            "A2 must be 2 d_h x d_y", ErrorKind::config);
  }
  bool satisfies_contraction() const {
    if (act.l < 2) return true;
    return spectral_norm(A1) + spectral_norm(U) <= 1.0 + 1e-12 &&
           spectral_norm(B1) + spectral_norm(V) <= 1.0 + 1e-12;
  }
  RnnParams forward_half() const {
    return {A1, U, A2.topRows(A1.rows()), act};
  }
  RnnParams backward_half() const {
    return {B1, V, A2.bottomRows(A1.rows()), act};
  }
};

struct SequenceData {
  Matrix x;  // d_x x n
  Matrix y;  // d_y x n
  Matrix h;  // d_h x n, hidden trajectory (oracles only)
  Matrix z;  // d_h x n, backward trajectory for BRNN data

  Index n() const { return x.cols(); }
};

namespace detail {

// One recurrent chain. `reverse` runs from the last position backwards.
inline Matrix run_chain(const Matrix& A, const Matrix& R, const Activation& act,
                        const Matrix& x, const Vector& h0, bool reverse,
                        bool check_bound) {
  const Index n = x.cols();
  const Index dh = A.rows();
  Matrix H(dh, n);
  Vector prev = h0;
  bool inputs_bounded = check_bound && h0.norm() <= 1.0 + 1e-12;
  for (Index k = 0; k < n; ++k) {
    const Index t = reverse ? n - 1 - k : k;
    Vector pre = A * x.col(t) + R * prev;
    Vector h(dh);
    for (Index i = 0; i < dh; ++i) h(i) = act(pre(i));
    if (!h.allFinite()) fail("sequence_models", "state blow-up");
    if (inputs_bounded) {
      if (x.col(t).norm() > 1.0) {
        inputs_bounded = false;
      } else if (h.norm() > 1.0 + 1e-9) {
        fail("sequence_models",
             "hidden state left the unit ball although Assumption 1 holds");
      }
    }
    H.col(t) = h;
    prev = std::move(h);
  }
  return H;
}

inline void add_noise(Matrix& y, double noise, std::uint64_t seed) {
  if (noise <= 0.0) return;
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, noise);
  for (Eigen::Index j = 0; j < y.cols(); ++j)
    for (Eigen::Index i = 0; i < y.rows(); ++i) y(i, j) += nd(rng);
}

}  // namespace detail

inline SequenceData rnn_forward(const RnnParams& p, const Matrix& x,
                                std::optional<Vector> h0 = std::nullopt,
                                double noise = 0.0, std::uint64_t noise_seed = 0) {
  p.validate_shapes();
  require(static_cast<Index>(x.rows()) == p.d_x(), "sequence_models",
          "input dimension does not match A1", ErrorKind::config);
  Vector start = h0 ? *h0 : Vector::Zero(p.d_h());
  require(static_cast<Index>(start.size()) == p.d_h(), "sequence_models",
          "h0 has the wrong dimension", ErrorKind::config);
  const bool check = p.l() >= 2 && p.act.monomial() && p.satisfies_contraction();
  SequenceData s;
  s.x = x;
  s.h = detail::run_chain(p.A1, p.U, p.act, x, start, false, check);
  s.y = p.A2.transpose() * s.h;
  detail::add_noise(s.y, noise, noise_seed);
  return s;
}

inline SequenceData brnn_forward(const BrnnParams& p, const Matrix& x, double noise = 0.0,
                                 std::uint64_t noise_seed = 0) {
  p.validate_shapes();
  require(static_cast<Index>(x.rows()) == p.d_x(), "sequence_models",
          "input dimension does not match A1", ErrorKind::config);
  const bool check = p.act.l >= 2 && p.act.monomial() && p.satisfies_contraction();
  SequenceData s;
  s.x = x;
  const Vector zero = Vector::Zero(p.d_h());
  s.h = detail::run_chain(p.A1, p.U, p.act, x, zero, false, check);
  s.z = detail::run_chain(p.B1, p.V, p.act, x, zero, true, check);
  Matrix hz(2 * p.d_h(), x.cols());
  hz << s.h, s.z;
  s.y = p.A2.transpose() * hz;
  detail::add_noise(s.y, noise, noise_seed);
  return s;
}

inline SequenceData scalar_output_forward(const RnnParams& p, const Matrix& x,
                                          double noise = 0.0, std::uint64_t noise_seed = 0) {
  require(p.act.l >= 3, "sequence_models", "scalar output requires l ≥ 3", ErrorKind::config);
  require(p.d_y() == 1, "sequence_models", "scalar output requires d_y = 1", ErrorKind::config);
  return rnn_forward(p, x, std::nullopt, noise, noise_seed);
}

// Rescales the parameters so every row of A1 has unit norm while leaving
// the input-output map unchanged (monomial activation). Returns the row
// norms that were divided out.
inline Vector canonicalize(RnnParams& p) {
  const Index dh = p.d_h();
  Vector s(dh);
  for (Index i = 0; i < dh; ++i) {
    s(i) = p.A1.row(i).norm();
    require(s(i) > 0.0, "sequence_models", "A1 has a zero row");
  }
  Vector sl = s.array().pow(p.l());
  for (Index i = 0; i < dh; ++i) p.A1.row(i) /= s(i);
  for (Index i = 0; i < dh; ++i)
    for (Index j = 0; j < dh; ++j) p.U(i, j) *= sl(j) / s(i);
  for (Index i = 0; i < dh; ++i) p.A2.row(i) *= sl(i);
  return s;
}

inline Matrix random_gaussian_matrix(Index r, Index c, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix M(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) M(i, j) = nd(rng);
  return M;
}

// r x c matrix with orthonormal rows (r <= c) or columns (r > c).
inline Matrix random_orthonormal(Index r, Index c, Rng& rng) {
  Matrix G = random_gaussian_matrix(std::max(r, c), std::min(r, c), rng);
  Eigen::HouseholderQR<Matrix> qr(G);
  Matrix Q = qr.householderQ() * Matrix::Identity(G.rows(), G.cols());
  // fix the sign ambiguity of QR so the result is a deterministic function of G
  Matrix R = qr.matrixQR().topRows(G.cols()).triangularView<Eigen::Upper>();
  for (Eigen::Index k = 0; k < Q.cols(); ++k)
    if (R(k, k) < 0) Q.col(k) *= -1.0;
  return r <= c ? Matrix(Q.transpose()) : Q;
}

inline Matrix scaled_orthogonal(Index d, double scale, Rng& rng) {
  return scale * random_orthonormal(d, d, rng);
}

inline Matrix with_spectral_norm(Matrix M, double target) {
  const double s = spectral_norm(M);
  if (s > 0.0) M *= target / s;
  return M;
}

}  // namespace srnn
