#pragma once

// Recovery of network weights from cross moments.
//
// Quadratic IO-RNN (d_h units, unit-norm A1 rows):
//   E[y_t (x) S_2(x_t)]      = 2 sum_i A2^(i) (x) a_i (x) a_i
//   E[y_t (x) S_4(x_{t-1})]  = sum_i A2^(i) (x) 8 P(M_i, M_i)     reshaped d_y x d^2 x d^2
//   E[y_t (x) S_{1,2}(x_t; x_{t-1})] = 4 sum_i A2^(i) (x) a_i (x) M_i
// with M_i = sum_k U_ik a_k a_k^T and P the sum over the three pairings of
// four indices. The first gives A1 and A2, the second |U| row by row, the
// third the sign of each U row relative to its A1 row.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "cp.hpp"
#include "error.hpp"
#include "moments.hpp"
#include "sequence.hpp"
#include "tensor.hpp"

namespace srnn {

enum class UMethod {
  lsq,   // least squares in u u^T against the pairing model (default)
  pinv,  // R~ pinv(A1 (.) A1) from a rank-d_h decomposition of the fourth moment
};

struct GloreeOptions {
  CpOptions cp;
  MomentOptions moments;
  UMethod u_method = UMethod::lsq;
  bool recover_u = true;
  bool fix_signs = true;
  bool control_variates = true;  // for the fourth moment, when the feature budget allows
  ControlVariateOptions cv;
  double no_recurrence_sigmas = 3.0;
  double exact_zero_tol = 1e-10;  // relative, for population moments
  double pinv_tol = 1e-10;
};

struct RnnEstimate {
  Matrix A1_hat;  // d_h x d_x, unit rows
  Matrix A2_hat;  // d_h x d_y (2 d_h x d_y for a BRNN)
  Matrix U_hat;   // d_h x d_h
  Vector weights;
  bool no_recurrence = false;
  bool directions_only = false;
  bool blocks_only = false;
  std::vector<Matrix> blocks;
  std::map<std::string, double> diagnostics;
};

struct BrnnEstimate {
  Matrix A1_hat, B1_hat;  // d_h x d_x
  Matrix U_hat, V_hat;    // d_h x d_h
  Matrix A2_hat;          // 2 d_h x d_y, forward rows first
  Vector weights;
  Index forward_rank = 0, backward_rank = 0;
  bool no_recurrence = false;
  std::map<std::string, double> diagnostics;
};

// Moments consumed by the quadratic pipeline. `exact` marks population values.
struct QuadraticMoments {
  DenseTensor s2;                    // d_y x d x d
  std::optional<DenseTensor> s4;     // d_y x d^2 x d^2, shift -1
  std::optional<DenseTensor> mixed;  // d_y x d x d x d
  double s4_se = 0.0;
  bool exact = false;
};

struct BrnnMoments {
  DenseTensor s2;
  std::optional<DenseTensor> s4_prev, s4_next;
  std::optional<DenseTensor> mixed_prev, mixed_next;
  double se_prev = 0.0, se_next = 0.0;
  bool exact = false;
};

// ---------------------------------------------------------------------------

namespace detail {

inline const std::vector<ScoreTarget>& mixed_targets(int side) {
  static const std::vector<ScoreTarget> prev{{0, 1}, {-1, 2}};
  static const std::vector<ScoreTarget> next{{0, 1}, {1, 2}};
  return side < 0 ? prev : next;
}

inline MomentTensor fourth_moment(const SequenceData& data, const MarkovChainSpec& spec,
                                  int shift, const GloreeOptions& opt, bool causal) {
  ControlVariateOptions cv = opt.cv;
  cv.causal_outputs = causal;
  if (opt.control_variates &&
      control_variate_count(spec.d_x(), data.y.rows(), 4, shift, cv) <= cv.max_features)
    return cross_moment_cv(data, spec, MomentRequest::s4(shift), opt.moments, cv);
  return cross_moment_s4_reshaped(data, spec, shift, opt.moments);
}

// Greedy matching of reference rows to candidate columns by |cosine|, largest
// first; ties go to the lower (reference, candidate) index pair.
inline std::vector<Index> match_by_cosine(const Matrix& ref_rows, const Matrix& cand_cols) {
  const Index k = ref_rows.rows();
  const Index m = cand_cols.cols();
  struct Cell {
    double c;
    Index i, j;
  };
  std::vector<Cell> cells;
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < m; ++j) {
      const double den = ref_rows.row(i).norm() * cand_cols.col(j).norm();
      cells.push_back({den > 0 ? std::abs(ref_rows.row(i).dot(cand_cols.col(j))) / den : 0.0, i, j});
    }
  std::stable_sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
    if (a.c != b.c) return a.c > b.c;
    return a.i != b.i ? a.i < b.i : a.j < b.j;
  });
  std::vector<Index> match(k, m);
  std::vector<bool> used(m, false);
  for (const auto& c : cells) {
    if (match[c.i] != m || used[c.j]) continue;
    match[c.i] = c.j;
    used[c.j] = true;
  }
  return match;
}

// P(A, B)_{qrst} = A_qr B_st + A_qs B_rt + A_qt B_rs, flattened (q r s t).
inline Vector pairings(const Matrix& A, const Matrix& B) {
  const Index d = A.rows();
  Vector v(d * d * d * d);
  Index o = 0;
  for (Index q = 0; q < d; ++q)
    for (Index r = 0; r < d; ++r)
      for (Index s = 0; s < d; ++s)
        for (Index t = 0; t < d; ++t)
          v(o++) = A(q, r) * B(s, t) + A(q, s) * B(r, t) + A(q, t) * B(r, s);
  return v;
}

inline Matrix gram_of_rows(const Matrix& A, Index k) {
  return A.row(k).transpose() * A.row(k);
}

inline Matrix m_of(const Vector& u, const Matrix& A1) {
  Matrix M = Matrix::Zero(A1.cols(), A1.cols());
  for (Index k = 0; k < static_cast<Index>(A1.rows()); ++k) M += u(k) * gram_of_rows(A1, k);
  return M;
}

// Rows u_i from per-unit fourth-derivative tensors Q_i = 8 P(M_i, M_i):
// least squares for the symmetric X_i = u_i u_i^T, then its top eigenpair.
inline Matrix u_rows_lsq(const Matrix& Q, const Matrix& A1) {
  const Index dh = A1.rows();
  std::vector<Matrix> G(dh);
  for (Index k = 0; k < dh; ++k) G[k] = gram_of_rows(A1, k);
  std::vector<std::pair<Index, Index>> vars;
  for (Index k = 0; k < dh; ++k)
    for (Index l = k; l < dh; ++l) vars.emplace_back(k, l);
  Matrix D(Q.cols(), vars.size());
  for (std::size_t c = 0; c < vars.size(); ++c) {
    const auto [k, l] = vars[c];
    D.col(c) = k == l ? Vector(8.0 * pairings(G[k], G[k]))
                      : Vector(8.0 * (pairings(G[k], G[l]) + pairings(G[l], G[k])));
  }
  const auto cod = D.completeOrthogonalDecomposition();
  require(cod.rank() == static_cast<Eigen::Index>(vars.size()), "gloree",
          "rank deficiency in the recurrence design; check that A1 rows are distinct");
  Matrix U(dh, dh);
  for (Index i = 0; i < static_cast<Index>(Q.rows()); ++i) {
    const Vector x = cod.solve(Vector(Q.row(i).transpose()));
    Matrix X(dh, dh);
    for (std::size_t c = 0; c < vars.size(); ++c) {
      X(vars[c].first, vars[c].second) = x(c);
      X(vars[c].second, vars[c].first) = x(c);
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(X);
    const double lam = es.eigenvalues()(dh - 1);
    Vector u = std::sqrt(std::max(lam, 0.0)) * es.eigenvectors().col(dh - 1);
    U.row(i) = canonical_sign(u) * u.transpose();
  }
  return U;
}

// Flips row i of U when the mixed moment disagrees with a_i (x) M(u_i).
inline Matrix fix_u_signs(Matrix U, const Matrix& P, const Matrix& A1, Vector* scores = nullptr) {
  const Index dh = A1.rows(), d = A1.cols();
  if (scores) scores->resize(dh);
  for (Index i = 0; i < dh; ++i) {
    const Matrix M = m_of(U.row(i).transpose(), A1);
    double s = 0.0;
    for (Index j = 0; j < d; ++j)
      for (Index p = 0; p < d; ++p)
        for (Index q = 0; q < d; ++q) s += P(i, (j * d + p) * d + q) * A1(i, j) * M(p, q);
    if (s < 0) U.row(i) *= -1.0;
    if (scores) (*scores)(i) = s;
  }
  return U;
}

inline double condition(const Matrix& M) {
  const Vector s = singular_values(M);
  if (s.size() == 0) return INFINITY;
  return s(s.size() - 1) > 0 ? s(0) / s(s.size() - 1) : INFINITY;
}

// Unit rows of A1 and scaled rows of A2 from a decomposition of the
// second-order moment; factor is the moment constant (2 for l = 2).
inline void first_stage(const CpDecomposition& cp, double factor, Matrix& A1, Matrix& A2) {
  const Index k = cp.rank;
  A1.resize(k, cp.R2.rows());
  A2.resize(k, cp.R1.rows());
  for (Index j = 0; j < k; ++j) {
    Vector b = cp.R2.col(j), c = cp.R3.col(j);
    if (b.dot(c) < 0) c = -c;
    Vector a = (b + c) / 2.0;
    a.normalize();
    A1.row(j) = a.transpose();
    A2.row(j) = (cp.weights(j) / factor) * cp.R1.col(j).transpose();
  }
}

inline bool negligible(const DenseTensor& T, double se, double ref, const GloreeOptions& opt,
                       bool exact) {
  const double nrm = T.norm();
  if (exact) return nrm <= opt.exact_zero_tol * std::max(1.0, ref);
  return nrm < opt.no_recurrence_sigmas * se;
}

// U rows for units `rows` of Q (rows of pinv(A2^T) T_(1)), with A1 the
// matching unit rows.
inline Matrix u_from_fourth(const DenseTensor& s4, const std::optional<DenseTensor>& mixed,
                            const Matrix& G, const Matrix& A1, const GloreeOptions& opt,
                            RnnEstimate* diag_sink, const std::string& tag) {
  const Matrix Q = G * unfold(s4, 0);
  Matrix U = u_rows_lsq(Q, A1);
  if (opt.fix_signs && mixed) {
    Vector sc;
    U = fix_u_signs(U, G * unfold(*mixed, 0), A1, &sc);
    if (diag_sink && sc.size())
      diag_sink->diagnostics[tag + "min_sign_score"] = sc.cwiseAbs().minCoeff();
  }
  return U;
}

}  // namespace detail

// ---------------------------------------------------------------------------

// R~ pinv(A1 (.) A1).
inline Matrix recover_u(const Matrix& R_tilde, const Matrix& A1_hat, double tol = 1e-10) {
  require(R_tilde.rows() == A1_hat.rows() &&
              R_tilde.cols() == A1_hat.cols() * A1_hat.cols(),
          "gloree", "R~ must be d_h x d_x^2", ErrorKind::config);
  const Matrix K = rowwise_kron(A1_hat, A1_hat);
  const Vector sa = singular_values(A1_hat), sk = singular_values(K);
  const auto full = [&](const Vector& s) {
    return s.size() == A1_hat.rows() && s(s.size() - 1) > tol * s(0);
  };
  require(full(sa), "gloree", "rank deficiency: A1_hat must have full row rank");
  require(full(sk), "gloree", "rank deficiency: A1_hat ⊙ A1_hat must have full row rank");
  return R_tilde * pinv(K, tol);
}

// l-fold row-wise Kronecker power.
inline Matrix rowwise_kron_power(const Matrix& A, int l) {
  Matrix K = A;
  for (int j = 1; j < l; ++j) K = rowwise_kron(K, A);
  return K;
}

inline QuadraticMoments quadratic_moments(const SequenceData& data, const MarkovChainSpec& spec,
                                          const GloreeOptions& opt = {}) {
  QuadraticMoments m;
  m.s2 = cross_moment_s2(data, spec, opt.moments).value;
  if (opt.recover_u) {
    auto t4 = detail::fourth_moment(data, spec, -1, opt, true);
    m.s4 = std::move(t4.value);
    m.s4_se = t4.se_norm;
    if (opt.fix_signs)
      m.mixed = cross_moment(data, spec, MomentRequest::mixed_of(detail::mixed_targets(-1)),
                             opt.moments)
                    .value;
  }
  return m;
}

inline QuadraticMoments oracle_quadratic_moments(const RnnParams& p, const MarkovChainSpec& spec,
                                                 const OracleOptions& oo = {}) {
  QuadraticMoments m;
  m.s2 = population_moment_oracle(p, spec, MomentRequest::s2(), oo).value;
  m.s4 = population_moment_oracle(p, spec, MomentRequest::s4(-1), oo).value;
  m.mixed =
      population_moment_oracle(p, spec, MomentRequest::mixed_of(detail::mixed_targets(-1)), oo)
          .value;
  m.exact = true;
  return m;
}

inline RnnEstimate gloree_quadratic(const QuadraticMoments& m, Index d_h,
                                    const GloreeOptions& opt = {}) {
  require(d_h >= 1, "gloree", "d_h must be positive", ErrorKind::config);
  require(m.s2.order() == 3, "gloree", "second-order moment must be d_y x d x d",
          ErrorKind::config);
  const Index d_y = m.s2.dims[0], d = m.s2.dims[1];
  require(d_h <= std::min(d, d_y), "gloree",
          "full-rank assumption needs d_h ≤ min(d_x, d_y)", ErrorKind::config);

  CpOptions co = opt.cp;
  co.rank = d_h;
  const CpDecomposition cp1 = decompose(m.s2, std::nullopt, co);
  require(cp1.weights.cwiseAbs().minCoeff() > 1e-8 * cp1.weights.cwiseAbs().maxCoeff(), "gloree",
          "rank deficiency in the second-order moment; check that A1 and A2 have full row rank");

  RnnEstimate est;
  detail::first_stage(cp1, 2.0, est.A1_hat, est.A2_hat);
  est.weights = cp1.weights;
  est.U_hat = Matrix::Zero(d_h, d_h);
  est.diagnostics["s2_residual"] = cp1.residual;
  est.diagnostics["cond_A1"] = detail::condition(est.A1_hat);
  est.diagnostics["cond_A2"] = detail::condition(est.A2_hat);
  est.diagnostics["cond_A1_kron"] = detail::condition(rowwise_kron(est.A1_hat, est.A1_hat));
  require(est.diagnostics["cond_A2"] < 1.0 / opt.pinv_tol, "gloree",
          "rank deficiency: A2 must have full row rank");

  if (!opt.recover_u) return est;
  require(m.s4.has_value(), "gloree", "fourth-order moment missing", ErrorKind::config);
  require(m.s4->order() == 3 && m.s4->dims[0] == d_y && m.s4->dims[1] == d * d &&
              m.s4->dims[2] == d * d,
          "gloree", "fourth-order moment must be d_y x d^2 x d^2", ErrorKind::config);
  est.diagnostics["s4_norm"] = m.s4->norm();
  est.diagnostics["s4_se"] = m.s4_se;
  if (detail::negligible(*m.s4, m.s4_se, m.s2.norm(), opt, m.exact)) {
    est.no_recurrence = true;
    return est;
  }
  const Matrix G = pinv(est.A2_hat.transpose(), opt.pinv_tol);  // d_h x d_y

  if (opt.u_method == UMethod::lsq) {
    est.U_hat = detail::u_from_fourth(*m.s4, m.mixed, G, est.A1_hat, opt, &est, "");
  } else {
    const CpDecomposition cp2 = decompose(*m.s4, std::nullopt, co);
    est.diagnostics["s4_residual"] = cp2.residual;
    const auto match = detail::match_by_cosine(est.A2_hat, cp2.R1);
    double min_cos = 1.0;
    Matrix Rt(d_h, d * d);
    for (Index i = 0; i < d_h; ++i) {
      const Index j = match[i];
      const Vector a2 = est.A2_hat.row(i).transpose();
      const double c = a2.dot(cp2.R1.col(j)) / a2.norm();
      min_cos = std::min(min_cos, std::abs(c));
      // one unit's contribution is 24 A2^(i) (x) r (x) r at d_h = 1
      const double s = std::max(0.0, cp2.weights(j) * (c >= 0 ? 1.0 : -1.0)) / (24.0 * a2.norm());
      Vector b = cp2.R2.col(j), c3 = cp2.R3.col(j);
      if (b.dot(c3) < 0) c3 = -c3;
      Vector r = (b + c3) / 2.0;
      r.normalize();
      Rt.row(i) = std::sqrt(s) * r.transpose();
    }
    est.diagnostics["t2_factor_min_cos"] = min_cos;
    est.U_hat = recover_u(Rt, est.A1_hat, opt.pinv_tol);
    if (opt.fix_signs && m.mixed) est.U_hat = detail::fix_u_signs(est.U_hat, G * unfold(*m.mixed, 0), est.A1_hat);
  }
  return est;
}

inline RnnEstimate gloree_quadratic(const SequenceData& data, const MarkovChainSpec& spec,
                                    Index d_h, const GloreeOptions& opt = {}) {
  return gloree_quadratic(quadratic_moments(data, spec, opt), d_h, opt);
}

// ---------------------------------------------------------------------------
// General polynomial activation (l = 2, 3).

struct GeneralMoments {
  DenseTensor s2;                   // d_y x d x d
  std::optional<DenseTensor> high;  // d_y x d^l x d^(l^2 - l), shift -1
  double high_se = 0.0;
  bool exact = false;
};

inline GeneralMoments general_moments(const RnnParams& p, const MarkovChainSpec& spec, int l,
                                      const OracleOptions& oo = {}, bool with_u = true) {
  GeneralMoments m;
  m.s2 = population_moment_oracle(p, spec, MomentRequest::s2(), oo).value;
  if (with_u) m.high = population_moment_oracle(p, spec, MomentRequest::sm(l * l, l, -1), oo).value;
  m.exact = true;
  return m;
}

inline GeneralMoments general_moments(const SequenceData& data, const MarkovChainSpec& spec,
                                      int l, const GloreeOptions& opt = {}) {
  GeneralMoments m;
  m.s2 = cross_moment_s2(data, spec, opt.moments).value;
  if (opt.recover_u) {
    auto t = cross_moment(data, spec, MomentRequest::sm(l * l, l, -1), opt.moments);
    m.high = std::move(t.value);
    m.high_se = t.se_norm;
  }
  return m;
}

namespace detail {

// U rows up to scale from the order-l^2 moment: decompose, match to A2,
// R~ pinv(A1^{(.) l}). Rows come back unit-norm with the sign that makes
// the component's mode-1 factor agree with A2.
inline Matrix u_directions(const DenseTensor& high, const Matrix& A1, const Matrix& A2, int l,
                           const GloreeOptions& opt, RnnEstimate& est) {
  const Index d_h = A1.rows();
  CpOptions co = opt.cp;
  co.rank = d_h;
  const CpDecomposition cp = decompose(high, std::nullopt, co);
  est.diagnostics["high_residual"] = cp.residual;
  const auto match = match_by_cosine(A2, cp.R1);
  Matrix Rt(d_h, high.dims[1]);
  for (Index i = 0; i < d_h; ++i) {
    const Index j = match[i];
    const double c = A2.row(i).dot(cp.R1.col(j));
    const double s = (c >= 0 ? 1.0 : -1.0) * (cp.weights(j) >= 0 ? 1.0 : -1.0);
    Rt.row(i) = s * cp.R2.col(j).transpose();
  }
  const Matrix K = rowwise_kron_power(A1, l);
  const Vector sk = singular_values(K);
  require(sk(sk.size() - 1) > opt.pinv_tol * sk(0), "gloree",
          "rank deficiency: the l-fold row-wise Kronecker power of A1_hat must have full row rank");
  Matrix U = Rt * pinv(K, opt.pinv_tol);
  for (Index i = 0; i < d_h; ++i)
    if (U.row(i).norm() > 0) U.row(i).normalize();
  return U;
}

}  // namespace detail

inline RnnEstimate gloree_general(const GeneralMoments& m, Index d_h, int l,
                                  const GloreeOptions& opt = {}) {
  require(l == 2 || l == 3, "gloree", "supported activation orders are l = 2 and l = 3",
          ErrorKind::config);
  const Index d_y = m.s2.dims[0], d = m.s2.dims[1];
  require(d_h >= 1 && d_h <= std::min(d, d_y), "gloree",
          "full-rank assumption needs d_h ≤ min(d_x, d_y)", ErrorKind::config);
  CpOptions co = opt.cp;
  co.rank = d_h;
  const CpDecomposition cp1 = decompose(m.s2, std::nullopt, co);
  require(cp1.weights.cwiseAbs().minCoeff() > 1e-8 * cp1.weights.cwiseAbs().maxCoeff(), "gloree",
          "rank deficiency in the second-order moment; check that A1 and A2 have full row rank");
  RnnEstimate est;
  detail::first_stage(cp1, 1.0, est.A1_hat, est.A2_hat);  // A2 rows carry mu_i
  est.weights = cp1.weights;
  est.directions_only = true;
  est.U_hat = Matrix::Zero(d_h, d_h);
  est.diagnostics["s2_residual"] = cp1.residual;
  if (!opt.recover_u) return est;
  require(m.high.has_value(), "gloree", "order-l^2 moment missing", ErrorKind::config);
  est.diagnostics["high_norm"] = m.high->norm();
  if (detail::negligible(*m.high, m.high_se, m.s2.norm(), opt, m.exact)) {
    est.no_recurrence = true;
    return est;
  }
  est.U_hat = detail::u_directions(*m.high, est.A1_hat, est.A2_hat, l, opt, est);
  return est;
}

inline RnnEstimate gloree_general(const SequenceData& data, const MarkovChainSpec& spec,
                                  Index d_h, int l, const GloreeOptions& opt = {}) {
  require(l == 2 || l == 3, "gloree", "supported activation orders are l = 2 and l = 3",
          ErrorKind::config);
  if (l == 2) return gloree_quadratic(data, spec, d_h, opt);
  return gloree_general(general_moments(data, spec, l, opt), d_h, l, opt);
}

// ---------------------------------------------------------------------------
// Scalar output, l >= 3: symmetric decomposition of E[y S_3].

inline RnnEstimate gloree_scalar(const DenseTensor& s3, Index d_h, int l,
                                 const std::optional<DenseTensor>& high = std::nullopt,
                                 const GloreeOptions& opt = {}) {
  require(l >= 3, "gloree",
          "scalar output needs l ≥ 3: a matrix decomposition is not unique", ErrorKind::config);
  require(s3.order() == 3 && s3.dims[0] == s3.dims[1] && s3.dims[1] == s3.dims[2], "gloree",
          "scalar moment must be d x d x d", ErrorKind::config);
  const Index d = s3.dims[0];
  require(d_h >= 1 && d_h <= d, "gloree", "full-rank assumption needs d_h ≤ d_x",
          ErrorKind::config);
  // components with zero output weight drop out of the detected rank
  CpOptions co = opt.cp;
  co.rank = std::min(d_h, detail::detect_rank(s3, co.rank_tol));
  require(co.rank >= 1, "gloree", "scalar moment vanishes");
  CpDecomposition cp = decompose(s3, std::nullopt, co);
  RnnEstimate est;
  const Index k = std::min<Index>(cp.rank, d_h);
  est.A1_hat = Matrix::Zero(d_h, d);
  est.A2_hat = Matrix::Zero(d_h, 1);
  est.weights = Vector::Zero(d_h);
  for (Index j = 0; j < k; ++j) {
    // odd order: put the sign in the direction so the weight is positive
    const double s = cp.weights(j) >= 0 ? 1.0 : -1.0;
    est.A1_hat.row(j) = s * cp.R1.col(j).transpose();
    est.weights(j) = std::abs(cp.weights(j));
    est.A2_hat(j, 0) = est.weights(j);
  }
  est.U_hat = Matrix::Zero(d_h, d_h);
  est.directions_only = true;
  est.diagnostics["s3_residual"] = cp.residual;
  est.diagnostics["detected_rank"] = static_cast<double>(cp.rank);
  if (high && opt.recover_u && k == d_h) {
    if (detail::negligible(*high, 0.0, s3.norm(), opt, true)) {
      est.no_recurrence = true;
    } else if (l == 3) {
      // d^3 x d^3 x d^3 symmetric grouping of the ninth-order moment
      DenseTensor h = *high;
      h.dims = {d * d * d, d * d * d, d * d * d};
      CpOptions c2 = opt.cp;
      c2.rank = d_h;
      const CpDecomposition cpu = decompose(h, std::nullopt, c2);
      est.diagnostics["high_residual"] = cpu.residual;
      Matrix Rt(d_h, d * d * d);
      for (Index i = 0; i < d_h; ++i) {
        const double s = cpu.weights(i) >= 0 ? 1.0 : -1.0;
        Rt.row(i) = s * cpu.R1.col(i).transpose();
      }
      Matrix U = Rt * pinv(rowwise_kron_power(est.A1_hat, 3), opt.pinv_tol);
      for (Index i = 0; i < d_h; ++i)
        if (U.row(i).norm() > 0) U.row(i).normalize();
      est.U_hat = U;
    }
  }
  return est;
}

inline RnnEstimate gloree_scalar(const SequenceData& data, const MarkovChainSpec& spec, Index d_h,
                                 int l, const GloreeOptions& opt = {}) {
  require(l >= 3, "gloree",
          "scalar output needs l ≥ 3: a matrix decomposition is not unique", ErrorKind::config);
  require(data.y.rows() == 1, "gloree", "scalar recovery needs d_y = 1", ErrorKind::config);
  const auto s3 = cross_moment_s3_scalar(data, spec, opt.moments).value;
  return gloree_scalar(s3, d_h, l, std::nullopt, opt);
}

// ---------------------------------------------------------------------------
// Linear IO-RNN: Toeplitz blocks C_k = A2^T U^k A1.

inline RnnEstimate gloree_linear(const std::vector<Matrix>& blocks,
                                 const std::optional<Matrix>& A1_known,
                                 double tol = 1e-10) {
  require(!blocks.empty(), "gloree", "at least one Toeplitz block is needed", ErrorKind::config);
  RnnEstimate est;
  est.blocks = blocks;
  if (!A1_known) {
    est.blocks_only = true;
    return est;
  }
  require(blocks.size() >= 2, "gloree", "linear recovery needs blocks C0 and C1",
          ErrorKind::config);
  const Matrix& A1 = *A1_known;
  require(A1.rows() == A1.cols() && blocks[0].rows() == A1.rows() && blocks[0].cols() == A1.cols(),
          "gloree", "linear recovery needs square d_x = d_h = d_y", ErrorKind::config);
  const auto singular = [&](const Matrix& M) {
    const Vector s = singular_values(M);
    return !(s(s.size() - 1) > tol * std::max(1.0, s(0)));
  };
  require(!singular(A1), "gloree", "singular A1 in the linear recovery");
  const Matrix A1inv = A1.inverse();
  const Matrix A2t = blocks[0] * A1inv;
  require(!singular(A2t), "gloree", "singular A2 in the linear recovery");
  est.A1_hat = A1;
  est.A2_hat = A2t.transpose();
  est.U_hat = A2t.inverse() * blocks[1] * A1inv;
  est.weights = Vector::Ones(A1.rows());
  return est;
}

inline RnnEstimate gloree_linear(const SequenceData& data, const MarkovChainSpec& spec, Index K,
                                 const std::optional<Matrix>& A1_known,
                                 const MomentOptions& mo = {}) {
  return gloree_linear(toeplitz_blocks(data, spec, K, mo), A1_known);
}

// A2^T U^k A1 for k = 0..K.
inline std::vector<Matrix> linear_blocks(const Matrix& A1, const Matrix& U, const Matrix& A2,
                                         Index K) {
  std::vector<Matrix> out;
  Matrix P = A1;
  for (Index k = 0; k <= K; ++k) {
    out.push_back(A2.transpose() * P);
    P = U * P;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bidirectional RNN.

inline BrnnMoments brnn_moments(const SequenceData& data, const MarkovChainSpec& spec,
                                const GloreeOptions& opt = {}) {
  BrnnMoments m;
  m.s2 = cross_moment_s2(data, spec, opt.moments).value;
  if (opt.recover_u) {
    auto p = detail::fourth_moment(data, spec, -1, opt, false);
    auto n = detail::fourth_moment(data, spec, 1, opt, false);
    m.s4_prev = std::move(p.value);
    m.s4_next = std::move(n.value);
    m.se_prev = p.se_norm;
    m.se_next = n.se_norm;
    if (opt.fix_signs) {
      m.mixed_prev = cross_moment(data, spec, MomentRequest::mixed_of(detail::mixed_targets(-1)),
                                  opt.moments)
                         .value;
      m.mixed_next = cross_moment(data, spec, MomentRequest::mixed_of(detail::mixed_targets(1)),
                                  opt.moments)
                         .value;
    }
  }
  return m;
}

inline BrnnMoments oracle_brnn_moments(const BrnnParams& p, const MarkovChainSpec& spec,
                                       const OracleOptions& oo = {}) {
  BrnnMoments m;
  m.s2 = population_moment_oracle(p, spec, MomentRequest::s2(), oo).value;
  m.s4_prev = population_moment_oracle(p, spec, MomentRequest::s4(-1), oo).value;
  m.s4_next = population_moment_oracle(p, spec, MomentRequest::s4(1), oo).value;
  m.mixed_prev =
      population_moment_oracle(p, spec, MomentRequest::mixed_of(detail::mixed_targets(-1)), oo)
          .value;
  m.mixed_next =
      population_moment_oracle(p, spec, MomentRequest::mixed_of(detail::mixed_targets(1)), oo)
          .value;
  m.exact = true;
  return m;
}

inline BrnnEstimate gloree_brnn(const BrnnMoments& m, Index d_h, const GloreeOptions& opt = {}) {
  const Index d_y = m.s2.dims[0], d = m.s2.dims[1];
  require(d_y >= 2 * d_h, "gloree", "output dimension insufficient for BRNN identifiability",
          ErrorKind::config);
  require(2 * d_h <= d, "gloree", "full-rank assumption needs 2 d_h ≤ d_x for the stacked [A1; B1]",
          ErrorKind::config);

  // Stacked decomposition: 2 sum over both halves, rank detected up to 2 d_h.
  CpOptions co = opt.cp;
  co.rank = 0;
  CpDecomposition cp = decompose(m.s2, std::nullopt, co);
  require(cp.rank >= 1, "gloree", "second-order moment vanishes");
  if (cp.rank > 2 * d_h) {
    co.rank = 2 * d_h;
    cp = decompose(m.s2, std::nullopt, co);
  }
  const Index r = cp.rank;
  Matrix C, A2;
  detail::first_stage(cp, 2.0, C, A2);

  // T~ = T(pinv(A2^T), I, I) = sum_i e_i (x) c_i (x) c_i: the stacked [A1; B1]
  // comes from the top eigenvector of each mode-1 slice.
  const Matrix G = pinv(A2.transpose(), opt.pinv_tol);  // r x d_y
  const DenseTensor Tt = multilinear(m.s2, Matrix(G.transpose()), std::nullopt, std::nullopt);
  BrnnEstimate est;
  double off = 0.0;
  for (Index i = 0; i < r; ++i) {
    Eigen::Map<const RowMajorMatrix> S(Tt.data.data() + i * d * d, d, d);
    Matrix Ss = (Matrix(S) + Matrix(S).transpose()) / 2.0;
    Eigen::SelfAdjointEigenSolver<Matrix> es(Ss);
    Index top = 0;
    es.eigenvalues().cwiseAbs().maxCoeff(&top);
    Vector c = es.eigenvectors().col(top);
    if (c.dot(C.row(i).transpose()) < 0) c = -c;
    off += (Ss - es.eigenvalues()(top) * c * c.transpose()).squaredNorm();
    C.row(i) = c.transpose();
  }
  est.diagnostics["t_tilde_offdiag"] = std::sqrt(off);
  est.diagnostics["s2_residual"] = cp.residual;

  // Forward units carry the shift -1 fourth moment, backward units shift +1.
  Matrix Qp, Qn;
  Vector ef = Vector::Zero(r), eb = Vector::Zero(r);
  bool rec = false;
  if (opt.recover_u) {
    require(m.s4_prev && m.s4_next, "gloree", "fourth-order moments missing", ErrorKind::config);
    const bool zp = detail::negligible(*m.s4_prev, m.se_prev, m.s2.norm(), opt, m.exact);
    const bool zn = detail::negligible(*m.s4_next, m.se_next, m.s2.norm(), opt, m.exact);
    rec = !(zp && zn);
    Qp = G * unfold(*m.s4_prev, 0);
    Qn = G * unfold(*m.s4_next, 0);
    for (Index i = 0; i < r; ++i) {
      ef(i) = zp ? 0.0 : Qp.row(i).norm();
      eb(i) = zn ? 0.0 : Qn.row(i).norm();
    }
  }
  std::vector<Index> ord(r);
  std::iota(ord.begin(), ord.end(), Index{0});
  if (rec) {
    std::stable_sort(ord.begin(), ord.end(),
                     [&](Index a, Index b) { return ef(a) - eb(a) > ef(b) - eb(b); });
  } else {
    // Without recurrence the halves are interchangeable; order by the output
    // coordinate each unit loads on most.
    auto key = [&](Index i) {
      Index c = 0;
      A2.row(i).cwiseAbs().maxCoeff(&c);
      return c;
    };
    std::stable_sort(ord.begin(), ord.end(), [&](Index a, Index b) { return key(a) < key(b); });
  }
  const Index nf = std::min(d_h, r);
  const Index nb = r - nf;
  est.forward_rank = nf;
  est.backward_rank = nb;
  est.no_recurrence = !rec;
  est.A1_hat = Matrix::Zero(d_h, d);
  est.B1_hat = Matrix::Zero(d_h, d);
  est.A2_hat = Matrix::Zero(2 * d_h, d_y);
  est.weights = Vector::Zero(2 * d_h);
  std::vector<Index> fwd(ord.begin(), ord.begin() + nf), bwd(ord.begin() + nf, ord.end());
  for (Index i = 0; i < nf; ++i) {
    est.A1_hat.row(i) = C.row(fwd[i]);
    est.A2_hat.row(i) = A2.row(fwd[i]);
    est.weights(i) = cp.weights(fwd[i]);
  }
  for (Index i = 0; i < nb; ++i) {
    est.B1_hat.row(i) = C.row(bwd[i]);
    est.A2_hat.row(d_h + i) = A2.row(bwd[i]);
    est.weights(d_h + i) = cp.weights(bwd[i]);
  }
  est.U_hat = Matrix::Zero(d_h, d_h);
  est.V_hat = Matrix::Zero(d_h, d_h);
  if (!rec) return est;

  auto side = [&](const std::vector<Index>& units, const Matrix& Q,
                  const std::optional<DenseTensor>& mixed, double energy_sum) -> Matrix {
    const Index k = units.size();
    Matrix out = Matrix::Zero(d_h, d_h);
    if (k == 0 || energy_sum == 0.0) return out;
    Matrix A1s(k, d), Qs(k, Q.cols());
    for (Index i = 0; i < k; ++i) {
      A1s.row(i) = C.row(units[i]);
      Qs.row(i) = Q.row(units[i]);
    }
    Matrix U = detail::u_rows_lsq(Qs, A1s);
    if (opt.fix_signs && mixed) {
      const Matrix P = G * unfold(*mixed, 0);
      Matrix Ps(k, P.cols());
      for (Index i = 0; i < k; ++i) Ps.row(i) = P.row(units[i]);
      U = detail::fix_u_signs(U, Ps, A1s);
    }
    out.topLeftCorner(k, k) = U;
    return out;
  };
  double sf = 0.0, sb = 0.0;
  for (Index i : fwd) sf += ef(i);
  for (Index i : bwd) sb += eb(i);
  est.U_hat = side(fwd, Qp, m.mixed_prev, sf);
  est.V_hat = side(bwd, Qn, m.mixed_next, sb);
  return est;
}

inline BrnnEstimate gloree_brnn(const SequenceData& data, const MarkovChainSpec& spec, Index d_h,
                                const GloreeOptions& opt = {}) {
  require(static_cast<Index>(data.y.rows()) >= 2 * d_h, "gloree",
          "output dimension insufficient for BRNN identifiability", ErrorKind::config);
  return gloree_brnn(brnn_moments(data, spec, opt), d_h, opt);
}

}  // namespace srnn
