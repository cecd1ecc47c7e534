#pragma once

// CP decomposition of third-order tensors T = sum_i w_i a_i (x) b_i (x) c_i.
//
// Three routes, all producing the same output type:
//   symmetrization: T(D, I, I) with D = pinv(M1)^T, whitening, power method,
//                   mode-1 factor by least squares;
//   symmetric:      whitening + power method on an already symmetric T;
//   jennrich:       simultaneous diagonalization of two random mode-1 slices
//                   in the top-k mode-2/3 subspaces, then ALS refinement.
// decompose() runs every route that applies and keeps the one with the
// smallest reconstruction residual, preferring the routes in the order above.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "error.hpp"
#include "parallel.hpp"
#include "tensor.hpp"

namespace srnn {

struct CpDecomposition {
  Index rank = 0;
  Vector weights;
  Matrix R1, R2, R3;  // unit-norm columns
  double residual = 0.0;  // ||T - sum||_F / ||T||_F
  std::string path;
  bool converged = true;
  long iterations = 0;

  DenseTensor reconstruct() const {
    DenseTensor T({static_cast<Index>(R1.rows()), static_cast<Index>(R2.rows()),
                   static_cast<Index>(R3.rows())});
    for (Index i = 0; i < rank; ++i) {
      DenseTensor o = outer({R1.col(i), R2.col(i), R3.col(i)});
      o *= weights(i);
      T += o;
    }
    return T;
  }
};

struct CpOptions {
  Index rank = 0;         // 0: detect from the unfoldings
  Index restarts = 0;     // 0: 10 * rank
  int iters = 200;
  double tol = 1e-10;
  double pinv_tol = 1e-10;
  double cond_max = 1e6;  // symmetrization route is skipped above this
  double rank_tol = 1e-8;
  int als_iters = 500;
  std::uint64_t seed = 7;
  int workers = 1;
};

// ---------------------------------------------------------------------------
// Building blocks.

inline DenseTensor symmetrize(const DenseTensor& T, const Matrix& D) {
  require(T.order() == 3, "cp_decomp", "symmetrize needs an order-3 tensor");
  require(static_cast<Index>(D.rows()) == T.dims[0], "cp_decomp",
          "dimension mismatch: D must have one row per mode-1 index");
  return multilinear(T, D, std::nullopt, std::nullopt);
}

inline Matrix symmetrization_matrix(const Matrix& M1, double pinv_tol = 1e-10) {
  return pinv(M1, pinv_tol).transpose();
}

struct Whitening {
  DenseTensor core;  // k x k x k
  Matrix W;          // d x k, W^T M W = diag(+-1)
  Matrix V;          // d x k eigenvectors of the surrogate
  Vector lambda;     // their eigenvalues
  bool sign_definite = true;
};

// The surrogate M = T(I, I, theta) = C diag(g) C^T has the inertia of g, so its
// top-k eigenvalues share a sign exactly when every component weight g_i does;
// only then does whitening orthogonalize the components. Random slices are
// tried until one is sign-definite (the best one is kept otherwise).
inline Whitening whiten(const DenseTensor& T, Index k, std::uint64_t seed = 7,
                        int attempts = 64) {
  require(T.order() == 3 && T.dims[0] == T.dims[1] && T.dims[1] == T.dims[2], "cp_decomp",
          "whitening needs a cubical order-3 tensor");
  const Index d = T.dims[0];
  require(k >= 1 && k <= d, "cp_decomp", "whitening rank must lie in 1..d", ErrorKind::config);
  Rng rng(seed);
  std::normal_distribution<double> nd;
  std::optional<Whitening> best;
  double best_margin = -INFINITY;
  for (int a = 0; a < attempts; ++a) {
    Vector theta(d);
    for (Index i = 0; i < d; ++i) theta(i) = nd(rng);
    theta.normalize();
    DenseTensor Mt = multilinear(T, std::nullopt, std::nullopt, Matrix(theta));
    Matrix M = Eigen::Map<const RowMajorMatrix>(Mt.data.data(), d, d);
    M = 0.5 * (M + M.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(M);
    std::vector<Index> order(d);
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index x, Index y) {
      return std::abs(es.eigenvalues()(x)) > std::abs(es.eigenvalues()(y));
    });
    Whitening w;
    w.V.resize(d, k);
    w.lambda.resize(k);
    for (Index j = 0; j < k; ++j) {
      w.V.col(j) = es.eigenvectors().col(order[j]);
      w.lambda(j) = es.eigenvalues()(order[j]);
    }
    const double top = std::abs(w.lambda(0));
    const double kth = std::abs(w.lambda(k - 1));
    if (top == 0.0 || kth <= 1e-12 * top) continue;
    for (Index j = 1; j < k; ++j)
      if ((w.lambda(j) > 0) != (w.lambda(0) > 0)) w.sign_definite = false;
    const double margin = (w.sign_definite ? 1.0 : 0.0) + kth / top;
    if (margin > best_margin) {
      best_margin = margin;
      best = std::move(w);
    }
    if (best->sign_definite && kth > 1e-3 * top) break;
  }
  if (!best) fail("cp_decomp", "rank deficiency; check full-rank assumption");
  Whitening w = std::move(*best);
  w.W = w.V * w.lambda.cwiseAbs().cwiseInverse().cwiseSqrt().asDiagonal();
  w.core = multilinear(T, w.W, w.W, w.W);
  return w;
}

struct PowerResult {
  Vector lambda;    // sorted by |lambda| descending
  Matrix vectors;   // k x k, columns unit
  DenseTensor deflated;  // what is left after removing every component
  bool converged = true;
  long iterations = 0;
};

namespace detail {

// Sign making the first coordinate above a small threshold positive.
inline double canonical_sign(const Vector& v) {
  const double m = v.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (std::abs(v(i)) > 1e-8 * m) return v(i) >= 0 ? 1.0 : -1.0;
  return 1.0;
}

inline bool lex_less(const Vector& a, const Vector& b) {
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (a(i) < b(i)) return true;
    if (a(i) > b(i)) return false;
  }
  return false;
}

inline Vector apply_uu(const DenseTensor& T, const Vector& u) {
  return contract_vec(T, u, u, 0);
}

inline double cubic_form(const DenseTensor& T, const Vector& u) {
  return u.dot(apply_uu(T, u));
}

}  // namespace detail

inline PowerResult power_method(const DenseTensor& core, Index k, Index restarts, int iters,
                                double tol, std::uint64_t seed = 7, int workers = 1) {
  require(core.order() == 3 && core.dims[0] == core.dims[1] && core.dims[1] == core.dims[2],
          "cp_decomp", "power method needs a cubical order-3 tensor");
  const Index d = core.dims[0];
  require(k >= 1 && k <= d, "cp_decomp", "power method rank must lie in 1..d", ErrorKind::config);
  if (restarts == 0) restarts = 10 * k;
  PowerResult res;
  res.lambda.resize(k);
  res.vectors.resize(d, k);
  DenseTensor T = core;
  for (Index comp = 0; comp < k; ++comp) {
    struct Run {
      Vector u;
      double lambda = 0.0;
      bool conv = false;
      long its = 0;
    };
    std::vector<Run> runs(restarts);
    parallel_for(restarts, workers, [&](std::size_t r) {
      Rng rng(derive_seed(seed, comp * restarts + r));
      std::normal_distribution<double> nd;
      Vector u(d);
      if (r % 2 == 0) {
        // top singular vector of a random slice
        Vector th(d);
        for (Index i = 0; i < d; ++i) th(i) = nd(rng);
        DenseTensor S = multilinear(T, std::nullopt, std::nullopt, Matrix(th));
        Matrix M = Eigen::Map<const RowMajorMatrix>(S.data.data(), d, d);
        Eigen::JacobiSVD<Matrix> svd(M, Eigen::ComputeFullU);
        u = svd.matrixU().col(0);
      } else {
        for (Index i = 0; i < d; ++i) u(i) = nd(rng);
      }
      if (u.norm() == 0.0) u = Vector::Unit(d, 0);
      u.normalize();
      Run run;
      for (int it = 0; it < iters; ++it) {
        Vector v = detail::apply_uu(T, u);
        const double nv = v.norm();
        run.its = it + 1;
        if (nv == 0.0) break;
        v /= nv;
        const double move = std::min((v - u).norm(), (v + u).norm());
        u = v;
        if (move < tol) {
          run.conv = true;
          break;
        }
      }
      run.lambda = detail::cubic_form(T, u);
      if (run.lambda < 0) {
        u = -u;
        run.lambda = -run.lambda;
      }
      run.u = u;
      runs[r] = std::move(run);
    });
    // Best by |lambda|; ties broken by the lexicographically larger vector.
    Index best = 0;
    for (Index r = 1; r < restarts; ++r) {
      const double a = runs[r].lambda, b = runs[best].lambda;
      if (a > b * (1 + 1e-12) + 1e-300 ||
          (std::abs(a - b) <= 1e-12 * std::max(a, b) && detail::lex_less(runs[best].u, runs[r].u)))
        best = r;
    }
    bool any_conv = false;
    for (const auto& r : runs) {
      any_conv = any_conv || r.conv;
      res.iterations += r.its;
    }
    res.converged = res.converged && any_conv;
    Vector u = runs[best].u;
    double lam = runs[best].lambda;
    const double s = detail::canonical_sign(u);
    u *= s;
    lam *= s;  // odd order: flipping u flips the cubic form
    res.lambda(comp) = lam;
    res.vectors.col(comp) = u;
    DenseTensor o = outer({u, u, u});
    o *= lam;
    T -= o;
  }
  res.deflated = std::move(T);
  // Sort by |lambda| descending (deflation order can differ under noise).
  std::vector<Index> ord(k);
  std::iota(ord.begin(), ord.end(), Index{0});
  std::stable_sort(ord.begin(), ord.end(), [&](Index a, Index b) {
    return std::abs(res.lambda(a)) > std::abs(res.lambda(b));
  });
  Vector l2(k);
  Matrix v2(d, k);
  for (Index j = 0; j < k; ++j) {
    l2(j) = res.lambda(ord[j]);
    v2.col(j) = res.vectors.col(ord[j]);
  }
  res.lambda = l2;
  res.vectors = v2;
  return res;
}

// ---------------------------------------------------------------------------
// Factor utilities.

namespace detail {

inline double rel_residual(const DenseTensor& T, const Matrix& A, const Matrix& B,
                           const Matrix& C) {
  // A carries the weights.
  const Matrix T1 = unfold(T, 0);
  const double nt = T1.norm();
  const Matrix R = T1 - A * khatri_rao(B, C).transpose();
  return nt == 0.0 ? R.norm() : R.norm() / nt;
}

inline Matrix mode1_least_squares(const DenseTensor& T, const Matrix& B, const Matrix& C,
                                  double pinv_tol) {
  const Matrix K = khatri_rao(B, C);
  Eigen::JacobiSVD<Matrix> svd(K);
  const Vector s = svd.singularValues();
  if (s.size() == 0 || s(s.size() - 1) <= 1e-12 * s(0))
    fail("cp_decomp", "least-squares rank deficiency in the mode-1 factor");
  return unfold(T, 0) * pinv(K.transpose(), pinv_tol);
}

inline long als_refine(const DenseTensor& T, Matrix& A, Matrix& B, Matrix& C, int iters,
                       double tol) {
  const Matrix T1 = unfold(T, 0), T2 = unfold(T, 1), T3 = unfold(T, 2);
  double prev = rel_residual(T, A, B, C);
  long it = 0;
  for (; it < iters; ++it) {
    A = T1 * khatri_rao(B, C) *
        pinv((B.transpose() * B).cwiseProduct(C.transpose() * C), 1e-14);
    B = T2 * khatri_rao(A, C) *
        pinv((A.transpose() * A).cwiseProduct(C.transpose() * C), 1e-14);
    C = T3 * khatri_rao(A, B) *
        pinv((A.transpose() * A).cwiseProduct(B.transpose() * B), 1e-14);
    // keep B, C unit so that A carries the weights
    for (Eigen::Index j = 0; j < B.cols(); ++j) {
      const double nb = B.col(j).norm(), nc = C.col(j).norm();
      if (nb > 0 && nc > 0) {
        A.col(j) *= nb * nc;
        B.col(j) /= nb;
        C.col(j) /= nc;
      }
    }
    const double r = rel_residual(T, A, B, C);
    if (std::abs(prev - r) <= tol * std::max(1.0, prev)) {
      ++it;
      break;
    }
    prev = r;
  }
  return it;
}

inline Index detect_rank(const DenseTensor& T, double tol) {
  Index k = T.dims[0] * T.dims[1] * T.dims[2];
  for (Index m = 0; m < 3; ++m) {
    const Vector s = singular_values(unfold(T, m));
    Index r = 0;
    const double top = s.size() ? s(0) : 0.0;
    for (Eigen::Index j = 0; j < s.size(); ++j)
      if (s(j) > tol * top && s(j) > 0) ++r;
    k = std::min(k, r);
  }
  return k;
}

// Unit columns, signs and ordering. A carries the weights on entry.
inline CpDecomposition finalize(const DenseTensor& T, Matrix A, Matrix B, Matrix C,
                                bool symmetric) {
  const Index k = A.cols();
  CpDecomposition cp;
  cp.rank = k;
  cp.weights.resize(k);
  for (Index j = 0; j < k; ++j) {
    const double na = A.col(j).norm(), nb = B.col(j).norm(), nc = C.col(j).norm();
    double w = na * nb * nc;
    Vector b = nb > 0 ? Vector(B.col(j) / nb) : Vector(B.col(j));
    Vector c = nc > 0 ? Vector(C.col(j) / nc) : Vector(C.col(j));
    Vector a = na > 0 ? Vector(A.col(j) / na) : Vector(A.col(j));
    const double sb = canonical_sign(b);
    b *= sb;
    a *= sb;
    // R3 follows R2 when the pair is (nearly) symmetric, else its own rule.
    const double sc = (b.size() == c.size() && std::abs(b.dot(c)) > 0.5)
                          ? (b.dot(c) >= 0 ? 1.0 : -1.0)
                          : canonical_sign(c);
    c *= sc;
    a *= sc;
    if (symmetric) {
      // R1 = R2 = R3, the weight keeps the sign.
      const double s = a.dot(b) >= 0 ? 1.0 : -1.0;
      w *= s;
      Vector m = (s * a + b + c) / 3.0;
      m.normalize();
      a = b = c = m;
    }
    A.col(j) = a;
    B.col(j) = b;
    C.col(j) = c;
    cp.weights(j) = w;
  }
  if (symmetric) {
    // weights by least squares on the shared factor
    const Matrix K = khatri_rao(A, khatri_rao(B, C));
    Eigen::Map<const Vector> t(T.data.data(), T.size());
    cp.weights = pinv(K) * t;
  }
  std::vector<Index> ord(k);
  std::iota(ord.begin(), ord.end(), Index{0});
  std::stable_sort(ord.begin(), ord.end(), [&](Index x, Index y) {
    const double wx = std::abs(cp.weights(x)), wy = std::abs(cp.weights(y));
    if (std::abs(wx - wy) > 1e-12 * std::max(wx, wy)) return wx > wy;
    return lex_less(B.col(y), B.col(x));
  });
  cp.R1.resize(A.rows(), k);
  cp.R2.resize(B.rows(), k);
  cp.R3.resize(C.rows(), k);
  Vector w2(k);
  for (Index j = 0; j < k; ++j) {
    cp.R1.col(j) = A.col(ord[j]);
    cp.R2.col(j) = B.col(ord[j]);
    cp.R3.col(j) = C.col(ord[j]);
    w2(j) = cp.weights(ord[j]);
  }
  cp.weights = w2;
  cp.residual = rel_residual(T, cp.R1 * cp.weights.asDiagonal(), cp.R2, cp.R3);
  return cp;
}

struct Candidate {
  Matrix A, B, C;
  std::string path;
  bool converged = true;
  long iterations = 0;
};

// C from whiten + power on a symmetric tensor, un-whitened.
inline Matrix symmetric_factor(const DenseTensor& S, Index k, const CpOptions& o, bool& conv,
                               long& its) {
  Whitening w = whiten(S, k, o.seed);
  PowerResult pr = power_method(w.core, k, o.restarts, o.iters, o.tol, o.seed, o.workers);
  conv = pr.converged;
  its = pr.iterations;
  Matrix C = w.V * w.lambda.cwiseAbs().cwiseSqrt().asDiagonal() * pr.vectors;
  for (Index j = 0; j < k; ++j) C.col(j).normalize();
  return C;
}

inline std::optional<Candidate> jennrich(const DenseTensor& T, Index k, const CpOptions& o) {
  const Index d1 = T.dims[0];
  const Matrix T2 = unfold(T, 1), T3 = unfold(T, 2);
  Eigen::BDCSVD<Matrix> s2(T2, Eigen::ComputeThinU), s3(T3, Eigen::ComputeThinU);
  const Matrix P2 = s2.matrixU().leftCols(k), P3 = s3.matrixU().leftCols(k);
  const DenseTensor Tp = multilinear(T, std::nullopt, P2, P3);  // d1 x k x k
  Rng rng(derive_seed(o.seed, 0x6a));
  std::normal_distribution<double> nd;
  double best_gap = -1.0;
  Matrix bestB, bestC;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Vector ta(d1), tb(d1);
    for (Index i = 0; i < d1; ++i) {
      ta(i) = nd(rng);
      tb(i) = nd(rng);
    }
    auto slice = [&](const Vector& th) {
      DenseTensor S = multilinear(Tp, Matrix(th), std::nullopt, std::nullopt);
      return Matrix(Eigen::Map<const RowMajorMatrix>(S.data.data(), k, k));
    };
    const Matrix Ma = slice(ta), Mb = slice(tb);
    Eigen::JacobiSVD<Matrix> sb(Mb);
    const Vector sv = sb.singularValues();
    if (sv(k - 1) <= 1e-12 * sv(0)) continue;
    const Matrix Mbi = Mb.inverse();
    Eigen::EigenSolver<Matrix> eb(Ma * Mbi), ec((Mbi * Ma).transpose());
    // pair eigenvalues by sorting real parts
    auto sorted = [&](const Eigen::EigenSolver<Matrix>& es, Matrix& vecs, Vector& vals,
                      double& imag) {
      std::vector<Index> ord(k);
      std::iota(ord.begin(), ord.end(), Index{0});
      const auto ev = es.eigenvalues();
      std::sort(ord.begin(), ord.end(),
                [&](Index a, Index b) { return ev(a).real() < ev(b).real(); });
      vecs.resize(k, k);
      vals.resize(k);
      imag = 0.0;
      for (Index j = 0; j < k; ++j) {
        vecs.col(j) = es.eigenvectors().col(ord[j]).real();
        vals(j) = ev(ord[j]).real();
        imag = std::max(imag, std::abs(ev(ord[j]).imag()));
      }
    };
    Matrix vb, vc;
    Vector lb, lc;
    double ib, ic;
    sorted(eb, vb, lb, ib);
    sorted(ec, vc, lc, ic);
    const double scale = std::max(lb.cwiseAbs().maxCoeff(), 1e-300);
    double gap = INFINITY;
    for (Index j = 0; j + 1 < k; ++j) gap = std::min(gap, (lb(j + 1) - lb(j)) / scale);
    if (k == 1) gap = 1.0;
    gap -= (ib + ic) / scale;
    if (gap > best_gap) {
      best_gap = gap;
      bestB = P2 * vb;
      bestC = P3 * vc;
    }
  }
  if (best_gap < 0) return std::nullopt;
  for (Index j = 0; j < k; ++j) {
    bestB.col(j).normalize();
    bestC.col(j).normalize();
  }
  Candidate c;
  c.B = bestB;
  c.C = bestC;
  c.A = mode1_least_squares(T, c.B, c.C, o.pinv_tol);
  Matrix A = c.A, B = c.B, C = c.C;
  const double before = rel_residual(T, A, B, C);
  c.iterations = als_refine(T, A, B, C, o.als_iters, 1e-15);
  if (A.allFinite() && B.allFinite() && C.allFinite() && rel_residual(T, A, B, C) < before) {
    c.A = A;
    c.B = B;
    c.C = C;
    c.path = "jennrich+als";
  } else {
    c.path = "jennrich";
  }
  return c;
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline CpDecomposition decompose(const DenseTensor& T, const std::optional<Matrix>& M1,
                                 const CpOptions& opt = {}) {
  require(T.order() == 3, "cp_decomp", "decompose needs an order-3 tensor");
  require(T.data.size() == T.size() && std::all_of(T.data.begin(), T.data.end(),
                                                   [](double v) { return std::isfinite(v); }),
          "cp_decomp", "tensor has non-finite entries");
  const Index d1 = T.dims[0], d2 = T.dims[1], d3 = T.dims[2];
  Index k = opt.rank;
  const bool auto_rank = k == 0;
  if (T.norm() == 0.0) {
    CpDecomposition cp;
    cp.R1.resize(d1, 0);
    cp.R2.resize(d2, 0);
    cp.R3.resize(d3, 0);
    cp.path = "zero";
    return cp;
  }
  if (auto_rank) k = detail::detect_rank(T, opt.rank_tol);
  require(k >= 1 && k <= std::min(d2, d3) && k <= d1 * std::max(d2, d3), "cp_decomp",
          "rank exceeds tensor dimensions", ErrorKind::config);
  CpOptions o = opt;
  o.rank = k;
  if (o.restarts == 0) o.restarts = 10 * k;

  const bool symmetric = d1 == d2 && d2 == d3 && symmetry_residual(T) <= 1e-10;
  std::vector<detail::Candidate> cands;
  std::string first_error;

  // Symmetrization route.
  if (M1 && d2 == d3) {
    try {
      require(static_cast<Index>(M1->rows()) == d1 && static_cast<Index>(M1->cols()) == d2,
              "cp_decomp", "M1 must be d1 x d2", ErrorKind::config);
      const Vector sv = singular_values(*M1);
      Index r = 0;
      for (Eigen::Index j = 0; j < sv.size(); ++j)
        if (sv(j) > 1e-12 * sv(0)) ++r;
      const double cond = r >= k && sv(k - 1) > 0 ? sv(0) / sv(k - 1) : INFINITY;
      if (cond <= o.cond_max) {
        const DenseTensor S = symmetrize_all(symmetrize(T, symmetrization_matrix(*M1, o.pinv_tol)));
        detail::Candidate c;
        c.C = detail::symmetric_factor(S, k, o, c.converged, c.iterations);
        c.B = c.C;
        c.A = detail::mode1_least_squares(T, c.B, c.C, o.pinv_tol);
        c.path = "symmetrization";
        cands.push_back(std::move(c));
      }
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::config) throw;
      first_error = e.what();
    }
  }
  // Symmetric route.
  if (symmetric) {
    try {
      detail::Candidate c;
      c.C = detail::symmetric_factor(T, k, o, c.converged, c.iterations);
      c.B = c.C;
      c.A = detail::mode1_least_squares(T, c.B, c.C, o.pinv_tol);
      c.path = "symmetric-power";
      cands.push_back(std::move(c));
    } catch (const Error& e) {
      if (first_error.empty()) first_error = e.what();
    }
  }
  // Simultaneous diagonalization.
  try {
    if (auto c = detail::jennrich(T, k, o)) cands.push_back(std::move(*c));
  } catch (const Error& e) {
    if (first_error.empty()) first_error = e.what();
  }
  if (cands.empty())
    fail("cp_decomp", first_error.empty() ? "rank deficiency; check full-rank assumption"
                                          : first_error);

  double best_r = INFINITY;
  for (const auto& c : cands) best_r = std::min(best_r, detail::rel_residual(T, c.A, c.B, c.C));
  const detail::Candidate* pick = nullptr;
  for (const auto& c : cands)
    if (detail::rel_residual(T, c.A, c.B, c.C) <= best_r * (1 + 1e-6) + 1e-13) {
      pick = &c;
      break;
    }
  CpDecomposition cp = detail::finalize(T, pick->A, pick->B, pick->C, symmetric);
  cp.path = pick->path;
  cp.converged = pick->converged;
  cp.iterations = pick->iterations;
  if (auto_rank) {
    const double wmax = cp.weights.cwiseAbs().maxCoeff();
    std::vector<Index> keep;
    for (Index j = 0; j < cp.rank; ++j)
      if (std::abs(cp.weights(j)) > opt.rank_tol * wmax) keep.push_back(j);
    if (keep.size() < cp.rank) {
      CpDecomposition r = cp;
      r.rank = keep.size();
      r.weights.resize(r.rank);
      r.R1.resize(d1, r.rank);
      r.R2.resize(d2, r.rank);
      r.R3.resize(d3, r.rank);
      for (Index j = 0; j < r.rank; ++j) {
        r.weights(j) = cp.weights(keep[j]);
        r.R1.col(j) = cp.R1.col(keep[j]);
        r.R2.col(j) = cp.R2.col(keep[j]);
        r.R3.col(j) = cp.R3.col(keep[j]);
      }
      r.residual = detail::rel_residual(T, r.R1 * r.weights.asDiagonal(), r.R2, r.R3);
      cp = r;
    }
  }
  return cp;
}

}  // namespace srnn
