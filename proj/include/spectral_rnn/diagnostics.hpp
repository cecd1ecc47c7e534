#pragma once

// Evaluation of recovered weights against ground truth, the bound formulas
// of the sample-complexity analysis, mixing of the input chain and
// sample-size sweeps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "error.hpp"
#include "gloree.hpp"
#include "parallel.hpp"
#include "sequence.hpp"
#include "tensor.hpp"

namespace srnn {

// ---------------------------------------------------------------------------
// Alignment.

enum class SignSymmetry {
  joint,        // even l: flip A1 row i together with U row i
  independent,  // each matrix row flips on its own (CP factors)
  none,         // odd l: no sign freedom
};

struct AlignOptions {
  SignSymmetry signs = SignSymmetry::joint;
  bool fit_scale = false;          // positive per-unit scale on A2 (directions-only estimates)
  bool canonicalize_truth = true;  // rescale truth to unit A1 rows first
};

struct RecoveryReport {
  std::vector<Index> permutation;  // truth unit i <-> estimate unit permutation[i]
  std::vector<double> signs;
  std::vector<double> scales;
  std::map<std::string, std::vector<double>> per_row_errors;
  double max_error = 0.0;
  double median_error = 0.0;
  double sigma_min_A1 = 0.0, sigma_min_A2 = 0.0, sigma_min_U = 0.0;

  double max_of(const std::string& m) const {
    const auto& v = per_row_errors.at(m);
    return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
  }
};

namespace detail {

// Minimum-cost assignment (Hungarian, O(n^3)). Rows and columns are scanned
// in index order, so ties resolve toward the lowest indices.
inline std::vector<Index> hungarian(const Matrix& cost) {
  const Index n = cost.rows();
  require(static_cast<Index>(cost.cols()) == n, "diagnostics", "assignment needs a square cost",
          ErrorKind::config);
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<Index> p(n + 1, 0), way(n + 1, 0);
  std::vector<bool> used(n + 1);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), false);
    do {
      used[j0] = true;
      const Index i0 = p[j0];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const Index j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<Index> match(n);
  for (Index j = 1; j <= n; ++j) match[p[j] - 1] = j - 1;
  return match;
}

inline double sigma_min(const Matrix& M) {
  if (M.size() == 0) return 0.0;
  const Vector s = singular_values(M);
  return s(s.size() - 1);
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace detail

// Optimal matching of estimate rows to truth rows on |cosine| of the primary
// matrices, the same permutation and signs applied to every coupled matrix.
// Any of A2, U may be empty (not compared).
inline RecoveryReport align(const Matrix& A1_hat, const Matrix& A2_hat, const Matrix& U_hat,
                            const Matrix& A1, const Matrix& A2, const Matrix& U,
                            const AlignOptions& opt = {}) {
  const Index k = A1.rows();
  require(A1_hat.rows() == A1.rows() && A1_hat.cols() == A1.cols(), "diagnostics",
          "shape mismatch between estimate and truth for A1", ErrorKind::config);
  const bool has_a2 = A2.size() > 0, has_u = U.size() > 0;
  if (has_a2)
    require(A2_hat.rows() == A2.rows() && A2_hat.cols() == A2.cols() && A2.rows() == A1.rows(),
            "diagnostics", "shape mismatch between estimate and truth for A2", ErrorKind::config);
  if (has_u)
    require(U_hat.rows() == U.rows() && U_hat.cols() == U.cols() && U.rows() == A1.rows() &&
                U.cols() == A1.rows(),
            "diagnostics", "shape mismatch between estimate and truth for U", ErrorKind::config);

  Matrix cost(k, k);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j) {
      const double den = A1.row(i).norm() * A1_hat.row(j).norm();
      cost(i, j) = den > 0 ? -std::abs(A1.row(i).dot(A1_hat.row(j))) / den : 0.0;
    }
  RecoveryReport r;
  r.permutation = detail::hungarian(cost);
  r.signs.assign(k, 1.0);
  r.scales.assign(k, 1.0);
  auto& e1 = r.per_row_errors["A1"];
  for (Index i = 0; i < k; ++i) {
    const auto p = r.permutation[i];
    if (opt.signs != SignSymmetry::none && A1.row(i).dot(A1_hat.row(p)) < 0) r.signs[i] = -1.0;
    e1.push_back((r.signs[i] * A1_hat.row(p) - A1.row(i)).norm());
  }
  if (has_a2) {
    auto& e2 = r.per_row_errors["A2"];
    for (Index i = 0; i < k; ++i) {
      const auto p = r.permutation[i];
      Vector est = A2_hat.row(p).transpose();
      if (opt.signs == SignSymmetry::independent && est.dot(A2.row(i).transpose()) < 0) est = -est;
      if (opt.fit_scale && est.squaredNorm() > 0) {
        const double s = std::max(0.0, est.dot(A2.row(i).transpose()) / est.squaredNorm());
        r.scales[i] = s;
        est *= s;
      }
      e2.push_back((est - A2.row(i).transpose()).norm());
    }
  }
  if (has_u) {
    auto& eu = r.per_row_errors["U"];
    for (Index i = 0; i < k; ++i) {
      Vector row(k);
      for (Index j = 0; j < k; ++j) row(j) = U_hat(r.permutation[i], r.permutation[j]);
      if (opt.signs == SignSymmetry::joint) row *= r.signs[i];
      if (opt.signs == SignSymmetry::independent && row.dot(U.row(i).transpose()) < 0) row = -row;
      eu.push_back((row - U.row(i).transpose()).norm());
    }
  }
  std::vector<double> all;
  for (const auto& [name, v] : r.per_row_errors) all.insert(all.end(), v.begin(), v.end());
  r.max_error = all.empty() ? 0.0 : *std::max_element(all.begin(), all.end());
  r.median_error = detail::median(all);
  r.sigma_min_A1 = detail::sigma_min(A1);
  r.sigma_min_A2 = has_a2 ? detail::sigma_min(A2) : 0.0;
  r.sigma_min_U = has_u ? detail::sigma_min(U) : 0.0;
  return r;
}

inline RecoveryReport align(const RnnEstimate& est, const RnnParams& truth,
                            const AlignOptions& opt = {}, bool compare_u = true) {
  RnnParams t = truth;
  if (opt.canonicalize_truth && t.act.monomial() && t.l() >= 2) canonicalize(t);
  return align(est.A1_hat, est.A2_hat, est.U_hat, t.A1, t.A2, compare_u ? t.U : Matrix(), opt);
}

// Applies one ambiguity-group element to an estimate: a permutation of units
// and joint sign flips.
inline RnnEstimate act_on(const RnnEstimate& est, const std::vector<Index>& perm,
                          const std::vector<double>& signs) {
  const Index k = perm.size();
  RnnEstimate out = est;
  for (Index i = 0; i < k; ++i) {
    out.A1_hat.row(i) = signs[i] * est.A1_hat.row(perm[i]);
    out.A2_hat.row(i) = est.A2_hat.row(perm[i]);
    for (Index j = 0; j < k; ++j) out.U_hat(i, j) = signs[i] * est.U_hat(perm[i], perm[j]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bound formulas.

inline double lipschitz_bound(const RnnParams& p, double s2_norm, double gamma, double n) {
  const double nu = spectral_norm(p.U);
  const double l = p.l();
  require(l * nu < 1.0, "diagnostics", "contraction assumption violated");
  require(n > 0 && s2_norm >= 0 && gamma >= 0, "diagnostics",
          "lipschitz bound needs n > 0 and non-negative norms", ErrorKind::config);
  return (1.0 / n) * spectral_norm(p.A2) *
         (spectral_norm(p.A1) / (1.0 - l * nu) * s2_norm + 3.0 * gamma);
}

inline double concentration_bound(double G, double theta, double c, double n, double d1,
                                  double d2, double delta) {
  require(G > 0 && theta >= 0 && theta < 1 && c > 0 && n > 0 && delta > 0 && delta < 1 &&
              d1 + d2 > 0,
          "diagnostics",
          "concentration bound needs G > 0, theta in [0,1), c > 0, n > 0, delta in (0,1)",
          ErrorKind::config);
  return G * (1.0 + 1.0 / (std::sqrt(8.0) * c * std::pow(n, 1.5))) / (1.0 - theta) *
         std::sqrt(8.0 * c * c * n * std::log((d1 + d2) / delta));
}

// ---------------------------------------------------------------------------
// Mixing of the linear-Gaussian chain.

struct MixingEstimate {
  double G_hat = 0.0;
  double theta_hat = 0.0;
  std::vector<double> curve;  // curve[t-1] = rho_mix(t), t = 1..T
  bool fit_ok = true;
};

namespace detail {

inline Matrix psd_sqrt(const Matrix& S) {
  Eigen::SelfAdjointEigenSolver<Matrix> es((S + S.transpose()) / 2.0);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

// 2-Wasserstein distance between N(m1, S1) and N(m2, S2).
inline double gaussian_w2(const Vector& m1, const Matrix& S1, const Vector& m2, const Matrix& S2) {
  const Matrix r2 = psd_sqrt(S2);
  const Matrix cross = psd_sqrt(r2 * S1 * r2);
  const double tr = (S1 + S2 - 2.0 * cross).trace();
  return std::sqrt(std::max(0.0, (m1 - m2).squaredNorm() + tr));
}

}  // namespace detail

// rho(t) = sup_{|x_1| <= 1} W2(law(x_t | x_1), stationary law); the supremum
// is taken over the top right singular vector of W^(t-1) and mc_draws random
// unit vectors, both signs.
inline MixingEstimate mixing_estimate(const MarkovChainSpec& spec, Index T, Index mc_draws = 64,
                                      std::uint64_t seed = 1) {
  spec.validate();
  require(T >= 2, "diagnostics", "mixing horizon must be at least 2", ErrorKind::config);
  const Index d = spec.d_x();
  const Vector mu = stationary_mean(spec);
  const Matrix Sinf = stationary_covariance(spec);
  Rng rng(seed);
  std::vector<Vector> dirs;
  for (Index r = 0; r < mc_draws; ++r) {
    Vector v = random_gaussian_matrix(d, 1, rng).col(0);
    dirs.push_back(v.normalized());
  }
  MixingEstimate m;
  Matrix P = Matrix::Identity(d, d);  // W^(t-1)
  Matrix St = Matrix::Zero(d, d);     // covariance of x_t given x_1
  const double s2 = spec.sigma * spec.sigma;
  for (Index t = 1; t <= T; ++t) {
    Eigen::JacobiSVD<Matrix> svd(P, Eigen::ComputeFullV);
    std::vector<Vector> cand = dirs;
    cand.push_back(svd.matrixV().col(0));
    double best = 0.0;
    for (const Vector& v : cand)
      for (double sg : {1.0, -1.0}) {
        const Vector x1 = sg * v;
        const Vector mean = P * (x1 - mu) + mu;
        best = std::max(best, detail::gaussian_w2(mean, St, mu, Sinf));
      }
    m.curve.push_back(best);
    St = spec.W * St * spec.W.transpose() + s2 * Matrix::Identity(d, d);
    P = spec.W * P;
  }
  // W = 0 (iid): distance vanishes after one step.
  bool iid = true;
  for (Index t = 1; t < T; ++t) iid = iid && m.curve[t] <= 1e-12;
  if (iid) {
    m.G_hat = m.curve[0];
    m.theta_hat = 0.0;
    return m;
  }
  // log rho(t) = log G + (t - 1) log theta over the positive tail
  std::vector<double> xs, ys;
  for (Index t = 1; t <= T; ++t)
    if (m.curve[t - 1] > 1e-300) {
      xs.push_back(static_cast<double>(t - 1));
      ys.push_back(std::log(m.curve[t - 1]));
    }
  if (xs.size() < 2) {
    m.fit_ok = false;
    return m;
  }
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / ys.size();
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  const double slope = sxy / sxx;
  m.theta_hat = std::clamp(std::exp(slope), 0.0, std::nextafter(1.0, 0.0));
  m.G_hat = std::exp(my - slope * mx);
  m.fit_ok = std::isfinite(slope) && slope < 0;
  return m;
}

// ---------------------------------------------------------------------------
// gamma: high quantile of |grad S_2(x[n], t)|_F over positions. The local
// score is s = (r_t - W^T r_{t+1}) / sigma^2 with Jacobian J w.r.t.
// (x_{t-1}, x_t, x_{t+1}); |grad (s s^T)|_F^2 = 2 |J|_F^2 |s|^2 + 2 |J^T s|^2.
inline double gamma_estimate(const Matrix& x, const MarkovChainSpec& spec, double q = 0.999) {
  spec.validate();
  require(q > 0 && q < 1, "diagnostics", "quantile must lie in (0,1)", ErrorKind::config);
  const Index d = spec.d_x(), n = x.cols();
  require(static_cast<Index>(x.rows()) == d && n >= 3, "diagnostics",
          "need a d_x x n input sequence with n ≥ 3", ErrorKind::config);
  const double s2 = spec.sigma * spec.sigma;
  Matrix J(d, 3 * d);
  J << -spec.W / s2, (Matrix::Identity(d, d) + spec.W.transpose() * spec.W) / s2,
      -spec.W.transpose() / s2;
  const double jf = J.squaredNorm();
  const Vector b = spec.drift_or_zero();
  std::vector<double> g;
  g.reserve(n - 2);
  for (Index t = 1; t + 1 < n; ++t) {
    const Vector r0 = x.col(t) - spec.W * x.col(t - 1) - b;
    const Vector r1 = x.col(t + 1) - spec.W * x.col(t) - b;
    const Vector s = (r0 - spec.W.transpose() * r1) / s2;
    g.push_back(std::sqrt(2.0 * jf * s.squaredNorm() + 2.0 * (J.transpose() * s).squaredNorm()));
  }
  const std::size_t k = std::min(g.size() - 1, static_cast<std::size_t>(q * g.size()));
  std::nth_element(g.begin(), g.begin() + k, g.end());
  return g[k];
}

// ---------------------------------------------------------------------------
// Sample-size sweep: generate -> train -> align per (n, seed).

struct SweepConfig {
  RnnParams truth;
  MarkovChainSpec spec;
  std::vector<Index> n_grid;
  std::vector<std::uint64_t> seeds;
  GloreeOptions gloree;
  AlignOptions align;
  std::string slope_matrix = "A1";
  std::string config_hash;
  int workers = 1;  // cells in parallel
};

struct SweepRow {
  Index n;
  std::uint64_t seed;
  std::string matrix;
  Index row;
  double error;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<std::string> cell_errors;  // "n=..,seed=..: message"
  std::vector<double> median_max_error;  // per n, of slope_matrix
  double slope = 0.0, intercept = 0.0;

  std::string csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "n,seed,matrix,row,error\n";
    for (const auto& r : rows)
      os << r.n << ',' << r.seed << ',' << r.matrix << ',' << r.row << ',' << r.error << '\n';
    return os.str();
  }
};

inline std::pair<double, double> loglog_fit(const std::vector<double>& x,
                                            const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, "diagnostics", "fit needs at least two points");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    require(x[i] > 0 && y[i] > 0, "diagnostics", "log-log fit needs positive values");
    lx.push_back(std::log(x[i]));
    ly.push_back(std::log(y[i]));
  }
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / lx.size();
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / ly.size();
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  const double slope = sxy / sxx;
  return {slope, my - slope * mx};
}

inline SweepResult sample_sweep(const SweepConfig& cfg) {
  require(cfg.n_grid.size() >= 3, "diagnostics", "sweep needs an n grid of at least 3 points",
          ErrorKind::config);
  require(!cfg.seeds.empty(), "diagnostics", "sweep needs at least one seed", ErrorKind::config);
  cfg.spec.validate();
  cfg.truth.validate_shapes();
  const Index nn = cfg.n_grid.size(), ns = cfg.seeds.size();
  struct Cell {
    std::vector<SweepRow> rows;
    std::string error;
    double slope_err = NAN;
  };
  std::vector<Cell> cells(nn * ns);
  parallel_for(cells.size(), cfg.workers, [&](std::size_t c) {
    const Index in = c / ns, is = c % ns;
    const Index n = cfg.n_grid[in];
    const std::uint64_t seed = cfg.seeds[is];
    Cell& cell = cells[c];
    try {
      const Matrix x = sample_markov_chain(cfg.spec, n, derive_seed(seed, 1));
      const SequenceData data = rnn_forward(cfg.truth, x);
      const RnnEstimate est = gloree_quadratic(data, cfg.spec, cfg.truth.d_h(), cfg.gloree);
      const RecoveryReport rep = align(est, cfg.truth, cfg.align, cfg.gloree.recover_u);
      for (const auto& [name, v] : rep.per_row_errors)
        for (Index r = 0; r < static_cast<Index>(v.size()); ++r) cell.rows.push_back({n, seed, name, r, v[r]});
      cell.slope_err = rep.max_of(cfg.slope_matrix);
    } catch (const std::exception& e) {
      cell.error = "n=" + std::to_string(n) + ",seed=" + std::to_string(seed) + ": " + e.what();
    }
  });
  SweepResult res;
  std::vector<double> xs, ys;
  for (Index in = 0; in < nn; ++in) {
    std::vector<double> errs;
    for (Index is = 0; is < ns; ++is) {
      const Cell& cell = cells[in * ns + is];
      res.rows.insert(res.rows.end(), cell.rows.begin(), cell.rows.end());
      if (!cell.error.empty()) res.cell_errors.push_back(cell.error);
      if (std::isfinite(cell.slope_err)) errs.push_back(cell.slope_err);
    }
    const double med = errs.empty() ? NAN : detail::median(errs);
    res.median_max_error.push_back(med);
    if (std::isfinite(med) && med > 0) {
      xs.push_back(static_cast<double>(cfg.n_grid[in]));
      ys.push_back(med);
    }
  }
  if (xs.size() >= 2) std::tie(res.slope, res.intercept) = loglog_fit(xs, ys);
  else res.slope = res.intercept = NAN;
  return res;
}

}  // namespace srnn
