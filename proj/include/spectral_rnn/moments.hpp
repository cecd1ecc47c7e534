#pragma once

// Cross moments E[y_t (x) S_m(x[n], t+shift)] estimated from data, and a
// population oracle that differentiates the network output directly.
//
// Every estimator reduces to one engine: a list of score targets
// (shift, order). A single target uses the local score of x_{t+shift}; several
// targets use the joint score of the contiguous block that covers them, and
// only the entries along the requested blocks are kept. Output modes are laid
// out as [d_y, d_x, ..., d_x] in target order, last index fastest.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <vector>

#include "error.hpp"
#include "parallel.hpp"
#include "polynomial.hpp"
#include "score.hpp"
#include "sequence.hpp"
#include "tensor.hpp"

namespace srnn {

enum class MomentKind {
  s1_matrix,    // d_y x d_x, shift = -lag
  s2_order3,    // d_y x d_x x d_x
  s3_scalar,    // d_x x d_x x d_x (d_y = 1)
  s4_reshaped,  // d_y x d_x^2 x d_x^2
  sm_reshaped,  // d_y x d_x^split x d_x^(order-split)
  mixed,        // d_y x d_x^(total order), several targets
};

struct ScoreTarget {
  int shift = 0;
  int order = 1;
};

struct MomentRequest {
  MomentKind kind = MomentKind::s2_order3;
  int shift = 0;
  int order = 0;  // sm_reshaped
  int split = 0;  // sm_reshaped
  std::vector<ScoreTarget> targets;  // mixed

  static MomentRequest s1(int lag = 0) { return {MomentKind::s1_matrix, -lag, 1, 0, {}}; }
  static MomentRequest s2() { return {MomentKind::s2_order3, 0, 2, 0, {}}; }
  static MomentRequest s3_scalar() { return {MomentKind::s3_scalar, 0, 3, 0, {}}; }
  static MomentRequest s4(int shift = -1) { return {MomentKind::s4_reshaped, shift, 4, 0, {}}; }
  static MomentRequest sm(int order, int split, int shift) {
    return {MomentKind::sm_reshaped, shift, order, split, {}};
  }
  static MomentRequest mixed_of(std::vector<ScoreTarget> t) {
    return {MomentKind::mixed, 0, 0, 0, std::move(t)};
  }

  std::vector<ScoreTarget> resolve() const {
    if (kind == MomentKind::mixed) {
      require(!targets.empty(), "moments", "mixed moment needs at least one target",
              ErrorKind::config);
      return targets;
    }
    const int m = kind == MomentKind::s1_matrix   ? 1
                  : kind == MomentKind::s2_order3 ? 2
                  : kind == MomentKind::s3_scalar ? 3
                  : kind == MomentKind::s4_reshaped ? 4
                                                    : order;
    require(m >= 1, "moments", "score order must be at least 1", ErrorKind::config);
    if (kind == MomentKind::sm_reshaped)
      require(split >= 1 && split < m, "moments", "reshape split must lie inside the order",
              ErrorKind::config);
    return {{shift, m}};
  }
};

struct MomentTensor {
  DenseTensor value;
  MomentKind kind = MomentKind::s2_order3;
  Index n_used = 0;
  int shift = 0;
  double se_norm = 0.0;  // Frobenius norm of the entrywise standard errors
};

struct MomentOptions {
  Index burn_in = 10;
  int workers = 1;
  Index chunk = 4096;
};

inline const char* kind_name(MomentKind k) {
  switch (k) {
    case MomentKind::s1_matrix: return "S1-matrix";
    case MomentKind::s2_order3: return "S2-order3";
    case MomentKind::s3_scalar: return "S3-order4-scalar";
    case MomentKind::s4_reshaped: return "S4-reshaped-order3";
    case MomentKind::sm_reshaped: return "Sm-reshaped-order3";
    case MomentKind::mixed: return "mixed";
  }
  return "?";
}

namespace detail {

inline int total_order(const std::vector<ScoreTarget>& ts) {
  int m = 0;
  for (const auto& t : ts) {
    require(t.order >= 1, "moments", "score order must be at least 1", ErrorKind::config);
    m += t.order;
  }
  return m;
}

inline void check_distinct(const std::vector<ScoreTarget>& ts) {
  for (std::size_t i = 0; i < ts.size(); ++i)
    for (std::size_t j = i + 1; j < ts.size(); ++j)
      require(ts[i].shift != ts[j].shift, "moments", "score targets must have distinct shifts",
              ErrorKind::config);
}

inline Index ipow(Index b, int e) {
  Index r = 1;
  for (int i = 0; i < e; ++i) r *= b;
  return r;
}

// Raw [d_y, d, ..., d] tensor to the layout of the requested kind.
inline DenseTensor shape_for(const MomentRequest& req, DenseTensor raw, Index d_y, Index d) {
  switch (req.kind) {
    case MomentKind::s1_matrix: raw.dims = {d_y, d}; break;
    case MomentKind::s2_order3: raw.dims = {d_y, d, d}; break;
    case MomentKind::s3_scalar:
      require(d_y == 1, "moments", "scalar moment requires d_y = 1", ErrorKind::config);
      raw.dims = {d, d, d};
      break;
    case MomentKind::s4_reshaped: raw.dims = {d_y, d * d, d * d}; break;
    case MomentKind::sm_reshaped:
      raw.dims = {d_y, ipow(d, req.split), ipow(d, req.order - req.split)};
      break;
    case MomentKind::mixed: break;
  }
  return raw;
}

// Column c of the output (flattened over target modes) as a list of block
// variable indices, for a block that starts at shift `smin`.
inline std::vector<std::vector<Index>> column_variables(const std::vector<ScoreTarget>& ts,
                                                        Index d, int smin) {
  std::vector<Index> modes;  // block offset of every mode
  for (const auto& t : ts)
    for (int k = 0; k < t.order; ++k) modes.push_back(static_cast<Index>(t.shift - smin) * d);
  const Index M = modes.size();
  const Index width = ipow(d, static_cast<int>(M));
  std::vector<std::vector<Index>> cols(width, std::vector<Index>(M));
  std::vector<Index> idx(M, 0);
  for (Index c = 0; c < width; ++c) {
    for (Index k = 0; k < M; ++k) cols[c][k] = modes[k] + idx[k];
    for (Index k = M; k-- > 0;) {
      if (++idx[k] < d) break;
      idx[k] = 0;
    }
  }
  return cols;
}

struct Accum {
  Matrix sum, sq;
};

inline Accum add_accum(Accum a, const Accum& b) {
  a.sum += b.sum;
  a.sq += b.sq;
  return a;
}

}  // namespace detail

// Generic empirical engine over one or more sequences.
inline MomentTensor cross_moment(const std::vector<const SequenceData*>& seqs,
                                 const MarkovChainSpec& spec, const MomentRequest& req,
                                 const MomentOptions& opt = {}) {
  spec.validate();
  require(!seqs.empty(), "moments", "no sequences given", ErrorKind::config);
  const auto ts = req.resolve();
  detail::check_distinct(ts);
  const int M = detail::total_order(ts);
  int smin = ts[0].shift, smax = ts[0].shift;
  for (const auto& t : ts) {
    smin = std::min(smin, t.shift);
    smax = std::max(smax, t.shift);
  }
  const Index d = spec.d_x();
  const Index d_y = seqs[0]->y.rows();
  const Index len = static_cast<Index>(smax - smin + 1);
  const Index bd = len * d;
  const Index width = detail::ipow(d, M);

  // Map each output column to its entry in the flattened block Hermite tensor.
  const auto colvars = detail::column_variables(ts, d, smin);
  std::vector<Index> colmap(width);
  for (Index c = 0; c < width; ++c) {
    Index f = 0;
    for (Index v : colvars[c]) f = f * bd + v;
    colmap[c] = f;
  }
  auto tab = HermiteTable::get(bd, M);
  const Matrix lam = block_precision(spec, len);
  const double s2 = spec.sigma * spec.sigma;
  const Vector b = spec.drift_or_zero();

  detail::Accum total{Matrix::Zero(d_y, width), Matrix::Zero(d_y, width)};
  Index n_used = 0;
  for (const SequenceData* sq : seqs) {
    const Matrix& x = sq->x;
    const Matrix& y = sq->y;
    const Index n = x.cols();
    require(static_cast<Index>(x.rows()) == d, "moments", "input dimension does not match the chain",
            ErrorKind::config);
    require(static_cast<Index>(y.rows()) == d_y && y.cols() == x.cols(), "moments",
            "outputs must be d_y x n with the same n as the inputs", ErrorKind::config);
    require(n >= 3, "moments", "sequence too short: need n ≥ 3");
    // Valid t: every target position interior, t past the burn-in.
    const long lo = std::max<long>(static_cast<long>(opt.burn_in), 1L - smin);
    const long hi = std::min<long>(static_cast<long>(n) - 1, static_cast<long>(n) - 2 - smax);
    if (hi < lo) continue;
    const Index count = static_cast<Index>(hi - lo + 1);

    // All local score vectors at once: (r_t - W^T r_{t+1}) / sigma^2.
    Matrix R = x.rightCols(n - 1) - spec.W * x.leftCols(n - 1);
    R.colwise() -= b;  // R.col(k) is the residual at position k+1
    Matrix S = Matrix::Zero(d, n);
    S.middleCols(1, n - 2) =
        (R.leftCols(n - 2) - spec.W.transpose() * R.rightCols(n - 2)) / s2;

    auto part = chunked_reduce<detail::Accum>(
        count, opt.chunk, opt.workers,
        [&](Index cb, Index ce) {
          detail::Accum a{Matrix::Zero(d_y, width), Matrix::Zero(d_y, width)};
          const Index sub = 256;
          Matrix Sb(sub, width), Yb(d_y, sub);
          std::vector<std::vector<double>> herm;
          Vector blk(bd);
          for (Index b0 = cb; b0 < ce; b0 += sub) {
            const Index nb = std::min(sub, ce - b0);
            for (Index r = 0; r < nb; ++r) {
              const Index t = static_cast<Index>(lo) + b0 + r;
              const Index p0 = static_cast<Index>(static_cast<long>(t) + smin);
              for (Index k = 0; k < len; ++k) blk.segment(k * d, d) = S.col(p0 + k);
              tab->evaluate(blk.data(), lam.data(), herm);
              const auto& h = herm[M];
              for (Index c = 0; c < width; ++c) Sb(r, c) = h[colmap[c]];
              Yb.col(r) = y.col(t);
            }
            a.sum.noalias() += Yb.leftCols(nb) * Sb.topRows(nb);
            a.sq.noalias() +=
                Yb.leftCols(nb).cwiseAbs2() * Sb.topRows(nb).cwiseAbs2();
          }
          return a;
        },
        detail::add_accum);
    total = detail::add_accum(std::move(total), part);
    n_used += count;
  }
  require(n_used >= 1, "moments", "no valid positions after burn-in and boundaries");

  const double inv = 1.0 / static_cast<double>(n_used);
  Matrix mean = total.sum * inv;
  Matrix var = (total.sq * inv - mean.cwiseAbs2()).cwiseMax(0.0);
  MomentTensor mt;
  std::vector<Index> dims{d_y};
  for (int k = 0; k < M; ++k) dims.push_back(d);
  DenseTensor raw(dims);
  // mean is d_y x width column-major; the tensor is row-major in (y, column).
  for (Index i = 0; i < d_y; ++i)
    for (Index c = 0; c < width; ++c) raw.data[i * width + c] = mean(i, c);
  mt.value = detail::shape_for(req, std::move(raw), d_y, d);
  mt.kind = req.kind;
  mt.n_used = n_used;
  mt.shift = ts.size() == 1 ? ts[0].shift : smin;
  mt.se_norm = std::sqrt(var.sum() * inv);
  return mt;
}

inline MomentTensor cross_moment(const SequenceData& data, const MarkovChainSpec& spec,
                                 const MomentRequest& req, const MomentOptions& opt = {}) {
  return cross_moment(std::vector<const SequenceData*>{&data}, spec, req, opt);
}

inline MomentTensor cross_moment_s1(const SequenceData& data, const MarkovChainSpec& spec,
                                    const MomentOptions& opt = {}) {
  return cross_moment(data, spec, MomentRequest::s1(0), opt);
}

inline MomentTensor cross_moment_s2(const SequenceData& data, const MarkovChainSpec& spec,
                                    const MomentOptions& opt = {}) {
  return cross_moment(data, spec, MomentRequest::s2(), opt);
}

inline MomentTensor cross_moment_s4_reshaped(const SequenceData& data,
                                             const MarkovChainSpec& spec, int shift = -1,
                                             const MomentOptions& opt = {}) {
  require(data.n() >= 4, "moments", "sequence too short: need n ≥ 4");
  return cross_moment(data, spec, MomentRequest::s4(shift), opt);
}

inline MomentTensor cross_moment_s3_scalar(const SequenceData& data, const MarkovChainSpec& spec,
                                           const MomentOptions& opt = {}) {
  require(data.y.rows() == 1, "moments", "scalar moment requires d_y = 1", ErrorKind::config);
  return cross_moment(data, spec, MomentRequest::s3_scalar(), opt);
}

// Blocks k = 0..K of E[y_t (x) S_1(x[n], t-k)].
inline std::vector<Matrix> toeplitz_blocks(const SequenceData& data, const MarkovChainSpec& spec,
                                           Index K, const MomentOptions& opt = {}) {
  require(2 * K < data.n(), "moments", "K too large: need K < n/2", ErrorKind::config);
  std::vector<Matrix> out;
  for (Index k = 0; k <= K; ++k) {
    auto mt = cross_moment(data, spec, MomentRequest::s1(static_cast<int>(k)), opt);
    out.push_back(to_matrix(mt.value));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stein control variates.
//
// For a single target of order m at shift s, any feature that is a polynomial
// of degree below m in x_{t+s} times a function of the other inputs has zero
// cross moment with S_m(x[n], t+s). Regressing y_t on such features and
// keeping the residual leaves the moment unchanged and removes most of its
// variance. Context features are monomials of degree <= 2 in x_t (when s != 0)
// and, for causal models with s <= 0, y_{t+s-1}; the latter must not be used with
// bidirectional data because those outputs depend on every input.

struct ControlVariateOptions {
  bool causal_outputs = true;
  int context_degree = 2;
  Index max_features = 512;
};

namespace detail {

inline std::vector<std::vector<int>> monomials(Index nvars, int max_degree) {
  std::vector<std::vector<int>> out{std::vector<int>(nvars, 0)};
  std::vector<std::vector<int>> frontier = out;
  for (int deg = 1; deg <= max_degree; ++deg) {
    std::vector<std::vector<int>> next;
    for (const auto& e : frontier) {
      // extend only at or after the last non-zero variable, so each monomial appears once
      Index last = 0;
      for (Index v = 0; v < nvars; ++v)
        if (e[v] > 0) last = v;
      for (Index v = last; v < nvars; ++v) {
        auto f = e;
        ++f[v];
        next.push_back(std::move(f));
      }
    }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

inline double monomial_value(const std::vector<int>& e, const double* v) {
  double r = 1.0;
  for (std::size_t k = 0; k < e.size(); ++k)
    for (int j = 0; j < e[k]; ++j) r *= v[k];
  return r;
}

}  // namespace detail

inline Index control_variate_count(Index d_x, Index d_y, int order, int shift,
                                   const ControlVariateOptions& cv = {}) {
  const Index nc = (shift != 0 ? d_x : 0) + (cv.causal_outputs && shift <= 0 ? d_y : 0);
  return static_cast<Index>(detail::monomials(d_x, order - 1).size() *
                            detail::monomials(nc, cv.context_degree).size());
}

// Copies of the sequences whose outputs are replaced by regression residuals
// over the positions the engine uses for `req`.
inline std::vector<SequenceData> stein_residuals(const std::vector<const SequenceData*>& seqs,
                                                 const MarkovChainSpec& spec,
                                                 const MomentRequest& req,
                                                 const MomentOptions& opt = {},
                                                 const ControlVariateOptions& cv = {}) {
  const auto ts = req.resolve();
  require(ts.size() == 1, "moments", "control variates need a single score target",
          ErrorKind::config);
  require(!seqs.empty(), "moments", "no sequences given", ErrorKind::config);
  const int s = ts[0].shift;
  const int m = ts[0].order;
  const Index d = spec.d_x();
  const Index d_y = seqs[0]->y.rows();
  const auto tmono = detail::monomials(d, m - 1);
  const bool use_y = cv.causal_outputs && s <= 0;
  const Index nc = (s != 0 ? d : 0) + (use_y ? d_y : 0);
  const auto cmono = detail::monomials(nc, cv.context_degree);
  const Index nf = static_cast<Index>(tmono.size() * cmono.size());
  require(nf <= cv.max_features, "moments", "too many control-variate features",
          ErrorKind::config);

  auto range = [&](const SequenceData& sq) {
    const long n = static_cast<long>(sq.n());
    const long lo = std::max<long>(static_cast<long>(opt.burn_in), 1L - s);
    const long hi = std::min<long>(n - 1, n - 2 - s);
    return std::pair<long, long>(lo, hi);
  };
  auto features = [&](const SequenceData& sq, long t, double* f) {
    std::vector<double> tv(d), cvv(nc);
    for (Index i = 0; i < d; ++i) tv[i] = sq.x(i, t + s);
    Index k = 0;
    if (s != 0)
      for (Index i = 0; i < d; ++i) cvv[k++] = sq.x(i, t);
    if (use_y)
      for (Index i = 0; i < d_y; ++i) cvv[k++] = sq.y(i, t + s - 1);
    Index j = 0;
    for (const auto& a : tmono) {
      const double va = detail::monomial_value(a, tv.data());
      for (const auto& c : cmono) f[j++] = va * detail::monomial_value(c, cvv.data());
    }
  };

  struct Normal {
    Matrix ftf, fty;
  };
  Normal ne{Matrix::Zero(nf, nf), Matrix::Zero(nf, d_y)};
  for (const SequenceData* sq : seqs) {
    const auto [lo, hi] = range(*sq);
    if (hi < lo) continue;
    auto part = chunked_reduce<Normal>(
        static_cast<Index>(hi - lo + 1), opt.chunk, opt.workers,
        [&](Index b, Index e) {
          Matrix F(nf, e - b), Y(d_y, e - b);
          for (Index r = b; r < e; ++r) {
            features(*sq, lo + static_cast<long>(r), F.col(r - b).data());
            Y.col(r - b) = sq->y.col(lo + static_cast<long>(r));
          }
          return Normal{F * F.transpose(), F * Y.transpose()};
        },
        [](Normal a, const Normal& b) {
          a.ftf += b.ftf;
          a.fty += b.fty;
          return a;
        });
    ne.ftf += part.ftf;
    ne.fty += part.fty;
  }
  // Column scaling keeps the solve well conditioned across feature magnitudes.
  Vector sc = ne.ftf.diagonal().cwiseSqrt();
  for (Index i = 0; i < nf; ++i)
    if (!(sc(i) > 0.0)) sc(i) = 1.0;
  const Matrix G = sc.cwiseInverse().asDiagonal() * ne.ftf * sc.cwiseInverse().asDiagonal();
  const Matrix beta = sc.cwiseInverse().asDiagonal() *
                      G.completeOrthogonalDecomposition().solve(sc.cwiseInverse().asDiagonal() * ne.fty);

  std::vector<SequenceData> out;
  for (const SequenceData* sq : seqs) {
    SequenceData r = *sq;
    const auto [lo, hi] = range(*sq);
    std::vector<double> f(nf);
    for (long t = lo; t <= hi; ++t) {
      features(*sq, t, f.data());
      r.y.col(t) -= beta.transpose() * Eigen::Map<const Vector>(f.data(), nf);
    }
    out.push_back(std::move(r));
  }
  return out;
}

// cross_moment on the control-variate residuals; same expectation, lower variance.
inline MomentTensor cross_moment_cv(const SequenceData& data, const MarkovChainSpec& spec,
                                    const MomentRequest& req, const MomentOptions& opt = {},
                                    const ControlVariateOptions& cv = {}) {
  spec.validate();
  auto res = stein_residuals({&data}, spec, req, opt, cv);
  return cross_moment(res[0], spec, req, opt);
}

// ---------------------------------------------------------------------------
// Population oracle.

// An IO-RNN, or a BRNN when `backward` is set; y = A2f^T h (+ A2b^T z).
struct OracleModel {
  RnnParams forward;
  std::optional<RnnParams> backward;

  static OracleModel from(const RnnParams& p) { return {p, std::nullopt}; }
  static OracleModel from(const BrnnParams& p) { return {p.forward_half(), p.backward_half()}; }
};

struct OracleOptions {
  Index mc_draws = 2000;
  std::uint64_t seed = 1;
  int workers = 1;
  Index burn_in = 50;
};

inline MomentTensor population_moment_oracle(const OracleModel& model, const MarkovChainSpec& spec,
                                             const MomentRequest& req,
                                             const OracleOptions& opt = {}) {
  spec.validate();
  const RnnParams& F = model.forward;
  F.validate_shapes();
  require(F.l() <= 3 && (!model.backward || model.backward->l() <= 3), "moments",
          "unsupported activation order for the oracle (l ≤ 3)", ErrorKind::config);
  require(opt.mc_draws >= 1, "moments", "need at least one Monte Carlo draw", ErrorKind::config);
  const Index d = spec.d_x();
  require(F.d_x() == d, "moments", "input dimension does not match the chain", ErrorKind::config);
  if (model.backward) {
    model.backward->validate_shapes();
    require(model.backward->d_x() == d && model.backward->d_y() == F.d_y(), "moments",
            "backward half does not match the forward half", ErrorKind::config);
  }
  const auto ts = req.resolve();
  detail::check_distinct(ts);
  const int M = detail::total_order(ts);
  int smin = ts[0].shift, smax = ts[0].shift;
  for (const auto& t : ts) {
    smin = std::min(smin, t.shift);
    smax = std::max(smax, t.shift);
  }
  // Variables: one d-block per distinct target shift, in target order.
  std::vector<int> shifts;
  for (const auto& t : ts) shifts.push_back(t.shift);
  const Index nv = shifts.size() * d;
  auto space_ptr = PolySpace::get(nv, M);
  const PolySpace* sp = space_ptr.get();

  const Index d_y = F.d_y();
  const Index width = detail::ipow(d, M);
  // Output column -> (monomial index, multiplicity factor).
  std::vector<Index> mono(width);
  std::vector<double> fac(width);
  {
    std::vector<Index> modes;
    for (std::size_t k = 0; k < ts.size(); ++k)
      for (int j = 0; j < ts[k].order; ++j) modes.push_back(k * d);
    std::vector<Index> idx(M, 0);
    for (Index c = 0; c < width; ++c) {
      std::vector<int> e(nv, 0);
      for (int k = 0; k < M; ++k) e[modes[k] + idx[k]]++;
      mono[c] = sp->index_of(e);
      double f = 1.0;
      for (int v : e)
        for (int j = 2; j <= v; ++j) f *= j;
      fac[c] = f;
      for (int k = M; k-- > 0;) {
        if (++idx[k] < d) break;
        idx[k] = 0;
      }
    }
  }

  const Index margin = static_cast<Index>(std::max(0, -smin) + std::max(0, smax)) + 2;
  const Index n = opt.burn_in + opt.mc_draws + 2 * margin;
  const Matrix x = sample_markov_chain(spec, n, opt.seed);
  const Matrix H = rnn_forward(F, x).h;
  Matrix Z;
  if (model.backward) {
    Z = detail::run_chain(model.backward->A1, model.backward->U, model.backward->act, x,
                          Vector::Zero(model.backward->d_h()), true, false);
  }

  auto target_of = [&](long p, long t) -> int {
    for (std::size_t k = 0; k < shifts.size(); ++k)
      if (p == t + shifts[k]) return static_cast<int>(k);
    return -1;
  };
  auto input_polys = [&](long p, long t) {
    std::vector<Poly> X;
    const int k = target_of(p, t);
    for (Index i = 0; i < d; ++i) {
      Poly q(sp, x(i, p));
      if (k >= 0) q += Poly::variable(sp, k * d + i);
      X.push_back(std::move(q));
    }
    return X;
  };
  auto step = [&](const RnnParams& P, const std::vector<Poly>& X, const std::vector<Poly>& prev) {
    std::vector<Poly> out;
    for (Index i = 0; i < P.d_h(); ++i) {
      Poly pre(sp);
      for (Index j = 0; j < d; ++j)
        if (P.A1(i, j) != 0.0) pre += P.A1(i, j) * X[j];
      for (Index k = 0; k < P.d_h(); ++k)
        if (P.U(i, k) != 0.0) pre += P.U(i, k) * prev[k];
      out.push_back(apply_activation(pre, P.act.l, P.act.coeffs));
    }
    return out;
  };
  auto constants = [&](const Matrix& S, long col, Index dh) {
    std::vector<Poly> v;
    for (Index i = 0; i < dh; ++i) v.emplace_back(sp, col >= 0 && col < static_cast<long>(S.cols()) ? S(i, col) : 0.0);
    return v;
  };

  using Acc = Matrix;
  Matrix sum = chunked_reduce<Acc>(
      opt.mc_draws, 64, opt.workers,
      [&](Index b, Index e) {
        Matrix a = Matrix::Zero(d_y, width);
        for (Index r = b; r < e; ++r) {
          const long t = static_cast<long>(opt.burn_in + margin + r);
          // Forward half: expand from the earliest target at or before t.
          std::vector<Poly> h;
          if (smin <= 0) {
            const long p0 = t + smin;
            h = constants(H, p0 - 1, F.d_h());
            for (long p = p0; p <= t; ++p) h = step(F, input_polys(p, t), h);
          } else {
            h = constants(H, t, F.d_h());
          }
          std::vector<Poly> y;
          for (Index j = 0; j < d_y; ++j) {
            Poly q(sp);
            for (Index i = 0; i < F.d_h(); ++i)
              if (F.A2(i, j) != 0.0) q += F.A2(i, j) * h[i];
            y.push_back(std::move(q));
          }
          if (model.backward) {
            const RnnParams& B = *model.backward;
            std::vector<Poly> z;
            if (smax >= 0) {
              const long p1 = t + smax;
              z = constants(Z, p1 + 1, B.d_h());
              for (long p = p1; p >= t; --p) z = step(B, input_polys(p, t), z);
            } else {
              z = constants(Z, t, B.d_h());
            }
            for (Index j = 0; j < d_y; ++j)
              for (Index i = 0; i < B.d_h(); ++i)
                if (B.A2(i, j) != 0.0) y[j] += B.A2(i, j) * z[i];
          }
          for (Index j = 0; j < d_y; ++j)
            for (Index c = 0; c < width; ++c) a(j, c) += fac[c] * y[j].coeff(mono[c]);
        }
        return a;
      },
      [](Matrix a, const Matrix& b) {
        a += b;
        return a;
      });

  std::vector<Index> dims{d_y};
  for (int k = 0; k < M; ++k) dims.push_back(d);
  DenseTensor raw(dims);
  const double inv = 1.0 / static_cast<double>(opt.mc_draws);
  for (Index i = 0; i < d_y; ++i)
    for (Index c = 0; c < width; ++c) raw.data[i * width + c] = sum(i, c) * inv;
  MomentTensor mt;
  mt.value = detail::shape_for(req, std::move(raw), d_y, d);
  mt.kind = req.kind;
  mt.n_used = opt.mc_draws;
  mt.shift = ts.size() == 1 ? ts[0].shift : smin;
  return mt;
}

inline MomentTensor population_moment_oracle(const RnnParams& p, const MarkovChainSpec& spec,
                                             const MomentRequest& req,
                                             const OracleOptions& opt = {}) {
  return population_moment_oracle(OracleModel::from(p), spec, req, opt);
}

inline MomentTensor population_moment_oracle(const BrnnParams& p, const MarkovChainSpec& spec,
                                             const MomentRequest& req,
                                             const OracleOptions& opt = {}) {
  return population_moment_oracle(OracleModel::from(p), spec, req, opt);
}

}  // namespace srnn
