#pragma once

// Score functions of the linear-Gaussian Markov input. Conditioned on its
// neighbours, x_t is Gaussian with precision Lambda and mean mu, so every
// S_m is a multivariate Hermite tensor in s = Lambda (x_t - mu).
//
// Positions are 0-based columns of the input matrix; the interior ones are
// 1 <= t <= n-2.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "error.hpp"
#include "parallel.hpp"
#include "sequence.hpp"
#include "tensor.hpp"

namespace srnn {

struct LocalGaussian {
  Matrix precision;
  Vector mean;
};

inline LocalGaussian local_gaussian(const MarkovChainSpec& spec, const Vector& x_prev,
                                    const Vector& x_next) {
  const Index d = spec.d_x();
  require(static_cast<Index>(x_prev.size()) == d && static_cast<Index>(x_next.size()) == d,
          "score", "neighbour dimension does not match the chain");
  const double s2 = spec.sigma * spec.sigma;
  const Vector b = spec.drift_or_zero();
  LocalGaussian g;
  g.precision = (Matrix::Identity(d, d) + spec.W.transpose() * spec.W) / s2;
  Vector rhs = (spec.W * x_prev + b + spec.W.transpose() * (x_next - b)) / s2;
  g.mean = g.precision.llt().solve(rhs);
  return g;
}

inline void check_interior(Index n, Index t) {
  if (t < 1 || t + 2 > n) fail("score", "boundary position has a different factorization");
}

// s = -grad_{x_t} log p(x[n]) at an interior position.
inline Vector score_vector(const MarkovChainSpec& spec, const Matrix& x, Index t) {
  check_interior(x.cols(), t);
  const double s2 = spec.sigma * spec.sigma;
  const Vector b = spec.drift_or_zero();
  Vector r_here = x.col(t) - spec.W * x.col(t - 1) - b;
  Vector r_next = x.col(t + 1) - spec.W * x.col(t) - b;
  return (r_here - spec.W.transpose() * r_next) / s2;
}

inline Matrix local_precision(const MarkovChainSpec& spec) {
  const Index d = spec.d_x();
  return (Matrix::Identity(d, d) + spec.W.transpose() * spec.W) /
         (spec.sigma * spec.sigma);
}

// Joint score vector and precision of the block x_{t0}, ..., x_{t0+len-1}.
inline Vector block_score_vector(const MarkovChainSpec& spec, const Matrix& x, Index t0,
                                 Index len) {
  const Index d = spec.d_x();
  Vector s(d * len);
  for (Index k = 0; k < len; ++k) s.segment(k * d, d) = score_vector(spec, x, t0 + k);
  return s;
}

inline Matrix block_precision(const MarkovChainSpec& spec, Index len) {
  const Index d = spec.d_x();
  const double s2 = spec.sigma * spec.sigma;
  const Matrix diag = local_precision(spec);
  Matrix P = Matrix::Zero(d * len, d * len);
  for (Index k = 0; k < len; ++k) {
    P.block(k * d, k * d, d, d) = diag;
    if (k + 1 < len) {
      P.block(k * d, (k + 1) * d, d, d) = -spec.W.transpose() / s2;
      P.block((k + 1) * d, k * d, d, d) = -spec.W / s2;
    }
  }
  return P;
}

// ---------------------------------------------------------------------------
// Hermite tensors given s and Lambda.

inline DenseTensor hermite_closed(const Vector& s, const Matrix& L, int m) {
  require(m >= 1 && m <= 4, "score", "closed forms exist for orders 1 to 4 only");
  const Index d = s.size();
  std::vector<Index> dims(m, d);
  DenseTensor T(dims);
  if (m == 1) {
    for (Index i = 0; i < d; ++i) T.data[i] = s(i);
  } else if (m == 2) {
    for (Index i = 0; i < d; ++i)
      for (Index j = 0; j < d; ++j) T.data[i * d + j] = s(i) * s(j) - L(i, j);
  } else if (m == 3) {
    for (Index i = 0; i < d; ++i)
      for (Index j = 0; j < d; ++j)
        for (Index k = 0; k < d; ++k)
          T.data[(i * d + j) * d + k] = s(i) * s(j) * s(k) -
                                        (s(i) * L(j, k) + s(j) * L(i, k) + s(k) * L(i, j));
  } else {
    for (Index i = 0; i < d; ++i)
      for (Index j = 0; j < d; ++j)
        for (Index k = 0; k < d; ++k)
          for (Index l = 0; l < d; ++l) {
            const double s4 = s(i) * s(j) * s(k) * s(l);
            const double sym6 = L(i, j) * s(k) * s(l) + L(i, k) * s(j) * s(l) +
                                L(i, l) * s(j) * s(k) + L(j, k) * s(i) * s(l) +
                                L(j, l) * s(i) * s(k) + L(k, l) * s(i) * s(j);
            const double sym3 = L(i, j) * L(k, l) + L(i, k) * L(j, l) + L(i, l) * L(j, k);
            T.data[((i * d + j) * d + k) * d + l] = s4 - sym6 + sym3;
          }
  }
  return T;
}

namespace detail {

// A term of S_m: coefficient times a product over index slots, where each
// slot is either a factor s_i (partner < 0) or half of a Lambda pair.
struct HermiteTerm {
  std::vector<int> partner;
  bool operator<(const HermiteTerm& o) const { return partner < o.partner; }
};

}  // namespace detail

// S_m built symbolically from S_1 = s by S_m = -S_{m-1} (x) grad log p - grad S_{m-1},
// using only grad log p = -s and grad s = Lambda.
inline DenseTensor hermite_recursive(const Vector& s, const Matrix& L, int m) {
  require(m >= 1, "score", "score order must be at least 1");
  using detail::HermiteTerm;
  std::map<HermiteTerm, double> terms{{HermiteTerm{{-1}}, 1.0}};
  for (int k = 2; k <= m; ++k) {
    std::map<HermiteTerm, double> next;
    for (const auto& [term, c] : terms) {
      HermiteTerm ext = term;
      ext.partner.push_back(-1);
      next[ext] += c;  // -S (x) grad log p = S (x) s
      for (int slot = 0; slot < k - 1; ++slot) {
        if (term.partner[slot] >= 0) continue;
        HermiteTerm der = term;
        der.partner[slot] = k - 1;
        der.partner.push_back(slot);
        next[der] -= c;  // - grad S: one s factor becomes Lambda
      }
    }
    terms.clear();
    for (auto& [t, c] : next)
      if (c != 0.0) terms.emplace(t, c);
  }
  const Index d = s.size();
  std::vector<Index> dims(m, d);
  DenseTensor T(dims);
  std::vector<Index> idx(m, 0);
  for (Index off = 0; off < T.size(); ++off) {
    double acc = 0.0;
    for (const auto& [term, c] : terms) {
      double prod = c;
      for (int slot = 0; slot < m; ++slot) {
        const int p = term.partner[slot];
        if (p < 0) prod *= s(idx[slot]);
        else if (p > slot) prod *= L(idx[slot], idx[p]);
      }
      acc += prod;
    }
    T.data[off] = acc;
    for (Index k = m; k-- > 0;) {
      if (++idx[k] < d) break;
      idx[k] = 0;
    }
  }
  return T;
}

// Index tables for the entrywise three-term recurrence
//   S_k[i_1..i_k] = s_{i_k} S_{k-1}[i_1..i_{k-1}]
//                   - sum_{j<k} Lambda_{i_j i_k} S_{k-2}[i_1..^i_j..i_{k-1}],
// which is the recursion above written entry by entry.
class HermiteTable {
 public:
  HermiteTable(Index d, int m) : d_(d), m_(m), levels_(m + 1) {
    require(m >= 1, "score", "score order must be at least 1");
    for (int k = 1; k <= m; ++k) {
      Level& lv = levels_[k];
      Index size = 1;
      for (int i = 0; i < k; ++i) size *= d;
      lv.last.resize(size);
      lv.prefix.resize(size);
      lv.rem.resize(size * (k - 1));
      lv.lam.resize(size * (k - 1));
      std::vector<Index> idx(k, 0);
      for (Index f = 0; f < size; ++f) {
        lv.last[f] = idx[k - 1];
        lv.prefix[f] = f / d;
        for (int j = 0; j < k - 1; ++j) {
          Index r = 0;
          for (int q = 0; q < k - 1; ++q)
            if (q != j) r = r * d + idx[q];
          lv.rem[f * (k - 1) + j] = r;
          lv.lam[f * (k - 1) + j] = idx[j] * d + idx[k - 1];
        }
        for (int q = k; q-- > 0;) {
          if (++idx[q] < d) break;
          idx[q] = 0;
        }
      }
    }
  }

  Index dim() const { return d_; }
  int order() const { return m_; }

  // Fills out[k] (k = 0..m) with the flattened S_k; out[0] = {1}.
  void evaluate(const double* s, const double* lam_colmajor,
                std::vector<std::vector<double>>& out) const {
    out.resize(m_ + 1);
    out[0].assign(1, 1.0);
    for (int k = 1; k <= m_; ++k) {
      const Level& lv = levels_[k];
      auto& cur = out[k];
      cur.resize(lv.last.size());
      const auto& p1 = out[k - 1];
      const std::vector<double>* p2 = k >= 2 ? &out[k - 2] : nullptr;
      for (Index f = 0; f < cur.size(); ++f) {
        double v = s[lv.last[f]] * p1[lv.prefix[f]];
        for (int j = 0; j < k - 1; ++j) {
          const Index li = lv.lam[f * (k - 1) + j];
          // Lambda is symmetric, so row/column order is irrelevant.
          v -= lam_colmajor[li] * (*p2)[lv.rem[f * (k - 1) + j]];
        }
        cur[f] = v;
      }
    }
  }

  static std::shared_ptr<const HermiteTable> get(Index d, int m) {
    static std::mutex mu;
    static std::map<std::pair<Index, int>, std::shared_ptr<const HermiteTable>> cache;
    std::lock_guard<std::mutex> lk(mu);
    auto& slot = cache[{d, m}];
    if (!slot) slot = std::make_shared<HermiteTable>(d, m);
    return slot;
  }

 private:
  struct Level {
    std::vector<Index> last, prefix, rem, lam;
  };
  Index d_;
  int m_;
  std::vector<Level> levels_;
};

inline DenseTensor hermite_fast(const Vector& s, const Matrix& L, int m) {
  auto tab = HermiteTable::get(s.size(), m);
  std::vector<std::vector<double>> out;
  tab->evaluate(s.data(), L.data(), out);
  return DenseTensor(std::vector<Index>(m, s.size()), std::move(out[m]));
}

enum class ScoreMethod { closed, recursive, recurrence };

struct ScoreTensor {
  int order = 1;
  Index t = 0;
  DenseTensor value;
};

inline ScoreTensor score(const MarkovChainSpec& spec, const Matrix& x, Index t, int m,
                         ScoreMethod method = ScoreMethod::recurrence) {
  require(m >= 1, "score", "score order must be at least 1");
  const Vector s = score_vector(spec, x, t);
  const Matrix L = local_precision(spec);
  ScoreTensor st{m, t, {}};
  switch (method) {
    case ScoreMethod::closed: st.value = hermite_closed(s, L, m); break;
    case ScoreMethod::recursive: st.value = hermite_recursive(s, L, m); break;
    case ScoreMethod::recurrence: st.value = hermite_fast(s, L, m); break;
  }
  return st;
}

// ---------------------------------------------------------------------------
// Stein identity check: E[G (x) S_m(x[n], t)] against E[grad^m_{x_t} G].

struct TestFunction {
  Index out_dim = 1;
  // G(x[n], t), a vector of length out_dim
  std::function<Vector(const Matrix&, Index)> value;
  // grad^m_{x_t} G flattened as out_dim x d^m, row-major
  std::function<std::vector<double>(const Matrix&, Index)> derivative;
};

struct SteinResult {
  double error = 0.0;
  bool absolute = false;  // set when the derivative side is zero
  std::vector<double> lhs, rhs;
  Index n_used = 0;
};

inline SteinResult stein_check(const MarkovChainSpec& spec, const TestFunction& G, int m,
                               Index n_samples, std::uint64_t seed, int workers = 1) {
  require(n_samples >= 3, "score", "need at least three samples");
  const Matrix x = sample_markov_chain(spec, n_samples, seed);
  const Index d = spec.d_x();
  Index dm = 1;
  for (int i = 0; i < m; ++i) dm *= d;
  const Index width = G.out_dim * dm;
  auto tab = HermiteTable::get(d, m);
  const Matrix L = local_precision(spec);
  const Index n_int = n_samples - 2;

  using Acc = std::pair<std::vector<double>, std::vector<double>>;
  Acc tot = chunked_reduce<Acc>(
      n_int, 4096, workers,
      [&](Index b, Index e) {
        Acc a{std::vector<double>(width, 0.0), std::vector<double>(width, 0.0)};
        std::vector<std::vector<double>> herm;
        for (Index k = b; k < e; ++k) {
          const Index t = k + 1;
          const Vector s = score_vector(spec, x, t);
          tab->evaluate(s.data(), L.data(), herm);
          const Vector g = G.value(x, t);
          const auto dg = G.derivative(x, t);
          for (Index i = 0; i < G.out_dim; ++i)
            for (Index j = 0; j < dm; ++j) a.first[i * dm + j] += g(i) * herm[m][j];
          for (Index j = 0; j < width; ++j) a.second[j] += dg[j];
        }
        return a;
      },
      [](Acc a, const Acc& b) {
        for (Index j = 0; j < a.first.size(); ++j) {
          a.first[j] += b.first[j];
          a.second[j] += b.second[j];
        }
        return a;
      });
  SteinResult r;
  r.n_used = n_int;
  r.lhs = std::move(tot.first);
  r.rhs = std::move(tot.second);
  double num = 0.0, den = 0.0;
  for (Index j = 0; j < width; ++j) {
    r.lhs[j] /= n_int;
    r.rhs[j] /= n_int;
    num += (r.lhs[j] - r.rhs[j]) * (r.lhs[j] - r.rhs[j]);
    den += r.rhs[j] * r.rhs[j];
  }
  if (den == 0.0) {
    r.absolute = true;
    r.error = std::sqrt(num);
  } else {
    r.error = std::sqrt(num / den);
  }
  return r;
}

}  // namespace srnn
