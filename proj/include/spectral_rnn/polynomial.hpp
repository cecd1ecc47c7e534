#pragma once

// Truncated multivariate polynomials on a fixed monomial basis. Used by the
// population oracle: the network output is expanded around the sampled input
// so that the order-M derivative at that point is read off the degree-M
// coefficients.

#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

namespace srnn {

class PolySpace {
 public:
  PolySpace(Index nvars, int max_degree) : nv_(nvars), deg_(max_degree) {
    std::vector<int> e(nv_, 0);
    enumerate(0, max_degree, e);
    for (Index i = 0; i < exps_.size(); ++i) lookup_[exps_[i]] = i;
    const Index n = exps_.size();
    mul_.assign(n * n, -1);
    for (Index a = 0; a < n; ++a)
      for (Index b = 0; b < n; ++b) {
        if (degree_[a] + degree_[b] > deg_) continue;
        std::vector<int> s(nv_);
        for (Index v = 0; v < nv_; ++v) s[v] = exps_[a][v] + exps_[b][v];
        mul_[a * n + b] = static_cast<long>(lookup_.at(s));
      }
    for (Index v = 0; v < nv_; ++v) {
      std::vector<int> u(nv_, 0);
      u[v] = 1;
      var_.push_back(lookup_.at(u));
    }
  }

  Index size() const { return exps_.size(); }
  Index nvars() const { return nv_; }
  int max_degree() const { return deg_; }
  const std::vector<int>& exponents(Index i) const { return exps_[i]; }
  long product_index(Index a, Index b) const { return mul_[a * exps_.size() + b]; }
  Index variable_index(Index v) const { return var_[v]; }
  Index index_of(const std::vector<int>& e) const { return lookup_.at(e); }

  static std::shared_ptr<const PolySpace> get(Index nvars, int max_degree) {
    static std::mutex mu;
    static std::map<std::pair<Index, int>, std::shared_ptr<const PolySpace>> cache;
    std::lock_guard<std::mutex> lk(mu);
    auto& slot = cache[{nvars, max_degree}];
    if (!slot) slot = std::make_shared<PolySpace>(nvars, max_degree);
    return slot;
  }

 private:
  void enumerate(Index v, int remaining, std::vector<int>& e) {
    if (v == nv_) {
      int d = 0;
      for (int x : e) d += x;
      exps_.push_back(e);
      degree_.push_back(d);
      return;
    }
    for (int k = 0; k <= remaining; ++k) {
      e[v] = k;
      enumerate(v + 1, remaining - k, e);
    }
    e[v] = 0;
  }

  Index nv_;
  int deg_;
  std::vector<std::vector<int>> exps_;
  std::vector<int> degree_;
  std::map<std::vector<int>, Index> lookup_;
  std::vector<long> mul_;
  std::vector<Index> var_;
};

class Poly {
 public:
  explicit Poly(const PolySpace* sp, double c = 0.0) : sp_(sp), c_(sp->size(), 0.0) {
    c_[0] = c;  // the all-zero exponent is enumerated first
  }

  static Poly variable(const PolySpace* sp, Index v) {
    Poly p(sp);
    p.c_[sp->variable_index(v)] = 1.0;
    return p;
  }

  Poly& operator+=(const Poly& o) {
    for (Index i = 0; i < c_.size(); ++i) c_[i] += o.c_[i];
    return *this;
  }
  Poly& operator*=(double a) {
    for (double& v : c_) v *= a;
    return *this;
  }
  friend Poly operator+(Poly a, const Poly& b) { return a += b; }
  friend Poly operator*(double a, Poly p) { return p *= a; }
  friend Poly operator*(const Poly& a, const Poly& b) {
    Poly r(a.sp_);
    const Index n = a.c_.size();
    for (Index i = 0; i < n; ++i) {
      const double ai = a.c_[i];
      if (ai == 0.0) continue;
      for (Index j = 0; j < n; ++j) {
        const double bj = b.c_[j];
        if (bj == 0.0) continue;
        const long k = a.sp_->product_index(i, j);
        if (k >= 0) r.c_[k] += ai * bj;
      }
    }
    return r;
  }

  double constant() const { return c_[0]; }
  double coeff(Index i) const { return c_[i]; }
  const PolySpace* space() const { return sp_; }

  // d^m / dv_{i1} ... dv_{im} at the origin, for m = the multi-index length.
  double derivative_at_origin(const std::vector<Index>& vars) const {
    std::vector<int> e(sp_->nvars(), 0);
    for (Index v : vars) e[v]++;
    double f = 1.0;
    for (int k : e)
      for (int j = 2; j <= k; ++j) f *= j;
    return f * c_[sp_->index_of(e)];
  }

 private:
  const PolySpace* sp_;
  std::vector<double> c_;
};

// p(q) for a polynomial activation given by its coefficients (empty: q^l).
inline Poly apply_activation(const Poly& q, int l, const std::vector<double>& coeffs) {
  if (coeffs.empty()) {
    Poly r(q.space(), 1.0);
    for (int i = 0; i < l; ++i) r = r * q;
    return r;
  }
  Poly r(q.space(), coeffs.back());
  for (std::size_t i = coeffs.size() - 1; i-- > 0;) r = r * q + Poly(q.space(), coeffs[i]);
  return r;
}

}  // namespace srnn
