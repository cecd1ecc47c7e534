#pragma once

// Dense tensors with last-mode-fastest storage, plus the handful of
// multilinear operations the moment and decomposition code needs.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"

namespace srnn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMajorMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = std::size_t;

struct DenseTensor {
  std::vector<Index> dims;
  std::vector<double> data;

  DenseTensor() = default;
  explicit DenseTensor(std::vector<Index> d) : dims(std::move(d)) {
    require(!dims.empty(), "tensor_core", "tensor order must be positive");
    for (Index v : dims)
      require(v > 0, "tensor_core", "tensor dims must be positive");
    data.assign(count(dims), 0.0);
  }
  DenseTensor(std::vector<Index> d, std::vector<double> values)
      : DenseTensor(std::move(d)) {
    require(values.size() == data.size(), "tensor_core",
            "data length does not match product of dims");
    data = std::move(values);
  }

  static Index count(const std::vector<Index>& d) {
    return std::accumulate(d.begin(), d.end(), Index{1},
                           [](Index a, Index b) { return a * b; });
  }

  Index order() const { return dims.size(); }
  Index size() const { return data.size(); }

  // 0-based multi-index -> flat offset, last mode fastest.
  Index offset(const std::vector<Index>& idx) const {
    require(idx.size() == dims.size(), "tensor_core", "index order mismatch");
    Index off = 0;
    for (Index m = 0; m < dims.size(); ++m) {
      require(idx[m] < dims[m], "tensor_core", "index out of range");
      off = off * dims[m] + idx[m];
    }
    return off;
  }
  double& at(const std::vector<Index>& idx) { return data[offset(idx)]; }
  double at(const std::vector<Index>& idx) const { return data[offset(idx)]; }

  double operator()(Index i, Index j, Index k) const {
    return data[(i * dims[1] + j) * dims[2] + k];
  }
  double& operator()(Index i, Index j, Index k) {
    return data[(i * dims[1] + j) * dims[2] + k];
  }

  double norm() const {
    double s = 0.0;
    for (double v : data) s += v * v;
    return std::sqrt(s);
  }

  DenseTensor& operator+=(const DenseTensor& o) {
    require(dims == o.dims, "tensor_core", "dimension mismatch in tensor sum");
    for (Index i = 0; i < data.size(); ++i) data[i] += o.data[i];
    return *this;
  }
  DenseTensor& operator-=(const DenseTensor& o) {
    require(dims == o.dims, "tensor_core",
            "dimension mismatch in tensor difference");
    for (Index i = 0; i < data.size(); ++i) data[i] -= o.data[i];
    return *this;
  }
  DenseTensor& operator*=(double a) {
    for (double& v : data) v *= a;
    return *this;
  }
  friend DenseTensor operator+(DenseTensor a, const DenseTensor& b) { return a += b; }
  friend DenseTensor operator-(DenseTensor a, const DenseTensor& b) { return a -= b; }
  friend DenseTensor operator*(double s, DenseTensor a) { return a *= s; }
};

// Converts between 0-based flat offsets and multi-indices.
inline std::vector<Index> unravel(Index off, const std::vector<Index>& dims) {
  std::vector<Index> idx(dims.size());
  for (Index m = dims.size(); m-- > 0;) {
    idx[m] = off % dims[m];
    off /= dims[m];
  }
  return idx;
}

inline DenseTensor from_matrix(const Matrix& M) {
  DenseTensor T({static_cast<Index>(M.rows()), static_cast<Index>(M.cols())});
  for (Eigen::Index i = 0; i < M.rows(); ++i)
    for (Eigen::Index j = 0; j < M.cols(); ++j)
      T.data[i * M.cols() + j] = M(i, j);
  return T;
}

inline DenseTensor from_vector(const Vector& v) {
  return DenseTensor({static_cast<Index>(v.size())},
                     std::vector<double>(v.data(), v.data() + v.size()));
}

inline Matrix to_matrix(const DenseTensor& T) {
  require(T.order() == 2, "tensor_core", "expected an order-2 tensor");
  Matrix M(T.dims[0], T.dims[1]);
  for (Index i = 0; i < T.dims[0]; ++i)
    for (Index j = 0; j < T.dims[1]; ++j) M(i, j) = T.data[i * T.dims[1] + j];
  return M;
}

inline DenseTensor outer(const std::vector<Vector>& vs) {
  require(!vs.empty(), "tensor_core", "empty outer product");
  std::vector<Index> dims;
  for (const auto& v : vs) {
    require(v.size() > 0, "tensor_core", "outer product of an empty vector");
    require(v.allFinite(), "tensor_core", "non-finite outer product factor");
    dims.push_back(static_cast<Index>(v.size()));
  }
  DenseTensor T(dims);
  std::vector<double> cur{1.0};
  for (const auto& v : vs) {
    std::vector<double> next(cur.size() * v.size());
    for (Index a = 0; a < cur.size(); ++a)
      for (Eigen::Index b = 0; b < v.size(); ++b)
        next[a * v.size() + b] = cur[a] * v(b);
    cur.swap(next);
  }
  T.data = std::move(cur);
  return T;
}

// New mode m is old mode perm[m].
inline DenseTensor permute(const DenseTensor& T, const std::vector<Index>& perm) {
  const Index m = T.order();
  require(perm.size() == m, "tensor_core", "permutation has wrong length");
  std::vector<bool> seen(m, false);
  for (Index p : perm) {
    require(p < m && !seen[p], "tensor_core", "not a permutation");
    seen[p] = true;
  }
  std::vector<Index> nd(m);
  for (Index i = 0; i < m; ++i) nd[i] = T.dims[perm[i]];
  // stride of each old mode in the old layout
  std::vector<Index> ostride(m, 1);
  for (Index i = m - 1; i-- > 0;) ostride[i] = ostride[i + 1] * T.dims[i + 1];
  std::vector<Index> stride(m);
  for (Index i = 0; i < m; ++i) stride[i] = ostride[perm[i]];

  DenseTensor R(nd);
  std::vector<Index> idx(m, 0);
  Index src = 0;
  for (Index off = 0; off < R.size(); ++off) {
    R.data[off] = T.data[src];
    for (Index k = m; k-- > 0;) {
      if (++idx[k] < nd[k]) {
        src += stride[k];
        break;
      }
      src -= stride[k] * (nd[k] - 1);
      idx[k] = 0;
    }
  }
  return R;
}

// Groups are lists of 1-based mode numbers. Inside a group the last listed
// mode varies fastest.
using ModeGrouping = std::vector<std::vector<Index>>;

inline std::vector<Index> grouping_order(const ModeGrouping& g, Index order) {
  std::vector<Index> flat;
  std::vector<bool> seen(order, false);
  for (const auto& grp : g) {
    require(!grp.empty(), "tensor_core", "reshape group is empty");
    for (Index mode : grp) {
      require(mode >= 1 && mode <= order, "tensor_core",
              "reshape group names a mode the tensor does not have");
      require(!seen[mode - 1], "tensor_core", "reshape groups overlap");
      seen[mode - 1] = true;
      flat.push_back(mode - 1);
    }
  }
  require(flat.size() == order, "tensor_core", "reshape groups do not cover all modes");
  return flat;
}

inline DenseTensor reshape(const DenseTensor& T, const ModeGrouping& g) {
  auto flat = grouping_order(g, T.order());
  DenseTensor P = permute(T, flat);
  std::vector<Index> nd;
  for (const auto& grp : g) {
    Index d = 1;
    for (Index mode : grp) d *= T.dims[mode - 1];
    nd.push_back(d);
  }
  P.dims = nd;
  return P;
}

// Undoes reshape(T, g) given the dims of the original tensor.
inline DenseTensor reshape_inverse(const DenseTensor& R, const ModeGrouping& g,
                                   const std::vector<Index>& original_dims) {
  auto flat = grouping_order(g, original_dims.size());
  require(DenseTensor::count(original_dims) == R.size(), "tensor_core",
          "inverse reshape size mismatch");
  DenseTensor P;
  for (Index m : flat) P.dims.push_back(original_dims[m]);
  P.data = R.data;
  std::vector<Index> inv(flat.size());
  for (Index i = 0; i < flat.size(); ++i) inv[flat[i]] = i;
  return permute(P, inv);
}

// Mode-n unfolding: rows indexed by mode n, columns by the remaining modes
// in their original order (last fastest).
inline Matrix unfold(const DenseTensor& T, Index mode) {
  require(mode < T.order(), "tensor_core", "unfold mode out of range");
  std::vector<Index> perm{mode};
  for (Index m = 0; m < T.order(); ++m)
    if (m != mode) perm.push_back(m);
  DenseTensor P = permute(T, perm);
  const Index rows = T.dims[mode];
  const Index cols = T.size() / rows;
  return Eigen::Map<const RowMajorMatrix>(P.data.data(), rows, cols);
}

// M(i, l + (j-1) d) = T(i, j, l) in 1-based indices.
inline Matrix matricize_mode1(const DenseTensor& T) {
  require(T.order() == 3, "tensor_core", "matricize_mode1 needs an order-3 tensor");
  return unfold(T, 0);
}

// Contracts mode `mode` with M: R[.., i, ..] = sum_j T[.., j, ..] M(j, i).
inline DenseTensor mode_product(const DenseTensor& T, Index mode, const Matrix& M) {
  require(mode < T.order(), "tensor_core", "mode out of range");
  require(static_cast<Index>(M.rows()) == T.dims[mode], "tensor_core",
          "dimension mismatch in multilinear contraction");
  Index outer_n = 1, inner_n = 1;
  for (Index m = 0; m < mode; ++m) outer_n *= T.dims[m];
  for (Index m = mode + 1; m < T.order(); ++m) inner_n *= T.dims[m];
  const Index d = T.dims[mode];
  const Index c = M.cols();
  auto nd = T.dims;
  nd[mode] = c;
  DenseTensor R(nd);
  const Matrix Mt = M.transpose();
  for (Index o = 0; o < outer_n; ++o) {
    Eigen::Map<const RowMajorMatrix> src(T.data.data() + o * d * inner_n, d, inner_n);
    Eigen::Map<RowMajorMatrix> dst(R.data.data() + o * c * inner_n, c, inner_n);
    dst.noalias() = Mt * src;
  }
  return R;
}

// T(M1, M2, M3); nullopt stands for the identity.
inline DenseTensor multilinear(const DenseTensor& T, const std::optional<Matrix>& M1,
                               const std::optional<Matrix>& M2,
                               const std::optional<Matrix>& M3) {
  require(T.order() == 3, "tensor_core", "multilinear needs an order-3 tensor");
  DenseTensor R = T;
  if (M1) R = mode_product(R, 0, *M1);
  if (M2) R = mode_product(R, 1, *M2);
  if (M3) R = mode_product(R, 2, *M3);
  return R;
}

inline Vector contract_vec(const DenseTensor& T, const Vector& u, const Vector& v,
                           Index free_mode) {
  require(T.order() == 3, "tensor_core", "contract_vec needs an order-3 tensor");
  Matrix U = u, V = v;
  DenseTensor R;
  if (free_mode == 0) R = multilinear(T, std::nullopt, U, V);
  else if (free_mode == 1) R = multilinear(T, U, std::nullopt, V);
  else R = multilinear(T, U, V, std::nullopt);
  return Eigen::Map<const Vector>(R.data.data(), R.size());
}

inline Matrix rowwise_kron(const Matrix& A, const Matrix& B) {
  require(A.rows() == B.rows(), "tensor_core",
          "row-wise Kronecker product needs equal row counts");
  Matrix R(A.rows(), A.cols() * B.cols());
  for (Eigen::Index r = 0; r < A.rows(); ++r)
    for (Eigen::Index i = 0; i < A.cols(); ++i)
      for (Eigen::Index j = 0; j < B.cols(); ++j)
        R(r, i * B.cols() + j) = A(r, i) * B(r, j);
  return R;
}

// Column-wise Khatri-Rao product; column i is a_i (x) b_i with b fastest.
inline Matrix khatri_rao(const Matrix& A, const Matrix& B) {
  return rowwise_kron(A.transpose(), B.transpose()).transpose();
}

inline Matrix pinv(const Matrix& M, double tol = 1e-10) {
  if (M.size() == 0) return Matrix(M.cols(), M.rows());
  Eigen::BDCSVD<Matrix> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  const double cut = s.size() ? tol * s(0) : 0.0;
  Vector inv = Vector::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > cut && s(i) > 0.0) inv(i) = 1.0 / s(i);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

inline double spectral_norm(const Matrix& M) {
  if (M.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(M);
  return svd.singularValues()(0);
}

inline Vector singular_values(const Matrix& M) {
  Eigen::JacobiSVD<Matrix> svd(M);
  return svd.singularValues();
}

// Average over all mode permutations of an order-3 tensor with equal dims.
inline DenseTensor symmetrize_all(const DenseTensor& T) {
  require(T.order() == 3 && T.dims[0] == T.dims[1] && T.dims[1] == T.dims[2],
          "tensor_core", "full symmetrization needs a cubical order-3 tensor");
  std::vector<Index> p{0, 1, 2};
  DenseTensor S(T.dims);
  do {
    S += permute(T, p);
  } while (std::next_permutation(p.begin(), p.end()));
  S *= 1.0 / 6.0;
  return S;
}

// max over transpositions of ||T - T^perm|| / ||T||.
inline double symmetry_residual(const DenseTensor& T) {
  const double nt = T.norm();
  if (nt == 0.0) return 0.0;
  double worst = 0.0;
  for (Index a = 0; a < T.order(); ++a)
    for (Index b = a + 1; b < T.order(); ++b) {
      if (T.dims[a] != T.dims[b]) return INFINITY;
      std::vector<Index> p(T.order());
      std::iota(p.begin(), p.end(), Index{0});
      std::swap(p[a], p[b]);
      worst = std::max(worst, (T - permute(T, p)).norm() / nt);
    }
  return worst;
}

}  // namespace srnn
