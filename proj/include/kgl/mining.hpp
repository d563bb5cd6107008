#pragma once

// Hard negative sample mining for the metric branch: descriptor distance
// matrix, hardest off-diagonal partner per column, and the shuffled
// positive + negative feature batch.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "kgl/network.hpp"

namespace kgl {

/// M[i][j] = |rows_i - cols_j|. Rows come from the spectrum-B descriptors,
/// columns from spectrum A.
template <typename T>
struct DistanceMatrix {
  Tensor<T> values;  // [N, N]
  std::size_t size() const { return values.dim(0); }
  T operator()(std::size_t i, std::size_t j) const { return values.at(i, j); }
};

/// Vectorized |a|^2 + |b|^2 - 2 a.b, clamped at zero before the root.
template <typename T>
DistanceMatrix<T> distance_matrix(const Tensor<T>& rows, const Tensor<T>& cols) {
  require_rank(rows.shape(), 2, "distance_matrix rows");
  require_rank(cols.shape(), 2, "distance_matrix cols");
  if (rows.dim(1) != cols.dim(1) || rows.dim(0) != cols.dim(0))
    throw ShapeError("distance_matrix: mismatched batches " + shape_str(rows.shape()) + " vs " +
                     shape_str(cols.shape()));
  using kernels::CMapMat;
  using kernels::MapMat;
  const std::size_t n = rows.dim(0), d = rows.dim(1);
  CMapMat<T> r(rows.data(), n, d), c(cols.data(), n, d);
  Tensor<T> m({n, n});
  MapMat<T> mm(m.data(), n, n);
  mm.noalias() = T{-2} * r * c.transpose();
  const auto rn = r.rowwise().squaredNorm().eval();
  const auto cn = c.rowwise().squaredNorm().eval();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) mm(i, j) = std::sqrt(std::max(mm(i, j) + rn(i) + cn(j), T{0}));
  return {std::move(m)};
}

/// For each column j, the row i != j with the smallest distance; ties go to
/// the lowest row index.
template <typename T>
std::vector<std::size_t> hard_negative_indices(const DistanceMatrix<T>& m) {
  const std::size_t n = m.values.rank() == 2 ? m.values.dim(0) : 0;
  if (n < 2) throw ShapeError("hard negative mining needs a batch of at least 2 pairs");
  std::vector<std::size_t> idx(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t best = j == 0 ? 1 : 0;
    for (std::size_t i = best + 1; i < n; ++i)
      if (i != j && m(i, j) < m(best, j)) best = i;
    idx[j] = best;
  }
  return idx;
}

/// Row-wise counterpart: for each row i, the column j != i closest to it.
template <typename T>
std::vector<std::size_t> hard_negative_indices_by_row(const DistanceMatrix<T>& m) {
  const std::size_t n = m.values.rank() == 2 ? m.values.dim(0) : 0;
  if (n < 2) throw ShapeError("hard negative mining needs a batch of at least 2 pairs");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = i == 0 ? 1 : 0;
    for (std::size_t j = best + 1; j < n; ++j)
      if (j != i && m(i, j) < m(i, best)) best = j;
    idx[i] = best;
  }
  return idx;
}

/// Uniformly random partner i != j for each j (the non-mined baseline).
inline std::vector<std::size_t> random_negative_indices(std::size_t n, std::mt19937_64& rng) {
  if (n < 2) throw ShapeError("negative sampling needs a batch of at least 2 pairs");
  std::uniform_int_distribution<std::size_t> dist(0, n - 2);
  std::vector<std::size_t> idx(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t r = dist(rng);
    idx[j] = r >= j ? r + 1 : r;
  }
  return idx;
}

/// One negative per positive. `b_index[j]` pairs A-row `a_index[j]` with
/// B-row `b_index[j]`.
struct NegativePairs {
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

/// Column-direction mining: (A_j, B_idx[j]).
inline NegativePairs negatives_from_columns(const std::vector<std::size_t>& idx) {
  NegativePairs p;
  p.a_index.resize(idx.size());
  std::iota(p.a_index.begin(), p.a_index.end(), std::size_t{0});
  p.b_index = idx;
  return p;
}

/// Both directions; for each positive j keep the closer of (A_j, B_col[j])
/// and (A_row[j], B_j).
template <typename T>
NegativePairs negatives_bidirectional(const DistanceMatrix<T>& m) {
  const auto col = hard_negative_indices(m);
  const auto row = hard_negative_indices_by_row(m);
  NegativePairs p;
  for (std::size_t j = 0; j < col.size(); ++j) {
    const T d_col = m(col[j], j);  // B_col[j] vs A_j
    const T d_row = m(j, row[j]);  // B_j vs A_row[j]
    if (d_row < d_col) {
      p.a_index.push_back(row[j]);
      p.b_index.push_back(j);
    } else {
      p.a_index.push_back(j);
      p.b_index.push_back(col[j]);
    }
  }
  return p;
}

template <typename T>
struct MetricBatch {
  Var<T> feat_a;                       // [2N, C, H, W]
  Var<T> feat_b;                       // [2N, C, H, W]
  std::vector<int> labels;             // 1 positive, 0 negative
  std::vector<std::size_t> permutation;  // entry k is source entry permutation[k]
  std::vector<std::size_t> a_index;    // source A row of each entry
  std::vector<std::size_t> b_index;    // source B row of each entry
};

/// Positives (A_j, B_j, 1) followed by negatives, shuffled with `seed`. Rows
/// are gathered through the graph so the extractors receive gradients.
template <typename T>
MetricBatch<T> assemble_metric_batch(const Var<T>& feat_a, const Var<T>& feat_b, const NegativePairs& neg,
                                     std::uint64_t seed) {
  require_shape(feat_b->value.shape(), feat_a->value.shape(), "metric batch features");
  const std::size_t n = feat_a->value.dim(0);
  if (neg.a_index.size() != n || neg.b_index.size() != n)
    throw ShapeError("assemble_metric_batch: need one negative per positive");
  for (std::size_t j = 0; j < n; ++j)
    if (neg.a_index[j] >= n || neg.b_index[j] >= n) throw ShapeError("assemble_metric_batch: index out of range");

  MetricBatch<T> mb;
  mb.permutation.resize(2 * n);
  std::iota(mb.permutation.begin(), mb.permutation.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(mb.permutation.begin(), mb.permutation.end(), rng);
  for (std::size_t src : mb.permutation) {
    const bool pos = src < n;
    mb.labels.push_back(pos ? 1 : 0);
    mb.a_index.push_back(pos ? src : neg.a_index[src - n]);
    mb.b_index.push_back(pos ? src : neg.b_index[src - n]);
  }
  mb.feat_a = ops::gather_rows(feat_a, mb.a_index);
  mb.feat_b = ops::gather_rows(feat_b, mb.b_index);
  return mb;
}

template <typename T>
MetricBatch<T> assemble_metric_batch(const Var<T>& feat_a, const Var<T>& feat_b, const std::vector<std::size_t>& idx,
                                     std::uint64_t seed) {
  return assemble_metric_batch(feat_a, feat_b, negatives_from_columns(idx), seed);
}

}  // namespace kgl
