#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "hdwsr/flops.hpp"
#include "hdwsr/tensor.hpp"

namespace hdwsr {

inline constexpr int kDtbBins = 512;

// Running attention map and its support, carried across DFA layers.
template <class S>
struct AttentionState {
  MatX<S> A;   // row-stochastic over its support
  BinMat I;    // I = Sign(A)
  int layer = 0;
};

// Layer-0 state: every position allowed, uniform weights.
template <class S>
AttentionState<S> initial_attention_state(Index n, Index m) {
  AttentionState<S> s;
  s.A = MatX<S>::Constant(n, m, S(1) / S(m));
  s.I = BinMat::Constant(n, m, 1);
  s.layer = 0;
  return s;
}

// Otsu-style split of the attention value distribution.
template <class S>
struct ThresholdResult {
  Eigen::Array<std::int64_t, kDtbBins, 1> histogram;
  Eigen::Array<S, kDtbBins, 1> sigma_b;
  int k_index = 0;      // winning bin
  S k_star = S(0);      // threshold value (k_index + 1) / 512; mask keeps A_oam > k_star
  bool degenerate = false;
};

namespace detail {

inline int dtb_bin(double v) {
  const int b = static_cast<int>(v * kDtbBins);
  return b >= kDtbBins ? kDtbBins - 1 : b;
}

inline std::int64_t count_ones(const BinMat& m) {
  std::int64_t n = 0;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) n += m(i, j);
  return n;
}

}  // namespace detail

// Row softmax of scale*Q*K^T evaluated only where I_prev = 1; excluded
// positions are exact zeros. Uses a dense product when the support is dense
// enough to favor a single matrix multiply, otherwise gathers per row; both
// paths produce the same values and the same recorded count of 2*d multiplies
// per allowed position.
template <class S>
MatX<S> smm_softmax(const MatX<S>& Q, const MatX<S>& K, const BinMat& I_prev, S scale,
                    FlopLedger* ledger = nullptr, const std::string& label = "smm") {
  const Index n = Q.rows(), m = K.rows(), d = Q.cols();
  if (K.cols() != d)
    throw DimensionError("smm_softmax: Q has d=" + std::to_string(d) + ", K has d=" +
                         std::to_string(K.cols()));
  if (I_prev.rows() != n || I_prev.cols() != m)
    throw DimensionError("smm_softmax: I_prev is " + std::to_string(I_prev.rows()) + "x" +
                         std::to_string(I_prev.cols()) + ", expected " + std::to_string(n) +
                         "x" + std::to_string(m));
  const std::int64_t nnz = detail::count_ones(I_prev);
  for (Index i = 0; i < n; ++i)
    if (I_prev.row(i).template cast<int>().sum() == 0)
      throw ContractError("smm_softmax: row " + std::to_string(i) + " of I_prev is all zero");

  MatX<S> out = MatX<S>::Zero(n, m);
  const bool dense = nnz > (n * m) / 4;
  if (dense) {
    MatX<S> scores = (Q * K.transpose()) * scale;
    for (Index i = 0; i < n; ++i) {
      S mx = -std::numeric_limits<S>::infinity();
      for (Index j = 0; j < m; ++j)
        if (I_prev(i, j)) mx = std::max(mx, scores(i, j));
      S denom = S(0);
      for (Index j = 0; j < m; ++j)
        if (I_prev(i, j)) {
          const S e = std::exp(scores(i, j) - mx);
          out(i, j) = e;
          denom += e;
        }
      out.row(i) /= denom;
    }
  } else {
    std::vector<Index> idx;
    std::vector<S> sc;
    for (Index i = 0; i < n; ++i) {
      idx.clear();
      sc.clear();
      for (Index j = 0; j < m; ++j)
        if (I_prev(i, j)) idx.push_back(j);
      S mx = -std::numeric_limits<S>::infinity();
      for (Index j : idx) {
        const S s = Q.row(i).dot(K.row(j)) * scale;
        sc.push_back(s);
        mx = std::max(mx, s);
      }
      S denom = S(0);
      for (std::size_t p = 0; p < idx.size(); ++p) {
        const S e = std::exp(sc[p] - mx);
        out(i, idx[p]) = e;
        denom += e;
      }
      for (Index j : idx) out(i, j) /= denom;
    }
  }
  if (ledger) ledger->add(label, static_cast<std::uint64_t>(2 * d) * nnz);
  return out;
}

namespace detail {

// Inter-class variance for the split (bins 0..k | bins k+1..), derived from
// integer class sums so identical histograms always produce identical bin
// choices. With W1/W2 the class counts and S1/S2 the sums of h_i*(2i+1)
// (twice the bin-center numerators), sigma_b^2(k) in value units equals
// (S1 W2 - S2 W1)^2 / (W1 W2 n^2 (2B)^2). The comparison statistic drops the
// constant factor; the reported curve includes it.
inline double dtb_split_stat(std::int64_t w1, std::int64_t w2, std::int64_t s1,
                             std::int64_t s2) {
  if (w1 <= 0 || w2 <= 0) return 0.0;
  const double d = static_cast<double>(s1) * static_cast<double>(w2) -
                   static_cast<double>(s2) * static_cast<double>(w1);
  return d * d / (static_cast<double>(w1) * static_cast<double>(w2));
}

}  // namespace detail

// Histogram the active attention values into 512 bins over [0,1] and pick the
// split maximizing inter-class variance sigma_b^2(k) = w1*w2*(mu1-mu2)^2,
// where class 1 is bins 0..k. Class means use bin centers. First maximum wins
// (smaller threshold on ties). degenerate means no split separates anything
// (all active values in one bin); callers then keep every position.
template <class S>
ThresholdResult<S> dtb_threshold(const MatX<S>& A_oam, const BinMat& active) {
  if (A_oam.rows() != active.rows() || A_oam.cols() != active.cols())
    throw DimensionError("dtb_threshold: shape mismatch between A_oam and active");
  ThresholdResult<S> r;
  r.histogram.setZero();
  r.sigma_b.setZero();
  for (Index i = 0; i < A_oam.rows(); ++i)
    for (Index j = 0; j < A_oam.cols(); ++j)
      if (active(i, j)) {
        const double v = static_cast<double>(A_oam(i, j));
        if (!(v >= 0.0 && v <= 1.0))
          throw ContractError("dtb_threshold: active value " + std::to_string(v) +
                              " outside [0,1]");
        r.histogram[detail::dtb_bin(v)] += 1;
      }
  const std::int64_t n = r.histogram.sum();
  if (n == 0) {
    r.degenerate = true;
    r.k_index = 0;
    r.k_star = S(1) / S(kDtbBins);
    return r;
  }
  std::int64_t s_tot = 0;
  for (int b = 0; b < kDtbBins; ++b) s_tot += r.histogram[b] * (2 * b + 1);

  const double unit = 1.0 / (4.0 * kDtbBins * kDtbBins * static_cast<double>(n) *
                             static_cast<double>(n));
  std::int64_t w1 = 0, s1 = 0;
  double best = 0.0;
  int best_k = 0;
  for (int k = 0; k < kDtbBins; ++k) {
    w1 += r.histogram[k];
    s1 += r.histogram[k] * (2 * k + 1);
    const double stat = detail::dtb_split_stat(w1, n - w1, s1, s_tot - s1);
    r.sigma_b[k] = static_cast<S>(stat * unit);
    if (stat > best) {
      best = stat;
      best_k = k;
    }
  }
  r.degenerate = (best == 0.0);
  r.k_index = best_k;
  r.k_star = static_cast<S>(best_k + 1) / S(kDtbBins);
  return r;
}

// Per-row top-K support, ties toward the smaller column index. Ablation
// baseline for the thresholding block.
template <class S>
BinMat topk_mask(const MatX<S>& A_oam, Index k) {
  const Index n = A_oam.rows(), m = A_oam.cols();
  if (k < 1 || k > m)
    throw ConfigError("topk_mask: K=" + std::to_string(k) + " outside 1.." + std::to_string(m));
  BinMat mask = BinMat::Zero(n, m);
  std::vector<Index> cols(static_cast<std::size_t>(m));
  for (Index i = 0; i < n; ++i) {
    std::iota(cols.begin(), cols.end(), Index(0));
    std::partial_sort(cols.begin(), cols.begin() + k, cols.end(), [&](Index a, Index b) {
      if (A_oam(i, a) != A_oam(i, b)) return A_oam(i, a) > A_oam(i, b);
      return a < b;
    });
    for (Index p = 0; p < k; ++p) mask(i, cols[static_cast<std::size_t>(p)]) = 1;
  }
  return mask;
}

template <class S>
struct PropagateResult {
  MatX<S> A;
  BinMat I;
};

// Combine the fresh attention map with the running one under an explicit
// keep mask: A = row-normalize(A_prev o A_oam o keep), I = Sign(A). A row
// whose masked product vanishes retains its single largest A_oam entry so no
// query ever loses all keys.
template <class S>
PropagateResult<S> mask_and_propagate(const MatX<S>& A_oam, const MatX<S>& A_prev,
                                      const BinMat& keep) {
  const Index n = A_oam.rows(), m = A_oam.cols();
  if (A_prev.rows() != n || A_prev.cols() != m || keep.rows() != n || keep.cols() != m)
    throw DimensionError("mask_and_propagate: shape mismatch");
  PropagateResult<S> r;
  r.A = MatX<S>::Zero(n, m);
  r.I = BinMat::Zero(n, m);
  for (Index i = 0; i < n; ++i) {
    S row_sum = S(0);
    for (Index j = 0; j < m; ++j)
      if (keep(i, j)) {
        const S p = A_prev(i, j) * A_oam(i, j);
        r.A(i, j) = p;
        row_sum += p;
      }
    if (row_sum == S(0)) {
      // Guaranteed survivor: the row argmax of A_oam (smaller column on ties).
      Index arg = 0;
      S best = A_oam(i, 0);
      for (Index j = 1; j < m; ++j)
        if (A_oam(i, j) > best) {
          best = A_oam(i, j);
          arg = j;
        }
      r.A.row(i).setZero();
      const S p = A_prev(i, arg) * A_oam(i, arg);
      if (p <= S(0))
        throw ContractError("mask_and_propagate: row " + std::to_string(i) +
                            " has no positive entry to retain");
      r.A(i, arg) = p;
      row_sum = p;
    }
    r.A.row(i) /= row_sum;
    for (Index j = 0; j < m; ++j) r.I(i, j) = r.A(i, j) != S(0) ? 1 : 0;
  }
  return r;
}

// Threshold-driven variant: keep positions with A_oam strictly above the
// threshold value, or everything when the distribution has no split.
template <class S>
PropagateResult<S> mask_and_propagate(const MatX<S>& A_oam, const MatX<S>& A_prev,
                                      const ThresholdResult<S>& thr) {
  BinMat keep(A_oam.rows(), A_oam.cols());
  if (thr.degenerate) {
    keep.setConstant(1);
  } else {
    for (Index i = 0; i < A_oam.rows(); ++i)
      for (Index j = 0; j < A_oam.cols(); ++j)
        keep(i, j) = A_oam(i, j) > thr.k_star ? 1 : 0;
  }
  return mask_and_propagate(A_oam, A_prev, keep);
}

// O = A*V restricted to the support; 2*d multiplies per active position are
// recorded. I must equal Sign(A).
template <class S>
MatX<S> attend(const MatX<S>& A, const MatX<S>& V, const BinMat& I,
               FlopLedger* ledger = nullptr, const std::string& label = "attend") {
  const Index n = A.rows(), m = A.cols(), d = V.cols();
  if (V.rows() != m)
    throw DimensionError("attend: V has " + std::to_string(V.rows()) + " rows, expected " +
                         std::to_string(m));
  if (I.rows() != n || I.cols() != m)
    throw DimensionError("attend: I shape mismatch");
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j)
      if ((A(i, j) != S(0)) != (I(i, j) == 1))
        throw ContractError("attend: I inconsistent with the support of A at (" +
                            std::to_string(i) + "," + std::to_string(j) + ")");
  const std::int64_t nnz = detail::count_ones(I);
  MatX<S> out;
  if (nnz > (n * m) / 4) {
    out = A * V;
  } else {
    out = MatX<S>::Zero(n, d);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j)
        if (I(i, j)) out.row(i) += A(i, j) * V.row(j);
  }
  if (ledger) ledger->add(label, static_cast<std::uint64_t>(2 * d) * nnz);
  return out;
}

enum class MaskMode { Dtb, TopK, Dense };

template <class S>
struct DfaRoundResult {
  MatX<S> out;
  AttentionState<S> state;
};

// One full attention round on already-projected Q/K/V: sparse softmax against
// the inherited support, mask selection per mode, propagation, and the sparse
// product with V. Parameter-level wrapping (projections, residual, FFN) lives
// with the model; this is the stateless math shared by model and tests.
template <class S>
DfaRoundResult<S> dfa_round(const MatX<S>& Q, const MatX<S>& K, const MatX<S>& V,
                            const AttentionState<S>& prev, MaskMode mode, Index topk = 0,
                            FlopLedger* ledger = nullptr) {
  const S scale = S(1) / std::sqrt(static_cast<S>(Q.cols()));
  MatX<S> a_oam = smm_softmax(Q, K, prev.I, scale, ledger);
  PropagateResult<S> pr;
  switch (mode) {
    case MaskMode::Dtb:
      pr = mask_and_propagate(a_oam, prev.A, dtb_threshold(a_oam, prev.I));
      break;
    case MaskMode::TopK:
      pr = mask_and_propagate(a_oam, prev.A, topk_mask(a_oam, topk));
      break;
    case MaskMode::Dense:
      pr = mask_and_propagate(a_oam, prev.A, BinMat::Constant(Q.rows(), K.rows(), 1));
      break;
  }
  DfaRoundResult<S> r;
  r.out = attend(pr.A, V, pr.I, ledger);
  r.state = AttentionState<S>{std::move(pr.A), std::move(pr.I), prev.layer + 1};
  return r;
}

}  // namespace hdwsr
