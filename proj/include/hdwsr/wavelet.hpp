#pragma once

#include <string>
#include <vector>

#include "hdwsr/tensor.hpp"

namespace hdwsr {

// One analysis level: approximation plus the three detail bands, each of the
// same channel count as the input and half its spatial extent.
template <class S>
struct SubbandSet {
  Tensor<S> ll, lh, hl, hh;
};

namespace detail {

template <class S>
void require_even_image(const Tensor<S>& x, const char* where) {
  if (x.rank() != 3)
    throw DimensionError(std::string(where) + ": expected (channels,height,width), have " +
                         dims_str(x.dims()));
  if (x.height() % 2 != 0)
    throw DimensionError(std::string(where) + ": height " + std::to_string(x.height()) +
                         " is odd");
  if (x.width() % 2 != 0)
    throw DimensionError(std::string(where) + ": width " + std::to_string(x.width()) +
                         " is odd");
}

}  // namespace detail

// Orthonormal 2x2 Haar analysis. For each 2x2 block (p00 p01 / p10 p11):
//   ll = (p00 + p01 + p10 + p11) / 2
//   lh = (p00 - p01 + p10 - p11) / 2   (horizontal frequency)
//   hl = (p00 + p01 - p10 - p11) / 2   (vertical frequency)
//   hh = (p00 - p01 - p10 + p11) / 2
// The transform matrix is symmetric orthogonal, so analysis and synthesis use
// the same coefficients and energy is preserved exactly.
template <class S>
SubbandSet<S> dwt2_haar(const Tensor<S>& x) {
  detail::require_even_image(x, "dwt2_haar");
  const Index c = x.channels(), h = x.height() / 2, w = x.width() / 2;
  SubbandSet<S> s{Tensor<S>({c, h, w}), Tensor<S>({c, h, w}), Tensor<S>({c, h, w}),
                  Tensor<S>({c, h, w})};
  const S half = S(0.5);
  for (Index ch = 0; ch < c; ++ch) {
    auto in = x.channel(ch);
    auto ll = s.ll.channel(ch);
    auto lh = s.lh.channel(ch);
    auto hl = s.hl.channel(ch);
    auto hh = s.hh.channel(ch);
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        const S p00 = in(2 * i, 2 * j), p01 = in(2 * i, 2 * j + 1);
        const S p10 = in(2 * i + 1, 2 * j), p11 = in(2 * i + 1, 2 * j + 1);
        ll(i, j) = half * (p00 + p01 + p10 + p11);
        lh(i, j) = half * (p00 - p01 + p10 - p11);
        hl(i, j) = half * (p00 + p01 - p10 - p11);
        hh(i, j) = half * (p00 - p01 - p10 + p11);
      }
    }
  }
  return s;
}

// Exact inverse of dwt2_haar (same symmetric orthogonal kernel).
template <class S>
Tensor<S> idwt2_haar(const SubbandSet<S>& s) {
  require_same_dims(s.ll, s.lh, "idwt2_haar");
  require_same_dims(s.ll, s.hl, "idwt2_haar");
  require_same_dims(s.ll, s.hh, "idwt2_haar");
  if (s.ll.rank() != 3)
    throw DimensionError("idwt2_haar: expected rank-3 subbands, have " + dims_str(s.ll.dims()));
  const Index c = s.ll.channels(), h = s.ll.height(), w = s.ll.width();
  Tensor<S> x({c, 2 * h, 2 * w});
  const S half = S(0.5);
  for (Index ch = 0; ch < c; ++ch) {
    auto out = x.channel(ch);
    auto ll = s.ll.channel(ch);
    auto lh = s.lh.channel(ch);
    auto hl = s.hl.channel(ch);
    auto hh = s.hh.channel(ch);
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        const S a = ll(i, j), b = lh(i, j), cc = hl(i, j), d = hh(i, j);
        out(2 * i, 2 * j) = half * (a + b + cc + d);
        out(2 * i, 2 * j + 1) = half * (a - b + cc - d);
        out(2 * i + 1, 2 * j) = half * (a + b - cc - d);
        out(2 * i + 1, 2 * j + 1) = half * (a - b - cc + d);
      }
    }
  }
  return x;
}

// Subbands concatenated along channels in (ll, lh, hl, hh) order; convenient
// for convolutional consumers.
template <class S>
Tensor<S> dwt2_haar_stacked(const Tensor<S>& x) {
  SubbandSet<S> s = dwt2_haar(x);
  const Index c = x.channels(), h = x.height() / 2, w = x.width() / 2;
  Tensor<S> out({4 * c, h, w});
  const Index n = c * h * w;
  out.array().segment(0, n) = s.ll.array();
  out.array().segment(n, n) = s.lh.array();
  out.array().segment(2 * n, n) = s.hl.array();
  out.array().segment(3 * n, n) = s.hh.array();
  return out;
}

template <class S>
Tensor<S> idwt2_haar_stacked(const Tensor<S>& stacked) {
  if (stacked.rank() != 3 || stacked.channels() % 4 != 0)
    throw DimensionError("idwt2_haar_stacked: channel count must be a multiple of 4, have " +
                         dims_str(stacked.dims()));
  const Index c = stacked.channels() / 4, h = stacked.height(), w = stacked.width();
  const Index n = c * h * w;
  SubbandSet<S> s{Tensor<S>({c, h, w}), Tensor<S>({c, h, w}), Tensor<S>({c, h, w}),
                  Tensor<S>({c, h, w})};
  s.ll.array() = stacked.array().segment(0, n);
  s.lh.array() = stacked.array().segment(n, n);
  s.hl.array() = stacked.array().segment(2 * n, n);
  s.hh.array() = stacked.array().segment(3 * n, n);
  return idwt2_haar(s);
}

// Number of analysis levels the spatial extent supports (each level requires
// the current height and width to be even).
inline int max_pyramid_levels(Index h, Index w) {
  int levels = 0;
  while (h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0) {
    ++levels;
    h /= 2;
    w /= 2;
  }
  return levels;
}

// Recursive analysis of the approximation band. levels[0] is the finest.
template <class S>
std::vector<SubbandSet<S>> decompose_pyramid(const Tensor<S>& x, int levels) {
  if (levels < 1) throw ConfigError("decompose_pyramid: levels must be >= 1");
  detail::require_even_image(x, "decompose_pyramid");
  const int feasible = max_pyramid_levels(x.height(), x.width());
  if (levels > feasible)
    throw DimensionError("decompose_pyramid: " + std::to_string(levels) +
                         " levels requested but input " + dims_str(x.dims()) +
                         " supports at most " + std::to_string(feasible));
  std::vector<SubbandSet<S>> out;
  out.reserve(static_cast<std::size_t>(levels));
  Tensor<S> cur = x;
  for (int l = 0; l < levels; ++l) {
    out.push_back(dwt2_haar(cur));
    cur = out.back().ll;
  }
  return out;
}

// Synthesis from a pyramid, inverse of decompose_pyramid.
template <class S>
Tensor<S> reconstruct_pyramid(const std::vector<SubbandSet<S>>& pyr) {
  if (pyr.empty()) throw ConfigError("reconstruct_pyramid: empty pyramid");
  Tensor<S> cur = pyr.back().ll;
  for (auto it = pyr.rbegin(); it != pyr.rend(); ++it) {
    SubbandSet<S> s = *it;
    s.ll = cur;
    cur = idwt2_haar(s);
  }
  return cur;
}

}  // namespace hdwsr
