#pragma once

#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hdwsr/attention.hpp"
#include "hdwsr/flops.hpp"
#include "hdwsr/tensor.hpp"
#include "hdwsr/wavelet.hpp"

namespace hdwsr {

// Reverse-mode tape. Each operation appends a node holding its value and a
// closure that scatters the node's incoming gradient to its parents. Values
// live on the tape so closures capture ids and small constants only. With
// grads disabled the same ops run value-only and push no closures.
template <class S>
class Tape;

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  std::ptrdiff_t id = -1;

  const Tensor<S>& val() const { return tape->value(id); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

template <class S>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var<S> constant(Tensor<S> v) { return push(std::move(v), false); }

  // Differentiable leaf; its gradient is read back after backward().
  Var<S> input(Tensor<S> v) { return push(std::move(v), grad_enabled_); }

  const Tensor<S>& value(std::ptrdiff_t id) const {
    return nodes_[static_cast<std::size_t>(id)].value;
  }

  bool wants_grad(std::ptrdiff_t id) const {
    return nodes_[static_cast<std::size_t>(id)].wants_grad;
  }

  // Accumulation target, zero-initialized on first touch.
  Tensor<S>& grad_ref(std::ptrdiff_t id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_touched) {
      n.grad = Tensor<S>(n.value.dims());
      n.grad_touched = true;
    }
    return n.grad;
  }

  const Tensor<S>& grad(Var<S> v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.grad_touched) throw ContractError("Tape::grad: no gradient reached this node");
    return n.grad;
  }

  bool has_grad(Var<S> v) const { return nodes_[static_cast<std::size_t>(v.id)].grad_touched; }

  void backward(Var<S> loss) {
    if (!grad_enabled_) throw ContractError("Tape::backward: gradients are disabled");
    if (loss.tape != this) throw ContractError("Tape::backward: loss from another tape");
    if (value(loss.id).size() != 1) throw ContractError("Tape::backward: loss must be scalar");
    grad_ref(loss.id).array().setConstant(S(1));
    for (std::ptrdiff_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad_touched && n.backward) n.backward(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Internal to op builders.
  Var<S> push(Tensor<S> v, bool wants_grad) {
    nodes_.push_back(Node{std::move(v), Tensor<S>(), wants_grad && grad_enabled_, false, nullptr});
    return Var<S>{this, static_cast<std::ptrdiff_t>(nodes_.size()) - 1};
  }
  void set_backward(std::ptrdiff_t id, std::function<void(Tape&)> fn) {
    nodes_[static_cast<std::size_t>(id)].backward = std::move(fn);
  }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool wants_grad = false;
    bool grad_touched = false;
    std::function<void(Tape&)> backward;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

namespace ag {

template <class S>
Tape<S>& same_tape(Var<S> a, Var<S> b) {
  if (a.tape != b.tape) throw ContractError("autograd: operands from different tapes");
  return *a.tape;
}

template <class S>
bool any_wants(Tape<S>& t, std::initializer_list<std::ptrdiff_t> ids) {
  for (auto id : ids)
    if (t.wants_grad(id)) return true;
  return false;
}

// Registers `scatter(tape, node_grad)` as the node's backward step.
template <class S, class F>
Var<S> finish(Tape<S>& t, Tensor<S> value, bool wants_grad, F&& scatter) {
  Var<S> out = t.push(std::move(value), wants_grad);
  if (t.grad_enabled() && wants_grad) {
    const std::ptrdiff_t self = out.id;
    t.set_backward(self, [self, scatter = std::forward<F>(scatter)](Tape<S>& tp) {
      scatter(tp, tp.grad_ref(self));
    });
  }
  return out;
}

// Same, but the scatter also receives the node's own id so it can read its
// stored value (softmax outputs reuse it instead of recomputing).
template <class S, class F>
Var<S> finish_self(Tape<S>& t, Tensor<S> value, bool wants_grad, F&& scatter) {
  Var<S> out = t.push(std::move(value), wants_grad);
  if (t.grad_enabled() && wants_grad) {
    const std::ptrdiff_t self = out.id;
    t.set_backward(self, [self, scatter = std::forward<F>(scatter)](Tape<S>& tp) {
      scatter(tp, tp.grad_ref(self), self);
    });
  }
  return out;
}

// ----- elementwise -----

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = same_tape(a, b);
  require_same_dims(a.val(), b.val(), "add");
  Tensor<S> out(a.val().dims());
  out.array() = a.val().array() + b.val().array();
  const auto ida = a.id, idb = b.id;
  return finish(t, std::move(out), any_wants(t, {ida, idb}),
                [ida, idb](Tape<S>& tp, const Tensor<S>& g) {
                  if (tp.wants_grad(ida)) tp.grad_ref(ida).array() += g.array();
                  if (tp.wants_grad(idb)) tp.grad_ref(idb).array() += g.array();
                });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = same_tape(a, b);
  require_same_dims(a.val(), b.val(), "sub");
  Tensor<S> out(a.val().dims());
  out.array() = a.val().array() - b.val().array();
  const auto ida = a.id, idb = b.id;
  return finish(t, std::move(out), any_wants(t, {ida, idb}),
                [ida, idb](Tape<S>& tp, const Tensor<S>& g) {
                  if (tp.wants_grad(ida)) tp.grad_ref(ida).array() += g.array();
                  if (tp.wants_grad(idb)) tp.grad_ref(idb).array() -= g.array();
                });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = same_tape(a, b);
  require_same_dims(a.val(), b.val(), "mul");
  Tensor<S> out(a.val().dims());
  out.array() = a.val().array() * b.val().array();
  const auto ida = a.id, idb = b.id;
  return finish(t, std::move(out), any_wants(t, {ida, idb}),
                [ida, idb](Tape<S>& tp, const Tensor<S>& g) {
                  if (tp.wants_grad(ida))
                    tp.grad_ref(ida).array() += g.array() * tp.value(idb).array();
                  if (tp.wants_grad(idb))
                    tp.grad_ref(idb).array() += g.array() * tp.value(ida).array();
                });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(a.val().dims());
  out.array() = a.val().array() * c;
  const auto ida = a.id;
  return finish(t, std::move(out), t.wants_grad(ida),
                [ida, c](Tape<S>& tp, const Tensor<S>& g) {
                  tp.grad_ref(ida).array() += g.array() * c;
                });
}

template <class S>
Var<S> abs_v(Var<S> a) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(a.val().dims());
  out.array() = a.val().array().abs();
  const auto ida = a.id;
  return finish(t, std::move(out), t.wants_grad(ida),
                [ida](Tape<S>& tp, const Tensor<S>& g) {
                  const auto& x = tp.value(ida).array();
                  tp.grad_ref(ida).array() += g.array() * x.sign();
                });
}

template <class S>
Var<S> gelu(Var<S> a) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(a.val().dims());
  auto cdf = [](S x) {
    return S(0.5) * (S(1) + static_cast<S>(std::erf(x / std::sqrt(S(2)))));
  };
  out.array() = a.val().array() * a.val().array().unaryExpr(cdf);
  const auto ida = a.id;
  return finish(t, std::move(out), t.wants_grad(ida),
                [ida, cdf](Tape<S>& tp, const Tensor<S>& g) {
                  const auto& x = tp.value(ida).array();
                  const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(M_PI));
                  auto pdf = (-(x * x) * S(0.5)).exp() * inv_sqrt2pi;
                  tp.grad_ref(ida).array() += g.array() * (x.unaryExpr(cdf) + x * pdf);
                });
}

template <class S>
Var<S> silu(Var<S> a) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(a.val().dims());
  auto sig = (S(1) / (S(1) + (-a.val().array()).exp()));
  out.array() = a.val().array() * sig;
  const auto ida = a.id;
  return finish(t, std::move(out), t.wants_grad(ida),
                [ida](Tape<S>& tp, const Tensor<S>& g) {
                  const auto& x = tp.value(ida).array();
                  auto s = S(1) / (S(1) + (-x).exp());
                  tp.grad_ref(ida).array() += g.array() * (s * (S(1) + x * (S(1) - s)));
                });
}

template <class S>
Var<S> mean_all(Var<S> a) {
  Tape<S>& t = *a.tape;
  Tensor<S> out({1});
  out[0] = a.val().array().mean();
  const auto ida = a.id;
  const S inv_n = S(1) / static_cast<S>(a.val().size());
  return finish(t, std::move(out), t.wants_grad(ida),
                [ida, inv_n](Tape<S>& tp, const Tensor<S>& g) {
                  tp.grad_ref(ida).array() += g[0] * inv_n;
                });
}

// Square root of a nonnegative scalar; subgradient 0 at 0.
template <class S>
Var<S> sqrt_scalar(Var<S> a) {
  Tape<S>& t = *a.tape;
  if (a.val().size() != 1) throw DimensionError("sqrt_scalar: input must be scalar");
  Tensor<S> out({1});
  out[0] = std::sqrt(a.val()[0]);
  const auto ida = a.id;
  const S root = out[0];
  return finish(t, std::move(out), t.wants_grad(ida),
                [ida, root](Tape<S>& tp, const Tensor<S>& g) {
                  if (root > S(0)) tp.grad_ref(ida)[0] += g[0] * S(0.5) / root;
                });
}

// ----- matrix ops (rank-2 values) -----

template <class S>
Var<S> matmul(Var<S> a, Var<S> b, FlopLedger* ledger = nullptr,
              const std::string& label = "matmul") {
  Tape<S>& t = same_tape(a, b);
  const auto& av = a.val();
  const auto& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows())
    throw DimensionError("matmul: " + dims_str(av.dims()) + " x " + dims_str(bv.dims()));
  Tensor<S> out({av.rows(), bv.cols()});
  out.mat() = av.mat() * bv.mat();
  if (ledger)
    ledger->add(label, 2ull * static_cast<std::uint64_t>(av.rows()) *
                           static_cast<std::uint64_t>(av.cols()) *
                           static_cast<std::uint64_t>(bv.cols()));
  const auto ida = a.id, idb = b.id;
  return finish(t, std::move(out), any_wants(t, {ida, idb}),
                [ida, idb](Tape<S>& tp, const Tensor<S>& g) {
                  if (tp.wants_grad(ida))
                    tp.grad_ref(ida).mat() += g.mat() * tp.value(idb).mat().transpose();
                  if (tp.wants_grad(idb))
                    tp.grad_ref(idb).mat() += tp.value(ida).mat().transpose() * g.mat();
                });
}

// A * B^T.
template <class S>
Var<S> matmul_nt(Var<S> a, Var<S> b, FlopLedger* ledger = nullptr,
                 const std::string& label = "matmul") {
  Tape<S>& t = same_tape(a, b);
  const auto& av = a.val();
  const auto& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols())
    throw DimensionError("matmul_nt: " + dims_str(av.dims()) + " x " + dims_str(bv.dims()) +
                         "^T");
  Tensor<S> out({av.rows(), bv.rows()});
  out.mat() = av.mat() * bv.mat().transpose();
  if (ledger)
    ledger->add(label, 2ull * static_cast<std::uint64_t>(av.rows()) *
                           static_cast<std::uint64_t>(av.cols()) *
                           static_cast<std::uint64_t>(bv.rows()));
  const auto ida = a.id, idb = b.id;
  return finish(t, std::move(out), any_wants(t, {ida, idb}),
                [ida, idb](Tape<S>& tp, const Tensor<S>& g) {
                  if (tp.wants_grad(ida))
                    tp.grad_ref(ida).mat() += g.mat() * tp.value(idb).mat();
                  if (tp.wants_grad(idb))
                    tp.grad_ref(idb).mat() += g.mat().transpose() * tp.value(ida).mat();
                });
}

// (N,C) + row vector (C,) broadcast over rows.
template <class S>
Var<S> add_rowvec(Var<S> x, Var<S> v) {
  Tape<S>& t = same_tape(x, v);
  const auto& xv = x.val();
  const auto& vv = v.val();
  if (xv.rank() != 2 || vv.rank() != 1 || xv.cols() != vv.size())
    throw DimensionError("add_rowvec: " + dims_str(xv.dims()) + " + " + dims_str(vv.dims()));
  Tensor<S> out(xv.dims());
  out.mat() = xv.mat();
  out.mat().rowwise() += Eigen::Map<const VecX<S>>(vv.data(), vv.size()).transpose();
  const auto idx = x.id, idv = v.id;
  return finish(t, std::move(out), any_wants(t, {idx, idv}),
                [idx, idv](Tape<S>& tp, const Tensor<S>& g) {
                  if (tp.wants_grad(idx)) tp.grad_ref(idx).array() += g.array();
                  if (tp.wants_grad(idv)) {
                    auto gv = Eigen::Map<VecX<S>>(tp.grad_ref(idv).data(),
                                                  tp.grad_ref(idv).size());
                    gv += g.mat().colwise().sum().transpose();
                  }
                });
}

// ----- layout changes -----

// Same flat data, new dims.
template <class S>
Var<S> reshape(Var<S> x, std::vector<Index> dims) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(dims);
  if (out.size() != x.val().size())
    throw DimensionError("reshape: " + dims_str(x.val().dims()) + " to " + dims_str(dims) +
                         " changes element count");
  out.array() = x.val().array();
  const auto idx = x.id;
  return finish(t, std::move(out), t.wants_grad(idx),
                [idx](Tape<S>& tp, const Tensor<S>& g) {
                  tp.grad_ref(idx).array() += g.array();
                });
}

// (C,H,W) -> (H*W, C), token p = i*W + j.
template <class S>
Var<S> tokens_from_map(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto& xv = x.val();
  if (xv.rank() != 3) throw DimensionError("tokens_from_map: need rank-3 input");
  const Index c = xv.channels(), h = xv.height(), w = xv.width();
  Tensor<S> out({h * w, c});
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) out(i * w + j, ch) = xv(ch, i, j);
  const auto idx = x.id;
  return finish(t, std::move(out), t.wants_grad(idx),
                [idx, c, h, w](Tape<S>& tp, const Tensor<S>& g) {
                  Tensor<S>& gx = tp.grad_ref(idx);
                  for (Index ch = 0; ch < c; ++ch)
                    for (Index i = 0; i < h; ++i)
                      for (Index j = 0; j < w; ++j) gx(ch, i, j) += g(i * w + j, ch);
                });
}

template <class S>
Var<S> map_from_tokens(Var<S> x, Index c, Index h, Index w) {
  Tape<S>& t = *x.tape;
  const auto& xv = x.val();
  if (xv.rank() != 2 || xv.rows() != h * w || xv.cols() != c)
    throw DimensionError("map_from_tokens: tokens " + dims_str(xv.dims()) +
                         " do not fill (" + std::to_string(c) + "," + std::to_string(h) + "," +
                         std::to_string(w) + ")");
  Tensor<S> out({c, h, w});
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) out(ch, i, j) = xv(i * w + j, ch);
  const auto idx = x.id;
  return finish(t, std::move(out), t.wants_grad(idx),
                [idx, c, h, w](Tape<S>& tp, const Tensor<S>& g) {
                  Tensor<S>& gx = tp.grad_ref(idx);
                  for (Index ch = 0; ch < c; ++ch)
                    for (Index i = 0; i < h; ++i)
                      for (Index j = 0; j < w; ++j) gx(i * w + j, ch) += g(ch, i, j);
                });
}

// out.row(i) = x.row(perm[i]); perm must be a bijection for the inverse to
// exist, callers build it that way.
template <class S>
Var<S> permute_rows(Var<S> x, std::shared_ptr<const std::vector<Index>> perm) {
  Tape<S>& t = *x.tape;
  const auto& xv = x.val();
  if (xv.rank() != 2 || static_cast<std::size_t>(xv.rows()) != perm->size())
    throw DimensionError("permute_rows: size mismatch");
  Tensor<S> out(xv.dims());
  for (Index i = 0; i < xv.rows(); ++i)
    out.mat().row(i) = xv.mat().row((*perm)[static_cast<std::size_t>(i)]);
  const auto idx = x.id;
  return finish(t, std::move(out), t.wants_grad(idx),
                [idx, perm](Tape<S>& tp, const Tensor<S>& g) {
                  Tensor<S>& gx = tp.grad_ref(idx);
                  for (Index i = 0; i < g.rows(); ++i)
                    gx.mat().row((*perm)[static_cast<std::size_t>(i)]) += g.mat().row(i);
                });
}

template <class S>
Var<S> slice_cols(Var<S> x, Index start, Index n) {
  Tape<S>& t = *x.tape;
  const auto& xv = x.val();
  if (xv.rank() != 2 || start < 0 || start + n > xv.cols())
    throw DimensionError("slice_cols: range outside " + dims_str(xv.dims()));
  Tensor<S> out({xv.rows(), n});
  out.mat() = xv.mat().middleCols(start, n);
  const auto idx = x.id;
  return finish(t, std::move(out), t.wants_grad(idx),
                [idx, start, n](Tape<S>& tp, const Tensor<S>& g) {
                  tp.grad_ref(idx).mat().middleCols(start, n) += g.mat();
                });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& xs) {
  if (xs.empty()) throw DimensionError("concat_cols: empty input");
  Tape<S>& t = *xs[0].tape;
  Index rows = xs[0].val().rows(), total = 0;
  bool wg = false;
  for (const auto& v : xs) {
    if (v.val().rank() != 2 || v.val().rows() != rows)
      throw DimensionError("concat_cols: inconsistent rows");
    total += v.val().cols();
    wg = wg || t.wants_grad(v.id);
  }
  Tensor<S> out({rows, total});
  Index off = 0;
  std::vector<std::pair<std::ptrdiff_t, std::pair<Index, Index>>> spans;
  for (const auto& v : xs) {
    const Index n = v.val().cols();
    out.mat().middleCols(off, n) = v.val().mat();
    spans.push_back({v.id, {off, n}});
    off += n;
  }
  return finish(t, std::move(out), wg,
                [spans](Tape<S>& tp, const Tensor<S>& g) {
                  for (const auto& [id, span] : spans)
                    if (tp.wants_grad(id))
                      tp.grad_ref(id).mat() += g.mat().middleCols(span.first, span.second);
                });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& xs) {
  if (xs.empty()) throw DimensionError("concat_rows: empty input");
  Tape<S>& t = *xs[0].tape;
  Index cols = xs[0].val().cols(), total = 0;
  bool wg = false;
  for (const auto& v : xs) {
    if (v.val().rank() != 2 || v.val().cols() != cols)
      throw DimensionError("concat_rows: inconsistent cols");
    total += v.val().rows();
    wg = wg || t.wants_grad(v.id);
  }
  Tensor<S> out({total, cols});
  Index off = 0;
  std::vector<std::pair<std::ptrdiff_t, std::pair<Index, Index>>> spans;
  for (const auto& v : xs) {
    const Index n = v.val().rows();
    out.mat().middleRows(off, n) = v.val().mat();
    spans.push_back({v.id, {off, n}});
    off += n;
  }
  return finish(t, std::move(out), wg,
                [spans](Tape<S>& tp, const Tensor<S>& g) {
                  for (const auto& [id, span] : spans)
                    if (tp.wants_grad(id))
                      tp.grad_ref(id).mat() += g.mat().middleRows(span.first, span.second);
                });
}

template <class S>
Var<S> slice_channels(Var<S> x, Index start, Index n) {
  Tape<S>& t = *x.tape;
  const auto& xv = x.val();
  if (xv.rank() != 3 || start < 0 || start + n > xv.channels())
    throw DimensionError("slice_channels: range outside " + dims_str(xv.dims()));
  const Index plane = xv.height() * xv.width();
  Tensor<S> out({n, xv.height(), xv.width()});
  out.array() = xv.array().segment(start * plane, n * plane);
  const auto idx = x.id;
  return finish(t, std::move(out), t.wants_grad(idx),
                [idx, start, plane, n](Tape<S>& tp, const Tensor<S>& g) {
                  tp.grad_ref(idx).array().segment(start * plane, n * plane) += g.array();
                });
}

template <class S>
Var<S> concat_channels(const std::vector<Var<S>>& xs) {
  if (xs.empty()) throw DimensionError("concat_channels: empty input");
  Tape<S>& t = *xs[0].tape;
  const Index h = xs[0].val().height(), w = xs[0].val().width();
  Index total = 0;
  bool wg = false;
  for (const auto& v : xs) {
    if (v.val().rank() != 3 || v.val().height() != h || v.val().width() != w)
      throw DimensionError("concat_channels: inconsistent spatial dims");
    total += v.val().channels();
    wg = wg || t.wants_grad(v.id);
  }
  Tensor<S> out({total, h, w});
  const Index plane = h * w;
  Index off = 0;
  std::vector<std::pair<std::ptrdiff_t, std::pair<Index, Index>>> spans;
  for (const auto& v : xs) {
    const Index n = v.val().channels();
    out.array().segment(off * plane, n * plane) = v.val().array();
    spans.push_back({v.id, {off * plane, n * plane}});
    off += n;
  }
  return finish(t, std::move(out), wg,
                [spans](Tape<S>& tp, const Tensor<S>& g) {
                  for (const auto& [id, span] : spans)
                    if (tp.wants_grad(id))
                      tp.grad_ref(id).array() += g.array().segment(span.first, span.second);
                });
}

// ----- wavelet nodes -----
// The stacked Haar analysis is orthogonal, so the Jacobian transpose of one
// direction is exactly the other direction applied to the gradient.

template <class S>
Var<S> dwt2(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = dwt2_haar_stacked(x.val());
  const auto idx = x.id;
  return finish(t, std::move(out), t.wants_grad(idx),
                [idx](Tape<S>& tp, const Tensor<S>& g) {
                  tp.grad_ref(idx).array() += idwt2_haar_stacked(g).array();
                });
}

template <class S>
Var<S> idwt2(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = idwt2_haar_stacked(x.val());
  const auto idx = x.id;
  return finish(t, std::move(out), t.wants_grad(idx),
                [idx](Tape<S>& tp, const Tensor<S>& g) {
                  tp.grad_ref(idx).array() += dwt2_haar_stacked(g).array();
                });
}

// ----- convolution -----

namespace conv_detail {

// Patch matrix (Ho*Wo, Cin*kh*kw); feature order is channel-major then
// kernel-row then kernel-col, matching weight rows.
template <class S>
MatX<S> im2col(const Tensor<S>& x, Index kh, Index kw, Index stride, Index pad) {
  const Index c = x.channels(), h = x.height(), w = x.width();
  const Index ho = (h + 2 * pad - kh) / stride + 1;
  const Index wo = (w + 2 * pad - kw) / stride + 1;
  MatX<S> p = MatX<S>::Zero(ho * wo, c * kh * kw);
  for (Index oi = 0; oi < ho; ++oi)
    for (Index oj = 0; oj < wo; ++oj) {
      const Index row = oi * wo + oj;
      for (Index ch = 0; ch < c; ++ch)
        for (Index ki = 0; ki < kh; ++ki) {
          const Index ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) continue;
          for (Index kj = 0; kj < kw; ++kj) {
            const Index jj = oj * stride + kj - pad;
            if (jj < 0 || jj >= w) continue;
            p(row, (ch * kh + ki) * kw + kj) = x(ch, ii, jj);
          }
        }
    }
  return p;
}

template <class S>
void col2im_add(Tensor<S>& dx, const MatX<S>& dp, Index kh, Index kw, Index stride, Index pad) {
  const Index c = dx.channels(), h = dx.height(), w = dx.width();
  const Index ho = (h + 2 * pad - kh) / stride + 1;
  const Index wo = (w + 2 * pad - kw) / stride + 1;
  for (Index oi = 0; oi < ho; ++oi)
    for (Index oj = 0; oj < wo; ++oj) {
      const Index row = oi * wo + oj;
      for (Index ch = 0; ch < c; ++ch)
        for (Index ki = 0; ki < kh; ++ki) {
          const Index ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) continue;
          for (Index kj = 0; kj < kw; ++kj) {
            const Index jj = oj * stride + kj - pad;
            if (jj < 0 || jj >= w) continue;
            dx(ch, ii, jj) += dp(row, (ch * kh + ki) * kw + kj);
          }
        }
    }
}

}  // namespace conv_detail

// x: (Cin,H,W); w: (Cout, Cin*kh*kw); b: (Cout). Zero padding.
template <class S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, Index kh, Index kw, Index stride, Index pad,
              FlopLedger* ledger = nullptr, const std::string& label = "conv") {
  Tape<S>& t = same_tape(x, w);
  const auto& xv = x.val();
  const auto& wv = w.val();
  const auto& bv = b.val();
  if (xv.rank() != 3 || wv.rank() != 2 || bv.rank() != 1)
    throw DimensionError("conv2d: bad ranks");
  const Index cin = xv.channels();
  if (wv.cols() != cin * kh * kw || bv.size() != wv.rows())
    throw DimensionError("conv2d: weight " + dims_str(wv.dims()) + " does not match input " +
                         dims_str(xv.dims()));
  const Index cout = wv.rows();
  const Index ho = (xv.height() + 2 * pad - kh) / stride + 1;
  const Index wo = (xv.width() + 2 * pad - kw) / stride + 1;
  MatX<S> p = conv_detail::im2col(xv, kh, kw, stride, pad);
  MatX<S> y = p * wv.mat().transpose();  // (Ho*Wo, Cout)
  Tensor<S> out({cout, ho, wo});
  for (Index co = 0; co < cout; ++co) {
    auto plane = out.channel(co);
    for (Index oi = 0; oi < ho; ++oi)
      for (Index oj = 0; oj < wo; ++oj) plane(oi, oj) = y(oi * wo + oj, co) + bv[co];
  }
  if (ledger)
    ledger->add(label, 2ull * static_cast<std::uint64_t>(ho * wo) *
                           static_cast<std::uint64_t>(cout) *
                           static_cast<std::uint64_t>(cin * kh * kw));
  const auto idx = x.id, idw = w.id, idb = b.id;
  return finish(
      t, std::move(out), any_wants(t, {idx, idw, idb}),
      [idx, idw, idb, kh, kw, stride, pad, ho, wo, cout](Tape<S>& tp, const Tensor<S>& g) {
        MatX<S> gy(ho * wo, cout);
        for (Index co = 0; co < cout; ++co)
          for (Index oi = 0; oi < ho; ++oi)
            for (Index oj = 0; oj < wo; ++oj) gy(oi * wo + oj, co) = g(co, oi, oj);
        if (tp.wants_grad(idb)) {
          Tensor<S>& gb = tp.grad_ref(idb);
          for (Index co = 0; co < cout; ++co) gb[co] += gy.col(co).sum();
        }
        // Patches are recomputed rather than cached; the trade is memory for
        // a second im2col pass.
        MatX<S> p2 = conv_detail::im2col(tp.value(idx), kh, kw, stride, pad);
        if (tp.wants_grad(idw)) tp.grad_ref(idw).mat() += gy.transpose() * p2;
        if (tp.wants_grad(idx)) {
          MatX<S> dp = gy * tp.value(idw).mat();
          conv_detail::col2im_add(tp.grad_ref(idx), dp, kh, kw, stride, pad);
        }
      });
}

// Exact 2x upsampling: each input pixel expands to a 2x2 block through a
// per-position linear map. x: (Cin,H,W); w: (4*Cout, Cin) with row
// co*4 + (di*2+dj); b: (Cout). Output (Cout, 2H, 2W).
template <class S>
Var<S> upconv2x(Var<S> x, Var<S> w, Var<S> b, FlopLedger* ledger = nullptr,
                const std::string& label = "upconv") {
  Tape<S>& t = same_tape(x, w);
  const auto& xv = x.val();
  const auto& wv = w.val();
  const auto& bv = b.val();
  if (xv.rank() != 3 || wv.rank() != 2 || wv.rows() % 4 != 0 || wv.cols() != xv.channels())
    throw DimensionError("upconv2x: weight " + dims_str(wv.dims()) + " does not match input " +
                         dims_str(xv.dims()));
  const Index cin = xv.channels(), h = xv.height(), wd = xv.width();
  const Index cout = wv.rows() / 4;
  if (bv.size() != cout) throw DimensionError("upconv2x: bias size mismatch");
  MatX<S> tokens(h * wd, cin);
  for (Index ch = 0; ch < cin; ++ch)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < wd; ++j) tokens(i * wd + j, ch) = xv(ch, i, j);
  MatX<S> y = tokens * wv.mat().transpose();  // (H*W, 4*Cout)
  Tensor<S> out({cout, 2 * h, 2 * wd});
  for (Index co = 0; co < cout; ++co)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < wd; ++j)
        for (Index q = 0; q < 4; ++q)
          out(co, 2 * i + q / 2, 2 * j + q % 2) = y(i * wd + j, co * 4 + q) + bv[co];
  if (ledger)
    ledger->add(label, 2ull * static_cast<std::uint64_t>(h * wd) *
                           static_cast<std::uint64_t>(4 * cout) *
                           static_cast<std::uint64_t>(cin));
  const auto idx = x.id, idw = w.id, idb = b.id;
  return finish(
      t, std::move(out), any_wants(t, {idx, idw, idb}),
      [idx, idw, idb, cin, cout, h, wd](Tape<S>& tp, const Tensor<S>& g) {
        MatX<S> gy(h * wd, 4 * cout);
        for (Index co = 0; co < cout; ++co)
          for (Index i = 0; i < h; ++i)
            for (Index j = 0; j < wd; ++j)
              for (Index q = 0; q < 4; ++q)
                gy(i * wd + j, co * 4 + q) = g(co, 2 * i + q / 2, 2 * j + q % 2);
        if (tp.wants_grad(idb)) {
          Tensor<S>& gb = tp.grad_ref(idb);
          for (Index co = 0; co < cout; ++co)
            for (Index q = 0; q < 4; ++q) gb[co] += gy.col(co * 4 + q).sum();
        }
        const auto& xval = tp.value(idx);
        MatX<S> tokens2(h * wd, cin);
        for (Index ch = 0; ch < cin; ++ch)
          for (Index i = 0; i < h; ++i)
            for (Index j = 0; j < wd; ++j) tokens2(i * wd + j, ch) = xval(ch, i, j);
        if (tp.wants_grad(idw)) tp.grad_ref(idw).mat() += gy.transpose() * tokens2;
        if (tp.wants_grad(idx)) {
          MatX<S> dtok = gy * tp.value(idw).mat();
          Tensor<S>& gx = tp.grad_ref(idx);
          for (Index ch = 0; ch < cin; ++ch)
            for (Index i = 0; i < h; ++i)
              for (Index j = 0; j < wd; ++j) gx(ch, i, j) += dtok(i * wd + j, ch);
        }
      });
}

// ----- normalization -----

// Per-row layer normalization over the feature axis of (N,C) tokens.
template <class S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  Tape<S>& t = same_tape(x, gamma);
  same_tape(gamma, beta);
  const auto& xv = x.val();
  const auto& gv = gamma.val();
  const auto& bv = beta.val();
  if (xv.rank() != 2 || gv.rank() != 1 || bv.rank() != 1 || gv.size() != xv.cols() ||
      bv.size() != xv.cols())
    throw DimensionError("layer_norm: shape mismatch");
  const Index n = xv.rows(), c = xv.cols();
  Tensor<S> out(xv.dims());
  for (Index i = 0; i < n; ++i) {
    const S mu = xv.mat().row(i).mean();
    const S var = (xv.mat().row(i).array() - mu).square().mean();
    const S inv = S(1) / std::sqrt(var + eps);
    for (Index j = 0; j < c; ++j)
      out(i, j) = (xv(i, j) - mu) * inv * gv[j] + bv[j];
  }
  const auto idx = x.id, idg = gamma.id, idb = beta.id;
  return finish(
      t, std::move(out), any_wants(t, {idx, idg, idb}),
      [idx, idg, idb, eps, n, c](Tape<S>& tp, const Tensor<S>& g) {
        const auto& xval = tp.value(idx);
        const auto& gam = tp.value(idg);
        for (Index i = 0; i < n; ++i) {
          const S mu = xval.mat().row(i).mean();
          const S var = (xval.mat().row(i).array() - mu).square().mean();
          const S inv = S(1) / std::sqrt(var + eps);
          // dxhat_j = g_j * gamma_j; dx follows the standard layer-norm chain.
          S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
          for (Index j = 0; j < c; ++j) {
            const S xhat = (xval(i, j) - mu) * inv;
            const S dxh = g(i, j) * gam[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat;
          }
          if (tp.wants_grad(idx)) {
            Tensor<S>& gx = tp.grad_ref(idx);
            for (Index j = 0; j < c; ++j) {
              const S xhat = (xval(i, j) - mu) * inv;
              const S dxh = g(i, j) * gam[j];
              gx(i, j) += inv * (dxh - sum_dxhat / static_cast<S>(c) -
                                 xhat * sum_dxhat_xhat / static_cast<S>(c));
            }
          }
          if (tp.wants_grad(idg) || tp.wants_grad(idb)) {
            for (Index j = 0; j < c; ++j) {
              const S xhat = (xval(i, j) - mu) * inv;
              if (tp.wants_grad(idg)) tp.grad_ref(idg)[j] += g(i, j) * xhat;
              if (tp.wants_grad(idb)) tp.grad_ref(idb)[j] += g(i, j);
            }
          }
        }
      });
}

// ----- attention nodes -----

// Sparse masked softmax as a tape node; the mask is a constant of the
// backward pass, gradients flow through surviving scores only.
template <class S>
Var<S> smm_node(Var<S> q, Var<S> k, std::shared_ptr<const BinMat> I_prev, S sc,
                FlopLedger* ledger = nullptr, const std::string& label = "smm") {
  Tape<S>& t = same_tape(q, k);
  MatX<S> a = smm_softmax<S>(q.val().mat(), k.val().mat(), *I_prev, sc, ledger, label);
  Tensor<S> out = Tensor<S>::from_matrix(a);
  const auto idq = q.id, idk = k.id;
  return finish_self(
      t, std::move(out), any_wants(t, {idq, idk}),
      [idq, idk, I_prev, sc](Tape<S>& tp, const Tensor<S>& g, std::ptrdiff_t self) {
        const auto& av = tp.value(self);
        const auto& qv = tp.value(idq);
        const auto& kv = tp.value(idk);
        const Index n = g.rows(), m = g.cols();
        // Softmax backward restricted to the active set; gradients off the
        // support stay zero by construction.
        for (Index i = 0; i < n; ++i) {
          S dot = S(0);
          for (Index j = 0; j < m; ++j)
            if ((*I_prev)(i, j)) dot += g(i, j) * av(i, j);
          for (Index j = 0; j < m; ++j) {
            if (!(*I_prev)(i, j)) continue;
            const S ds = av(i, j) * (g(i, j) - dot);
            if (tp.wants_grad(idq))
              tp.grad_ref(idq).mat().row(i) += sc * ds * kv.mat().row(j);
            if (tp.wants_grad(idk))
              tp.grad_ref(idk).mat().row(j) += sc * ds * qv.mat().row(i);
          }
        }
      });
}

// Mask application and renormalization. The realized support (including
// guaranteed survivors) acts as a constant; gradients flow through the kept
// entries of both attention inputs. Returns the new state alongside the node.
template <class S>
struct PropagateNode {
  Var<S> a;
  std::shared_ptr<const BinMat> support;
};

template <class S>
PropagateNode<S> propagate_node(Var<S> a_oam, Var<S> a_prev, const BinMat& keep) {
  Tape<S>& t = same_tape(a_oam, a_prev);
  PropagateResult<S> r = mask_and_propagate<S>(a_oam.val().mat(), a_prev.val().mat(), keep);
  auto support = std::make_shared<const BinMat>(std::move(r.I));
  Tensor<S> out = Tensor<S>::from_matrix(r.A);
  const auto ido = a_oam.id, idp = a_prev.id;
  Var<S> node = finish(
      t, std::move(out), any_wants(t, {ido, idp}),
      [ido, idp, support](Tape<S>& tp, const Tensor<S>& g) {
        const auto& ao = tp.value(ido);
        const auto& ap = tp.value(idp);
        const Index n = g.rows(), m = g.cols();
        for (Index i = 0; i < n; ++i) {
          // P_ij = ao_ij * ap_ij on the support; A_ij = P_ij / r_i.
          S r_i = S(0), dot = S(0);
          for (Index j = 0; j < m; ++j)
            if ((*support)(i, j)) r_i += ao(i, j) * ap(i, j);
          for (Index j = 0; j < m; ++j)
            if ((*support)(i, j)) dot += g(i, j) * ao(i, j) * ap(i, j);
          const S inv_r = S(1) / r_i;
          const S corr = dot * inv_r * inv_r;
          for (Index j = 0; j < m; ++j) {
            if (!(*support)(i, j)) continue;
            const S dP = g(i, j) * inv_r - corr;
            if (tp.wants_grad(ido)) tp.grad_ref(ido)(i, j) += dP * ap(i, j);
            if (tp.wants_grad(idp)) tp.grad_ref(idp)(i, j) += dP * ao(i, j);
          }
        }
      });
  return {node, support};
}

template <class S>
Var<S> attend_node(Var<S> a, Var<S> v, std::shared_ptr<const BinMat> I,
                   FlopLedger* ledger = nullptr, const std::string& label = "attend") {
  Tape<S>& t = same_tape(a, v);
  MatX<S> o = attend<S>(a.val().mat(), v.val().mat(), *I, ledger, label);
  Tensor<S> out = Tensor<S>::from_matrix(o);
  const auto ida = a.id, idv = v.id;
  return finish(
      t, std::move(out), any_wants(t, {ida, idv}),
      [ida, idv, I](Tape<S>& tp, const Tensor<S>& g) {
        const auto& av = tp.value(ida);
        const auto& vv = tp.value(idv);
        const Index n = g.rows(), m = av.cols();
        for (Index i = 0; i < n; ++i)
          for (Index j = 0; j < m; ++j) {
            if (!(*I)(i, j)) continue;
            if (tp.wants_grad(ida))
              tp.grad_ref(ida)(i, j) += g.mat().row(i).dot(vv.mat().row(j));
            if (tp.wants_grad(idv))
              tp.grad_ref(idv).mat().row(j) += av(i, j) * g.mat().row(i);
          }
      });
}

// Dense attention inside non-overlapping token windows, multi-head. Tokens
// (N,C) with N divisible by block and C by heads. Per-window softmax
// matrices are cached for the backward pass.
template <class S>
Var<S> block_attention(Var<S> q, Var<S> k, Var<S> v, Index block, Index heads, S sc,
                       FlopLedger* ledger = nullptr, const std::string& label = "swin") {
  Tape<S>& t = same_tape(q, k);
  const auto& qv = q.val();
  const auto& kv = k.val();
  const auto& vv = v.val();
  if (qv.rank() != 2 || !qv.same_dims(kv) || !qv.same_dims(vv))
    throw DimensionError("block_attention: Q/K/V must share shape");
  const Index n = qv.rows(), c = qv.cols();
  if (block <= 0 || n % block != 0)
    throw DimensionError("block_attention: token count " + std::to_string(n) +
                         " not divisible by block " + std::to_string(block));
  if (heads <= 0 || c % heads != 0)
    throw DimensionError("block_attention: width " + std::to_string(c) +
                         " not divisible by heads " + std::to_string(heads));
  const Index nw = n / block, dh = c / heads;
  auto cache = std::make_shared<std::vector<MatX<S>>>();
  cache->reserve(static_cast<std::size_t>(nw * heads));
  Tensor<S> out({n, c});
  for (Index wdx = 0; wdx < nw; ++wdx)
    for (Index hd = 0; hd < heads; ++hd) {
      auto Qb = qv.mat().block(wdx * block, hd * dh, block, dh);
      auto Kb = kv.mat().block(wdx * block, hd * dh, block, dh);
      auto Vb = vv.mat().block(wdx * block, hd * dh, block, dh);
      MatX<S> s = sc * (Qb * Kb.transpose());
      for (Index i = 0; i < block; ++i) {
        const S mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
      }
      out.mat().block(wdx * block, hd * dh, block, dh) = s * Vb;
      cache->push_back(std::move(s));
    }
  if (ledger)
    ledger->add(label, 4ull * static_cast<std::uint64_t>(n) *
                           static_cast<std::uint64_t>(block) * static_cast<std::uint64_t>(c));
  const auto idq = q.id, idk = k.id, idv = v.id;
  return finish(
      t, std::move(out), any_wants(t, {idq, idk, idv}),
      [idq, idk, idv, cache, block, heads, dh, nw, sc](Tape<S>& tp, const Tensor<S>& g) {
        const auto& qval = tp.value(idq);
        const auto& kval = tp.value(idk);
        const auto& vval = tp.value(idv);
        for (Index wdx = 0; wdx < nw; ++wdx)
          for (Index hd = 0; hd < heads; ++hd) {
            const MatX<S>& A = (*cache)[static_cast<std::size_t>(wdx * heads + hd)];
            auto Qb = qval.mat().block(wdx * block, hd * dh, block, dh);
            auto Kb = kval.mat().block(wdx * block, hd * dh, block, dh);
            auto Vb = vval.mat().block(wdx * block, hd * dh, block, dh);
            MatX<S> go = g.mat().block(wdx * block, hd * dh, block, dh);
            if (tp.wants_grad(idv))
              tp.grad_ref(idv).mat().block(wdx * block, hd * dh, block, dh) +=
                  A.transpose() * go;
            MatX<S> dA = go * Vb.transpose();
            MatX<S> ds(block, block);
            for (Index i = 0; i < block; ++i) {
              const S dot = (dA.row(i).array() * A.row(i).array()).sum();
              ds.row(i) = A.row(i).array() * (dA.row(i).array() - dot);
            }
            if (tp.wants_grad(idq))
              tp.grad_ref(idq).mat().block(wdx * block, hd * dh, block, dh) +=
                  sc * (ds * Kb);
            if (tp.wants_grad(idk))
              tp.grad_ref(idk).mat().block(wdx * block, hd * dh, block, dh) +=
                  sc * (ds.transpose() * Qb);
          }
      });
}

}  // namespace ag

}  // namespace hdwsr
