#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hdwsr/autograd.hpp"
#include "hdwsr/rng.hpp"
#include "hdwsr/tensor.hpp"

namespace hdwsr {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

enum class InitKind { Normal, Zeros, Ones };

// One learnable tensor plus its Adam moments. Values and moments always
// exist so optimizer state serializes with the parameters.
template <class S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> m;
  Tensor<S> v;
};

// Ordered, name-addressed parameter store. Creation order is the canonical
// order for checkpoints and gradient vectors. Initialization depends only on
// the master seed and the parameter's own name, so a model built with any
// subset of switched-off branches still gives every shared parameter the
// same starting value.
template <class S>
class ParamSet {
 public:
  explicit ParamSet(std::uint64_t master_seed = 0) : master_seed_(master_seed) {}

  Index create(const std::string& name, std::vector<Index> dims, InitKind kind,
               Index fan_in = 0) {
    if (index_.count(name))
      throw ConfigError("ParamSet: duplicate parameter name " + name);
    Parameter<S> p;
    p.name = name;
    p.value = Tensor<S>(dims);
    p.m = Tensor<S>(dims);
    p.v = Tensor<S>(std::move(dims));
    switch (kind) {
      case InitKind::Zeros:
        break;
      case InitKind::Ones:
        p.value.array().setConstant(S(1));
        break;
      case InitKind::Normal: {
        if (fan_in <= 0) throw ConfigError("ParamSet: Normal init needs fan_in for " + name);
        Rng rng(master_seed_ ^ fnv1a(name));
        const S std_dev = S(1) / std::sqrt(static_cast<S>(fan_in));
        for (Index i = 0; i < p.value.size(); ++i)
          p.value[i] = static_cast<S>(rng.normal()) * std_dev;
        break;
      }
    }
    params_.push_back(std::move(p));
    const Index id = static_cast<Index>(params_.size()) - 1;
    index_[name] = id;
    return id;
  }

  Index count() const { return static_cast<Index>(params_.size()); }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  Parameter<S>& at(Index id) { return params_[static_cast<std::size_t>(id)]; }
  const Parameter<S>& at(Index id) const { return params_[static_cast<std::size_t>(id)]; }

  Index id_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("ParamSet: unknown parameter " + name);
    return it->second;
  }

  std::uint64_t master_seed() const { return master_seed_; }

 private:
  std::uint64_t master_seed_;
  std::vector<Parameter<S>> params_;
  std::map<std::string, Index> index_;
};

// Per-step view of the parameters as tape leaves.
template <class S>
class Binding {
 public:
  Binding(const ParamSet<S>& ps, Tape<S>& t) : ps_(&ps), tape_(&t) {
    vars_.reserve(static_cast<std::size_t>(ps.count()));
    for (Index i = 0; i < ps.count(); ++i) vars_.push_back(t.input(ps.at(i).value));
  }

  Var<S> operator[](Index id) const { return vars_[static_cast<std::size_t>(id)]; }
  Tape<S>& tape() const { return *tape_; }
  const ParamSet<S>& params() const { return *ps_; }

  // Gradients in parameter order; zero where the loss never touched a leaf.
  std::vector<Tensor<S>> collect_grads() const {
    std::vector<Tensor<S>> g;
    g.reserve(vars_.size());
    for (std::size_t i = 0; i < vars_.size(); ++i)
      g.push_back(tape_->has_grad(vars_[i]) ? tape_->grad(vars_[i])
                                            : Tensor<S>(ps_->at(static_cast<Index>(i)).value.dims()));
    return g;
  }

 private:
  const ParamSet<S>* ps_;
  Tape<S>* tape_;
  std::vector<Var<S>> vars_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. The step counter lives here; moments live with
// the parameters so both travel through checkpoints together.
template <class S>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamSet<S>& ps, const std::vector<Tensor<S>>& grads) {
    if (static_cast<Index>(grads.size()) != ps.count())
      throw DimensionError("Adam::step: gradient count mismatch");
    ++t_;
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S c1 = S(1) - static_cast<S>(std::pow(cfg_.beta1, t_));
    const S c2 = S(1) - static_cast<S>(std::pow(cfg_.beta2, t_));
    const S lr = static_cast<S>(cfg_.lr), eps = static_cast<S>(cfg_.eps);
    for (Index i = 0; i < ps.count(); ++i) {
      Parameter<S>& p = ps.at(i);
      const auto& g = grads[static_cast<std::size_t>(i)];
      require_same_dims(p.value, g, "Adam::step");
      p.m.array() = b1 * p.m.array() + (S(1) - b1) * g.array();
      p.v.array() = b2 * p.v.array() + (S(1) - b2) * g.array().square();
      p.value.array() -=
          lr * (p.m.array() / c1) / ((p.v.array() / c2).sqrt() + eps);
    }
  }

  std::int64_t steps_taken() const { return t_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }
  const AdamConfig& config() const { return cfg_; }

  // Schedules live with callers; moments survive the change.
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

// ----- layers -----
// Layers are thin: they own parameter ids and wire tape ops. Construction
// registers parameters; forward reads them through a Binding.

template <class S>
struct Linear {
  Index w = -1, b = -1;
  static Linear create(ParamSet<S>& ps, const std::string& name, Index in, Index out) {
    Linear l;
    l.w = ps.create(name + ".w", {in, out}, InitKind::Normal, in);
    l.b = ps.create(name + ".b", {out}, InitKind::Zeros);
    return l;
  }
  Var<S> fwd(const Binding<S>& bd, Var<S> x, FlopLedger* ledger = nullptr,
             const std::string& label = "linear") const {
    return ag::add_rowvec(ag::matmul(x, bd[w], ledger, label), bd[b]);
  }
};

template <class S>
struct Conv2d {
  Index w = -1, b = -1;
  Index k = 3, stride = 1, pad = 1;
  static Conv2d create(ParamSet<S>& ps, const std::string& name, Index cin, Index cout,
                       Index k, Index stride, Index pad) {
    Conv2d c;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    c.w = ps.create(name + ".w", {cout, cin * k * k}, InitKind::Normal, cin * k * k);
    c.b = ps.create(name + ".b", {cout}, InitKind::Zeros);
    return c;
  }
  Var<S> fwd(const Binding<S>& bd, Var<S> x, FlopLedger* ledger = nullptr,
             const std::string& label = "conv") const {
    return ag::conv2d(x, bd[w], bd[b], k, k, stride, pad, ledger, label);
  }
};

template <class S>
struct UpConv2x {
  Index w = -1, b = -1;
  static UpConv2x create(ParamSet<S>& ps, const std::string& name, Index cin, Index cout) {
    UpConv2x u;
    u.w = ps.create(name + ".w", {4 * cout, cin}, InitKind::Normal, cin);
    u.b = ps.create(name + ".b", {cout}, InitKind::Zeros);
    return u;
  }
  Var<S> fwd(const Binding<S>& bd, Var<S> x, FlopLedger* ledger = nullptr,
             const std::string& label = "upconv") const {
    return ag::upconv2x(x, bd[w], bd[b], ledger, label);
  }
};

template <class S>
struct LayerNormP {
  Index g = -1, b = -1;
  static LayerNormP create(ParamSet<S>& ps, const std::string& name, Index c) {
    LayerNormP n;
    n.g = ps.create(name + ".g", {c}, InitKind::Ones);
    n.b = ps.create(name + ".b", {c}, InitKind::Zeros);
    return n;
  }
  Var<S> fwd(const Binding<S>& bd, Var<S> x) const {
    return ag::layer_norm(x, bd[g], bd[b]);
  }
};

// Two-layer position-wise net with GELU, hidden width = 2x.
template <class S>
struct Ffn {
  Linear<S> a, b;
  static Ffn create(ParamSet<S>& ps, const std::string& name, Index c) {
    Ffn f;
    f.a = Linear<S>::create(ps, name + ".a", c, 2 * c);
    f.b = Linear<S>::create(ps, name + ".b", 2 * c, c);
    return f;
  }
  Var<S> fwd(const Binding<S>& bd, Var<S> x, FlopLedger* ledger = nullptr) const {
    return b.fwd(bd, ag::gelu(a.fwd(bd, x, ledger)), ledger);
  }
};

// Token order that makes each win x win tile contiguous, optionally after a
// cyclic shift of the underlying map. perm[q] = source row for output row q.
inline std::shared_ptr<const std::vector<Index>> window_permutation(Index h, Index w,
                                                                    Index win, Index shift) {
  if (win <= 0 || h % win != 0 || w % win != 0)
    throw DimensionError("window_permutation: " + std::to_string(h) + "x" +
                         std::to_string(w) + " not tiled by window " + std::to_string(win));
  auto perm = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(h * w));
  Index q = 0;
  for (Index wi = 0; wi < h / win; ++wi)
    for (Index wj = 0; wj < w / win; ++wj)
      for (Index ii = 0; ii < win; ++ii)
        for (Index jj = 0; jj < win; ++jj) {
          const Index si = (wi * win + ii + shift) % h;
          const Index sj = (wj * win + jj + shift) % w;
          (*perm)[static_cast<std::size_t>(q++)] = si * w + sj;
        }
  return perm;
}

inline std::shared_ptr<const std::vector<Index>> invert_permutation(
    const std::vector<Index>& perm) {
  auto inv = std::make_shared<std::vector<Index>>(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    (*inv)[static_cast<std::size_t>(perm[i])] = static_cast<Index>(i);
  return inv;
}

// Window self-attention block, pre-norm, with residuals and an FFN. Odd
// blocks shift the window grid by half a window (cyclic, so seam tokens wrap;
// at patch scale the wrap-around neighborhood is as informative as padding).
template <class S>
struct SwinBlock {
  LayerNormP<S> n1, n2;
  Linear<S> wq, wk, wv, wo;
  Ffn<S> ffn;
  Index window = 4, heads = 1;
  bool shifted = false;

  static SwinBlock create(ParamSet<S>& ps, const std::string& name, Index c, Index window,
                          Index heads, bool shifted) {
    SwinBlock s;
    s.window = window;
    s.heads = heads;
    s.shifted = shifted;
    s.n1 = LayerNormP<S>::create(ps, name + ".n1", c);
    s.n2 = LayerNormP<S>::create(ps, name + ".n2", c);
    s.wq = Linear<S>::create(ps, name + ".q", c, c);
    s.wk = Linear<S>::create(ps, name + ".k", c, c);
    s.wv = Linear<S>::create(ps, name + ".v", c, c);
    s.wo = Linear<S>::create(ps, name + ".o", c, c);
    s.ffn = Ffn<S>::create(ps, name + ".ffn", c);
    return s;
  }

  // x: tokens (H*W, C) in row-major map order.
  Var<S> fwd(const Binding<S>& bd, Var<S> x, Index h, Index w, FlopLedger* ledger = nullptr,
             const std::string& label = "swin") const {
    const Index c = x.val().cols();
    const Index dh = c / heads;
    if (dh * heads != c)
      throw DimensionError("SwinBlock: width " + std::to_string(c) +
                           " not divisible by heads " + std::to_string(heads));
    auto perm = window_permutation(h, w, window, shifted ? window / 2 : 0);
    auto inv = invert_permutation(*perm);
    Var<S> hN = n1.fwd(bd, x);
    Var<S> q = ag::permute_rows(wq.fwd(bd, hN, ledger, label), perm);
    Var<S> k = ag::permute_rows(wk.fwd(bd, hN, ledger, label), perm);
    Var<S> v = ag::permute_rows(wv.fwd(bd, hN, ledger, label), perm);
    const S sc = S(1) / std::sqrt(static_cast<S>(dh));
    Var<S> att = ag::block_attention(q, k, v, window * window, heads, sc, ledger, label);
    Var<S> back = ag::permute_rows(att, inv);
    Var<S> x1 = ag::add(x, wo.fwd(bd, back, ledger, label));
    return ag::add(x1, ffn.fwd(bd, n2.fwd(bd, x1), ledger));
  }
};

// Records the keep masks realized during one forward pass so a replay can
// hold the discrete choices fixed while the smooth path is probed.
struct MaskTrace {
  std::vector<BinMat> masks;
  bool replaying = false;
  std::size_t cursor = 0;

  void start_replay() {
    replaying = true;
    cursor = 0;
  }
};

// Attention state as tape values: the running map is differentiable along
// its surviving entries, the support is a constant of the pass.
template <class S>
struct StateVar {
  Var<S> A;
  std::shared_ptr<const BinMat> I;
  int layer = 0;
};

template <class S>
StateVar<S> initial_state_var(Tape<S>& t, Index n, Index m) {
  AttentionState<S> s = initial_attention_state<S>(n, m);
  auto I = std::make_shared<const BinMat>(std::move(s.I));
  return StateVar<S>{t.constant(Tensor<S>::from_matrix(s.A)), I, 0};
}

// Cross-attention block with dynamic sparsification: queries from the
// decoder tokens, keys/values from the guidance tokens, support inherited
// and narrowed through the propagated state. Single attention map, so the
// index propagation contract stays exact.
template <class S>
struct DfaBlock {
  LayerNormP<S> nx, ny, n2;
  Linear<S> wq, wk, wv, wo;
  Ffn<S> ffn;

  static DfaBlock create(ParamSet<S>& ps, const std::string& name, Index c) {
    DfaBlock d;
    d.nx = LayerNormP<S>::create(ps, name + ".nx", c);
    d.ny = LayerNormP<S>::create(ps, name + ".ny", c);
    d.n2 = LayerNormP<S>::create(ps, name + ".n2", c);
    d.wq = Linear<S>::create(ps, name + ".q", c, c);
    d.wk = Linear<S>::create(ps, name + ".k", c, c);
    d.wv = Linear<S>::create(ps, name + ".v", c, c);
    d.wo = Linear<S>::create(ps, name + ".o", c, c);
    d.ffn = Ffn<S>::create(ps, name + ".ffn", c);
    return d;
  }

  struct Out {
    Var<S> x;
    StateVar<S> state;
  };

  Out fwd(const Binding<S>& bd, Var<S> x, Var<S> y, const StateVar<S>& state, MaskMode mode,
          Index topk, MaskTrace* trace = nullptr, FlopLedger* ledger = nullptr,
          const std::string& label = "dfa") const {
    const Index c = x.val().cols();
    Var<S> q = wq.fwd(bd, nx.fwd(bd, x), ledger, label);
    Var<S> k = wk.fwd(bd, ny.fwd(bd, y), ledger, label);
    Var<S> v = wv.fwd(bd, ny.fwd(bd, y), ledger, label);
    const S sc = S(1) / std::sqrt(static_cast<S>(c));
    Var<S> a_oam = ag::smm_node(q, k, state.I, sc, ledger, label);

    BinMat keep;
    if (trace && trace->replaying) {
      if (trace->cursor >= trace->masks.size())
        throw ContractError("DfaBlock: mask trace exhausted during replay");
      keep = trace->masks[trace->cursor++];
    } else {
      const MatX<S> a = a_oam.val().mat();
      switch (mode) {
        case MaskMode::Dtb: {
          ThresholdResult<S> thr = dtb_threshold(a, *state.I);
          if (thr.degenerate) {
            keep = BinMat::Constant(a.rows(), a.cols(), 1);
          } else {
            keep.resize(a.rows(), a.cols());
            for (Index i = 0; i < a.rows(); ++i)
              for (Index j = 0; j < a.cols(); ++j)
                keep(i, j) = a(i, j) > thr.k_star ? 1 : 0;
          }
          break;
        }
        case MaskMode::TopK:
          keep = topk_mask(a, topk);
          break;
        case MaskMode::Dense:
          keep = BinMat::Constant(a.rows(), a.cols(), 1);
          break;
      }
      if (trace) trace->masks.push_back(keep);
    }

    auto prop = ag::propagate_node(a_oam, state.A, keep);
    Var<S> att = ag::attend_node(prop.a, v, prop.support, ledger, label);
    Var<S> x1 = ag::add(x, wo.fwd(bd, att, ledger, label));
    Var<S> x2 = ag::add(x1, ffn.fwd(bd, n2.fwd(bd, x1), ledger));
    return Out{x2, StateVar<S>{prop.a, prop.support, state.layer + 1}};
  }
};

// Sinusoidal timestep features, interleaved (sin, cos) so step 0 maps to the
// alternating (0, 1, 0, 1, ...) pattern.
template <class S>
Tensor<S> timestep_features(int t, Index dim) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("timestep_features: dim must be even");
  Tensor<S> out({1, dim});
  for (Index i = 0; i < dim / 2; ++i) {
    const double freq =
        std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    out(0, 2 * i) = static_cast<S>(std::sin(t * freq));
    out(0, 2 * i + 1) = static_cast<S>(std::cos(t * freq));
  }
  return out;
}

// Per-stage conditioning: project the timestep features to the stage width
// and add the resulting bias row to every token.
template <class S>
struct TimeMlp {
  Linear<S> a, b;
  static TimeMlp create(ParamSet<S>& ps, const std::string& name, Index t_dim, Index c) {
    TimeMlp m;
    m.a = Linear<S>::create(ps, name + ".a", t_dim, c);
    m.b = Linear<S>::create(ps, name + ".b", c, c);
    return m;
  }
  Var<S> fwd(const Binding<S>& bd, Var<S> tokens, Var<S> t_feat,
             FlopLedger* ledger = nullptr) const {
    Var<S> row = b.fwd(bd, ag::silu(a.fwd(bd, t_feat, ledger)), ledger);  // (1,C)
    Var<S> bias = ag::reshape(row, {row.val().cols()});
    return ag::add_rowvec(tokens, bias);
  }
};

}  // namespace hdwsr
