#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "hdwsr/diffusion.hpp"
#include "hdwsr/nn.hpp"

namespace hdwsr {

struct ModelConfig {
  Index base_channels = 16;
  Index levels = 3;
  std::vector<Index> dfa_repeats = {2, 4, 4};
  std::vector<Index> decoder_repeats = {4, 6, 6};
  Index swin_window = 8;
  Index heads = 1;
  Index pfa_repeats = 2;
  Index t_embed_dim = 32;
  double beta_weight = 0.2;
  int steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  // Feature width at level j (1-based): C, 2C, 4C, ...
  Index width(Index j) const { return base_channels << (j - 1); }

  void validate() const {
    if (base_channels <= 0) throw ConfigError("ModelConfig: base_channels must be positive");
    if (levels < 1) throw ConfigError("ModelConfig: levels must be at least 1");
    if (static_cast<Index>(dfa_repeats.size()) != levels ||
        static_cast<Index>(decoder_repeats.size()) != levels)
      throw ConfigError("ModelConfig: repeat lists must have one entry per level");
    for (Index r : dfa_repeats)
      if (r < 1) throw ConfigError("ModelConfig: dfa_repeats entries must be at least 1");
    for (Index r : decoder_repeats)
      if (r < 1) throw ConfigError("ModelConfig: decoder_repeats entries must be at least 1");
    if (swin_window <= 0) throw ConfigError("ModelConfig: swin_window must be positive");
    if (heads <= 0) throw ConfigError("ModelConfig: heads must be positive");
    if (pfa_repeats < 1) throw ConfigError("ModelConfig: pfa_repeats must be at least 1");
    if (t_embed_dim <= 0 || t_embed_dim % 2 != 0)
      throw ConfigError("ModelConfig: t_embed_dim must be even and positive");
    if (!(beta_weight > 0.0 && beta_weight < 1.0))
      throw ConfigError("ModelConfig: beta_weight must lie strictly inside (0,1)");
    if (steps < 1) throw ConfigError("ModelConfig: steps must be at least 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

enum class AttnAblation { Dtb, TopK, Dense, SelfOnly };
enum class SamplingAblation { Dwt, StridedConv };
enum class GuidanceAblation { HeNet, HaSelf, None };

struct AblationConfig {
  AttnAblation attention = AttnAblation::Dtb;
  Index topk_k = 0;  // 0 resolves to half the key count
  SamplingAblation sampling = SamplingAblation::Dwt;
  GuidanceAblation guidance = GuidanceAblation::HeNet;

  bool operator==(const AblationConfig&) const = default;
};

// High-frequency subband triplets per level, widths C, 2C, 4C at halved
// resolutions. Values (not tape nodes) so a sampling run can compute them
// once and feed every reverse step.
template <class S>
struct GuidancePyramid {
  std::vector<Tensor<S>> stacked;  // level j: (3*width(j), H/2^j, W/2^j), order lh,hl,hh
};

// Guidance extractor: wavelet encoder over channel-adjusted features, a
// position-wise linear bottleneck, and the mirrored wavelet decoder whose
// reconstruction is trained to match the input.
template <class S>
struct HeNet {
  std::vector<Conv2d<S>> adj;    // level j: width(j-1) -> width(j)
  Linear<S> fc;                  // bottleneck over channels, per position
  std::vector<Conv2d<S>> post;   // level j>1: width(j) -> width(j-1)
  Conv2d<S> exit;                // width(1) -> 3

  static HeNet create(ParamSet<S>& ps, const ModelConfig& cfg) {
    HeNet h;
    Index prev = 3;
    for (Index j = 1; j <= cfg.levels; ++j) {
      h.adj.push_back(Conv2d<S>::create(ps, "he.adj" + std::to_string(j), prev, cfg.width(j),
                                        3, 1, 1));
      prev = cfg.width(j);
    }
    h.fc = Linear<S>::create(ps, "he.fc", cfg.width(cfg.levels), cfg.width(cfg.levels));
    for (Index j = cfg.levels; j >= 2; --j)
      h.post.push_back(Conv2d<S>::create(ps, "he.post" + std::to_string(j), cfg.width(j),
                                         cfg.width(j - 1), 3, 1, 1));
    h.exit = Conv2d<S>::create(ps, "he.exit", cfg.width(1), 3, 3, 1, 1);
    return h;
  }

  struct Out {
    Var<S> recon;
    std::vector<Var<S>> guidance;  // stacked (3*width(j), h_j, w_j)
  };

  Out fwd(const Binding<S>& bd, Var<S> presr, const ModelConfig& cfg,
          FlopLedger* ledger = nullptr) const {
    const Index h = presr.val().height(), w = presr.val().width();
    const Index div = Index(1) << cfg.levels;
    if (h % div != 0 || w % div != 0)
      throw DimensionError("he_net_forward: " + std::to_string(h) + "x" + std::to_string(w) +
                           " not divisible by 2^" + std::to_string(cfg.levels));
    Out out;
    Var<S> x = presr;
    for (Index j = 1; j <= cfg.levels; ++j) {
      x = adj[static_cast<std::size_t>(j - 1)].fwd(bd, x, ledger, "he.adj");
      Var<S> bands = ag::dwt2(x);
      const Index c = cfg.width(j);
      out.guidance.push_back(ag::slice_channels(bands, c, 3 * c));
      x = ag::slice_channels(bands, 0, c);
    }
    Var<S> tok = ag::tokens_from_map(x);
    tok = fc.fwd(bd, tok, ledger, "he.fc");
    x = ag::map_from_tokens(tok, cfg.width(cfg.levels), h / div, w / div);
    for (Index j = cfg.levels; j >= 1; --j) {
      x = ag::idwt2(
          ag::concat_channels<S>({x, out.guidance[static_cast<std::size_t>(j - 1)]}));
      if (j > 1)
        x = post[static_cast<std::size_t>(cfg.levels - j)].fwd(bd, x, ledger, "he.post");
    }
    out.recon = exit.fwd(bd, x, ledger, "he.exit");
    return out;
  }
};

// Noise predictor: wavelet (or strided-conv) encoder whose low-frequency
// tokens are enhanced by window attention, focused on the guidance through
// DFA blocks, squeezed through a self-attention bottleneck, and decoded with
// window attention plus per-stage timestep conditioning.
template <class S>
struct HaNet {
  std::vector<Conv2d<S>> adj;            // pre-DWT channel adjusters
  std::vector<Conv2d<S>> down;           // strided alternative: adjust + halve
  std::vector<SwinBlock<S>> enc_swin;    // 2 per level
  std::vector<std::vector<DfaBlock<S>>> enc_dfa;
  std::vector<DfaBlock<S>> pfa;          // bottleneck, self-attention
  std::vector<std::vector<SwinBlock<S>>> dec_swin;
  std::vector<LayerNormP<S>> dec_tnorm;
  std::vector<TimeMlp<S>> dec_tmlp;
  std::vector<Ffn<S>> dec_tffn;
  std::vector<Conv2d<S>> post;           // width(j) -> width(j-1) after upsampling, j>1
  std::vector<UpConv2x<S>> up;           // strided alternative upsampler
  Conv2d<S> exit;

  // Every branch's parameters exist regardless of the ablation switches, so
  // a given seed yields identical initial weights on every axis setting.
  static HaNet create(ParamSet<S>& ps, const ModelConfig& cfg) {
    HaNet n;
    Index prev = 3;
    for (Index j = 1; j <= cfg.levels; ++j) {
      const std::string lv = std::to_string(j);
      const Index c = cfg.width(j);
      n.adj.push_back(Conv2d<S>::create(ps, "ha.adj" + lv, prev, c, 3, 1, 1));
      n.down.push_back(Conv2d<S>::create(ps, "ha.down" + lv, prev, c, 3, 2, 1));
      n.enc_swin.push_back(SwinBlock<S>::create(ps, "ha.enc" + lv + ".swin0", c,
                                                cfg.swin_window, cfg.heads, false));
      n.enc_swin.push_back(SwinBlock<S>::create(ps, "ha.enc" + lv + ".swin1", c,
                                                cfg.swin_window, cfg.heads, true));
      std::vector<DfaBlock<S>> dfas;
      for (Index r = 0; r < cfg.dfa_repeats[static_cast<std::size_t>(j - 1)]; ++r)
        dfas.push_back(
            DfaBlock<S>::create(ps, "ha.enc" + lv + ".dfa" + std::to_string(r), c));
      n.enc_dfa.push_back(std::move(dfas));
      prev = c;
    }
    for (Index r = 0; r < cfg.pfa_repeats; ++r)
      n.pfa.push_back(
          DfaBlock<S>::create(ps, "ha.pfa" + std::to_string(r), cfg.width(cfg.levels)));
    for (Index j = cfg.levels; j >= 1; --j) {
      const std::string lv = std::to_string(j);
      const Index c = cfg.width(j);
      std::vector<SwinBlock<S>> swins;
      for (Index r = 0; r < cfg.decoder_repeats[static_cast<std::size_t>(j - 1)]; ++r)
        swins.push_back(SwinBlock<S>::create(ps, "ha.dec" + lv + ".swin" + std::to_string(r),
                                             c, cfg.swin_window, cfg.heads, r % 2 == 1));
      n.dec_swin.push_back(std::move(swins));
      n.dec_tnorm.push_back(LayerNormP<S>::create(ps, "ha.dec" + lv + ".tn", c));
      n.dec_tmlp.push_back(TimeMlp<S>::create(ps, "ha.dec" + lv + ".tmlp", cfg.t_embed_dim, c));
      n.dec_tffn.push_back(Ffn<S>::create(ps, "ha.dec" + lv + ".tffn", c));
      if (j > 1)
        n.post.push_back(
            Conv2d<S>::create(ps, "ha.post" + lv, c, cfg.width(j - 1), 3, 1, 1));
      n.up.push_back(UpConv2x<S>::create(ps, "ha.up" + lv, c, c));
    }
    n.exit = Conv2d<S>::create(ps, "ha.exit", cfg.width(1), 3, 3, 1, 1);
    return n;
  }

  Var<S> fwd(const Binding<S>& bd, Var<S> x_t, int t, const std::vector<Var<S>>& guidance,
             const ModelConfig& cfg, const AblationConfig& ab, MaskTrace* trace = nullptr,
             FlopLedger* ledger = nullptr) const {
    const Index H = x_t.val().height(), W = x_t.val().width();
    const Index div = Index(1) << cfg.levels;
    if (H % div != 0 || W % div != 0)
      throw DimensionError("ha_net_forward: " + std::to_string(H) + "x" + std::to_string(W) +
                           " not divisible by 2^" + std::to_string(cfg.levels));
    const bool use_dwt = ab.sampling == SamplingAblation::Dwt;
    if (ab.guidance == GuidanceAblation::HeNet &&
        static_cast<Index>(guidance.size()) != cfg.levels)
      throw DimensionError("ha_net_forward: guidance has " +
                           std::to_string(guidance.size()) + " levels, expected " +
                           std::to_string(cfg.levels));

    Tape<S>& tape = bd.tape();
    Var<S> t_feat = tape.constant(timestep_features<S>(t, cfg.t_embed_dim));
    const MaskMode mode = ab.attention == AttnAblation::TopK    ? MaskMode::TopK
                          : ab.attention == AttnAblation::Dense ? MaskMode::Dense
                                                                : MaskMode::Dtb;

    Var<S> x = x_t;
    std::vector<Var<S>> hf(static_cast<std::size_t>(cfg.levels), Var<S>{});
    for (Index j = 1; j <= cfg.levels; ++j) {
      const Index c = cfg.width(j);
      const Index hj = H >> j, wj = W >> j;
      if (use_dwt) {
        x = adj[static_cast<std::size_t>(j - 1)].fwd(bd, x, ledger, "ha.adj");
        Var<S> bands = ag::dwt2(x);
        hf[static_cast<std::size_t>(j - 1)] = ag::slice_channels(bands, c, 3 * c);
        x = ag::slice_channels(bands, 0, c);
      } else {
        x = down[static_cast<std::size_t>(j - 1)].fwd(bd, x, ledger, "ha.down");
      }
      Var<S> tok = ag::tokens_from_map(x);
      tok = enc_swin[static_cast<std::size_t>(2 * (j - 1))].fwd(bd, tok, hj, wj, ledger,
                                                                "ha.enc.swin");
      tok = enc_swin[static_cast<std::size_t>(2 * (j - 1) + 1)].fwd(bd, tok, hj, wj, ledger,
                                                                    "ha.enc.swin");
      if (ab.guidance != GuidanceAblation::None) {
        Var<S> y;
        if (ab.attention == AttnAblation::SelfOnly) {
          y = tok;
        } else if (ab.guidance == GuidanceAblation::HaSelf && use_dwt) {
          y = subband_tokens(hf[static_cast<std::size_t>(j - 1)], c);
        } else if (ab.guidance == GuidanceAblation::HaSelf) {
          y = tok;  // no retained subbands without the wavelet path
        } else {
          y = subband_tokens(guidance[static_cast<std::size_t>(j - 1)], c);
        }
        const Index topk = resolve_topk(ab, y.val().rows());
        StateVar<S> state = initial_state_var(tape, tok.val().rows(), y.val().rows());
        for (const DfaBlock<S>& blk : enc_dfa[static_cast<std::size_t>(j - 1)]) {
          auto o = blk.fwd(bd, tok, y, state, mode, topk, trace, ledger, "ha.enc.dfa");
          tok = o.x;
          state = o.state;
        }
      }
      x = ag::map_from_tokens(tok, c, hj, wj);
    }

    {
      const Index c = cfg.width(cfg.levels);
      Var<S> tok = ag::tokens_from_map(x);
      const Index topk = resolve_topk(ab, tok.val().rows());
      StateVar<S> state = initial_state_var(tape, tok.val().rows(), tok.val().rows());
      for (const DfaBlock<S>& blk : pfa) {
        auto o = blk.fwd(bd, tok, tok, state, mode, topk, trace, ledger, "ha.pfa");
        tok = o.x;
        state = o.state;
      }
      x = ag::map_from_tokens(tok, c, H >> cfg.levels, W >> cfg.levels);
    }

    for (Index j = cfg.levels; j >= 1; --j) {
      const Index c = cfg.width(j);
      const Index hj = H >> (j - 1), wj = W >> (j - 1);
      const std::size_t di = static_cast<std::size_t>(cfg.levels - j);
      if (use_dwt) {
        x = ag::idwt2(ag::concat_channels<S>({x, hf[static_cast<std::size_t>(j - 1)]}));
      } else {
        x = up[di].fwd(bd, x, ledger, "ha.up");
      }
      Var<S> tok = ag::tokens_from_map(x);
      for (const SwinBlock<S>& blk : dec_swin[di])
        tok = blk.fwd(bd, tok, hj, wj, ledger, "ha.dec.swin");
      Var<S> cond = dec_tmlp[di].fwd(bd, dec_tnorm[di].fwd(bd, tok), t_feat, ledger);
      tok = ag::add(tok, dec_tffn[di].fwd(bd, cond, ledger));
      x = ag::map_from_tokens(tok, c, hj, wj);
      if (j > 1) x = post[di].fwd(bd, x, ledger, "ha.post");
    }
    return exit.fwd(bd, x, ledger, "ha.exit");
  }

 private:
  // (3c, h, w) triplet to a (3*h*w, c) token matrix: each subband flattens
  // separately, keys ordered lh rows, hl rows, hh rows.
  static Var<S> subband_tokens(Var<S> stacked, Index c) {
    std::vector<Var<S>> parts;
    for (Index s = 0; s < 3; ++s)
      parts.push_back(ag::tokens_from_map(ag::slice_channels(stacked, s * c, c)));
    return ag::concat_rows(parts);
  }

  static Index resolve_topk(const AblationConfig& ab, Index m) {
    if (ab.attention != AttnAblation::TopK) return 0;
    Index k = ab.topk_k > 0 ? ab.topk_k : m / 2;
    if (k < 1) k = 1;
    if (k > m) k = m;
    return k;
  }
};

// Mean square plus root-mean-square-and-mean-L1 pairing used by the joint
// objective. Value-level versions serve tests and logging.
template <class S>
S loss_he_value(const Tensor<S>& target, const Tensor<S>& recon) {
  require_same_dims(target, recon, "loss_he");
  const auto d = (recon.array() - target.array()).eval();
  return std::sqrt(d.square().mean()) + d.abs().mean();
}

template <class S>
Var<S> loss_he_node(Var<S> recon, Var<S> target) {
  Var<S> d = ag::sub(recon, target);
  return ag::add(ag::sqrt_scalar(ag::mean_all(ag::mul(d, d))),
                 ag::mean_all(ag::abs_v(d)));
}

template <class S>
Var<S> loss_ha_node(Var<S> eps_pred, Var<S> eps) {
  Var<S> d = ag::sub(eps_pred, eps);
  return ag::mean_all(ag::mul(d, d));
}

// Both networks plus the parameter store; forward wiring shared by training
// steps, gradient checks, and sampling.
template <class S>
class HdwModel {
 public:
  HdwModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), params_(seed) {
    cfg_.validate();
    he_ = HeNet<S>::create(params_, cfg_);
    ha_ = HaNet<S>::create(params_, cfg_);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamSet<S>& params() { return params_; }
  const ParamSet<S>& params() const { return params_; }

  typename HeNet<S>::Out he_forward(const Binding<S>& bd, Var<S> presr,
                                    FlopLedger* ledger = nullptr) const {
    return he_.fwd(bd, presr, cfg_, ledger);
  }

  Var<S> ha_forward(const Binding<S>& bd, Var<S> x_t, int t,
                    const std::vector<Var<S>>& guidance, const AblationConfig& ab,
                    MaskTrace* trace = nullptr, FlopLedger* ledger = nullptr) const {
    return ha_.fwd(bd, x_t, t, guidance, cfg_, ab, trace, ledger);
  }

  struct Losses {
    Var<S> total, he, ha;
  };

  // Joint objective on one (x0, t, eps) tuple: the guidance flows from
  // HE-Net into HA-Net on the same tape, so both nets train together.
  Losses training_losses(const Binding<S>& bd, const Tensor<S>& presr, const Tensor<S>& x0,
                         int t, const Tensor<S>& eps, const NoiseSchedule<S>& sched,
                         const AblationConfig& ab, MaskTrace* trace = nullptr,
                         FlopLedger* ledger = nullptr) const {
    Tape<S>& tape = bd.tape();
    Var<S> presr_c = tape.constant(presr);
    auto he_out = he_forward(bd, presr_c, ledger);
    Var<S> l_he = loss_he_node(he_out.recon, presr_c);
    Tensor<S> x_t = q_sample(x0, t, eps, sched);
    Var<S> eps_pred =
        ha_forward(bd, tape.constant(std::move(x_t)), t, he_out.guidance, ab, trace, ledger);
    Var<S> l_ha = loss_ha_node(eps_pred, tape.constant(eps));
    const S b = static_cast<S>(cfg_.beta_weight);
    Var<S> total = ag::add(ag::scale(l_he, b), ag::scale(l_ha, S(1) - b));
    return Losses{total, l_he, l_ha};
  }

  // Guidance computed once per trajectory; every reverse step reuses it.
  GuidancePyramid<S> guidance_for(const Tensor<S>& presr, FlopLedger* ledger = nullptr) const {
    Tape<S> tape(false);
    Binding<S> bd(params_, tape);
    auto out = he_forward(bd, tape.constant(presr), ledger);
    GuidancePyramid<S> g;
    for (const Var<S>& v : out.guidance) g.stacked.push_back(v.val());
    return g;
  }

  // One reverse step's noise prediction on a throwaway gradient-free tape.
  Tensor<S> predict_eps(const Tensor<S>& x_t, int t, const GuidancePyramid<S>& guidance,
                        const AblationConfig& ab, FlopLedger* ledger = nullptr) const {
    Tape<S> tape(false);
    Binding<S> bd(params_, tape);
    std::vector<Var<S>> g;
    for (const Tensor<S>& lvl : guidance.stacked) g.push_back(tape.constant(lvl));
    return ha_forward(bd, tape.constant(x_t), t, g, ab, nullptr, ledger).val();
  }

  // Constructed-layer introspection; must echo the config exactly.
  std::vector<Index> dfa_block_counts() const {
    std::vector<Index> c;
    for (const auto& lvl : ha_.enc_dfa) c.push_back(static_cast<Index>(lvl.size()));
    return c;
  }
  std::vector<Index> decoder_swin_counts() const {
    std::vector<Index> c(ha_.dec_swin.size());
    // dec_swin is stored coarsest-first; report per level 1..L.
    for (std::size_t i = 0; i < ha_.dec_swin.size(); ++i)
      c[ha_.dec_swin.size() - 1 - i] = static_cast<Index>(ha_.dec_swin[i].size());
    return c;
  }
  Index param_tensor_count() const { return params_.count(); }
  Index param_scalar_count() const { return params_.scalar_count(); }

 private:
  ModelConfig cfg_;
  ParamSet<S> params_;
  HeNet<S> he_;
  HaNet<S> ha_;
};

// ----- checkpointing -----
// Single binary archive: magic, format version, config echo (opaque JSON
// written by the harness), iteration counter, optimizer step counter, RNG
// state, then per parameter name/dims/value/moments as f64.

namespace ckpt_detail {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
inline void write_str(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_str(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > (1ull << 32)) throw IngestError("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}
template <class S>
void write_tensor(std::ostream& os, const Tensor<S>& t) {
  write_u64(os, static_cast<std::uint64_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) write_u64(os, static_cast<std::uint64_t>(t.dim(i)));
  for (Index i = 0; i < t.size(); ++i) {
    const double v = static_cast<double>(t[i]);
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
}
template <class S>
Tensor<S> read_tensor(std::istream& is) {
  const std::uint64_t rank = read_u64(is);
  if (rank < 1 || rank > 3) throw IngestError("checkpoint: bad tensor rank");
  std::vector<Index> dims;
  for (std::uint64_t i = 0; i < rank; ++i)
    dims.push_back(static_cast<Index>(read_u64(is)));
  Tensor<S> t(dims);
  for (Index i = 0; i < t.size(); ++i) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    t[i] = static_cast<S>(v);
  }
  return t;
}

}  // namespace ckpt_detail

inline constexpr char kCheckpointMagic[] = "HDWSRCK1";

template <class S>
void save_checkpoint(const std::string& path, const std::string& config_json,
                     std::uint64_t iteration, const std::string& rng_state,
                     const ParamSet<S>& params, std::int64_t adam_steps) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("save_checkpoint: cannot open " + path);
  os.write(kCheckpointMagic, 8);
  ckpt_detail::write_u64(os, 1);  // format version
  ckpt_detail::write_str(os, config_json);
  ckpt_detail::write_u64(os, iteration);
  ckpt_detail::write_u64(os, static_cast<std::uint64_t>(adam_steps));
  ckpt_detail::write_str(os, rng_state);
  ckpt_detail::write_u64(os, static_cast<std::uint64_t>(params.count()));
  for (Index i = 0; i < params.count(); ++i) {
    const Parameter<S>& p = params.at(i);
    ckpt_detail::write_str(os, p.name);
    ckpt_detail::write_tensor(os, p.value);
    ckpt_detail::write_tensor(os, p.m);
    ckpt_detail::write_tensor(os, p.v);
  }
  if (!os) throw IoError("save_checkpoint: write failed for " + path);
}

struct CheckpointHeader {
  std::string config_json;
  std::uint64_t iteration = 0;
  std::int64_t adam_steps = 0;
  std::string rng_state;
};

// Reads the header only; parameters are loaded in a second pass once the
// caller has rebuilt the model from the echoed config.
inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != kCheckpointMagic)
    throw IngestError("read_checkpoint: " + path + " is not a checkpoint");
  const std::uint64_t version = ckpt_detail::read_u64(is);
  if (version != 1)
    throw IngestError("read_checkpoint: unsupported format version " +
                      std::to_string(version));
  CheckpointHeader h;
  h.config_json = ckpt_detail::read_str(is);
  h.iteration = ckpt_detail::read_u64(is);
  h.adam_steps = static_cast<std::int64_t>(ckpt_detail::read_u64(is));
  h.rng_state = ckpt_detail::read_str(is);
  if (!is) throw IngestError("read_checkpoint: truncated header in " + path);
  return h;
}

template <class S>
void load_checkpoint_params(const std::string& path, ParamSet<S>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_checkpoint: cannot open " + path);
  is.seekg(8);
  ckpt_detail::read_u64(is);
  ckpt_detail::read_str(is);
  ckpt_detail::read_u64(is);
  ckpt_detail::read_u64(is);
  ckpt_detail::read_str(is);
  const std::uint64_t n = ckpt_detail::read_u64(is);
  if (n != static_cast<std::uint64_t>(params.count()))
    throw IngestError("load_checkpoint: archive has " + std::to_string(n) +
                      " parameters, model has " + std::to_string(params.count()));
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string name = ckpt_detail::read_str(is);
    Parameter<S>& p = params.at(params.id_of(name));
    Tensor<S> value = ckpt_detail::read_tensor<S>(is);
    Tensor<S> m = ckpt_detail::read_tensor<S>(is);
    Tensor<S> v = ckpt_detail::read_tensor<S>(is);
    require_same_dims(p.value, value, "load_checkpoint");
    p.value = std::move(value);
    p.m = std::move(m);
    p.v = std::move(v);
  }
  if (!is) throw IngestError("load_checkpoint: truncated archive " + path);
}

}  // namespace hdwsr
