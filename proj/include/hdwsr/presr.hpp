#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hdwsr/nn.hpp"
#include "hdwsr/png_io.hpp"
#include "hdwsr/tensor.hpp"

namespace hdwsr {

namespace bicubic_detail {

// Catmull-Rom weight (a = -0.5), zero outside |x| < 2.
inline double kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

struct TapSet {
  std::vector<Index> idx;
  std::vector<double> w;
};

// Precomputed taps for one output coordinate along an axis of length n.
// Half-pixel centers; on downscale the kernel widens by 1/scale so the
// source is low-passed as it is resampled. Weights are renormalized so
// constants map to themselves exactly.
inline std::vector<TapSet> make_taps(Index n_in, Index n_out) {
  const double scale = static_cast<double>(n_out) / static_cast<double>(n_in);
  const double spread = scale < 1.0 ? 1.0 / scale : 1.0;
  const Index radius = static_cast<Index>(std::ceil(2.0 * spread));
  std::vector<TapSet> taps(static_cast<std::size_t>(n_out));
  for (Index o = 0; o < n_out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) / scale - 0.5;
    const Index lo = static_cast<Index>(std::floor(src)) - radius + 1;
    TapSet& t = taps[static_cast<std::size_t>(o)];
    double sum = 0.0;
    for (Index i = lo; i <= lo + 2 * radius - 1; ++i) {
      const double w = kernel((src - static_cast<double>(i)) / spread);
      if (w == 0.0) continue;
      const Index clamped = i < 0 ? 0 : (i >= n_in ? n_in - 1 : i);
      t.idx.push_back(clamped);
      t.w.push_back(w);
      sum += w;
    }
    for (double& w : t.w) w /= sum;
  }
  return taps;
}

}  // namespace bicubic_detail

// Separable bicubic resampling of a (C,H,W) map. Upscale interpolates;
// downscale low-passes (kernel stretched to the output pitch). Output is not
// range-clamped here.
template <class S>
Tensor<S> bicubic_resize(const Tensor<S>& img, Index out_h, Index out_w) {
  if (img.rank() != 3) throw DimensionError("bicubic_resize: need a (C,H,W) tensor");
  if (out_h <= 0 || out_w <= 0) throw ConfigError("bicubic_resize: nonpositive target size");
  const Index c = img.channels(), h = img.height(), w = img.width();
  const auto taps_r = bicubic_detail::make_taps(h, out_h);
  const auto taps_c = bicubic_detail::make_taps(w, out_w);
  Tensor<S> mid({c, out_h, w});
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < out_h; ++i) {
      const auto& t = taps_r[static_cast<std::size_t>(i)];
      for (Index j = 0; j < w; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < t.idx.size(); ++k)
          acc += t.w[k] * static_cast<double>(img(ch, t.idx[k], j));
        mid(ch, i, j) = static_cast<S>(acc);
      }
    }
  Tensor<S> out({c, out_h, out_w});
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < out_h; ++i)
      for (Index j = 0; j < out_w; ++j) {
        const auto& t = taps_c[static_cast<std::size_t>(j)];
        double acc = 0.0;
        for (std::size_t k = 0; k < t.idx.size(); ++k)
          acc += t.w[k] * static_cast<double>(mid(ch, i, t.idx[k]));
        out(ch, i, j) = static_cast<S>(acc);
      }
  return out;
}

struct PreSRSource {
  enum class Mode { Bicubic, LightCnn, External };
  Mode mode = Mode::Bicubic;
  Index scale = 4;
  std::string path;             // External: PNG at target size
  std::uint64_t cnn_seed = 77;  // LightCnn: frozen residual stack init
};

// Frozen three-layer residual stack over the bicubic base. Not a serious SR
// net, just a stand-in with the right interface.
template <class S>
class LightCnn {
 public:
  explicit LightCnn(std::uint64_t seed) : params_(seed) {
    c1_ = Conv2d<S>::create(params_, "presr.c1", 3, 8, 3, 1, 1);
    c2_ = Conv2d<S>::create(params_, "presr.c2", 8, 8, 3, 1, 1);
    c3_ = Conv2d<S>::create(params_, "presr.c3", 8, 3, 3, 1, 1);
  }

  Tensor<S> refine(const Tensor<S>& base) const {
    Tape<S> tape(false);
    Binding<S> bd(params_, tape);
    Var<S> x = tape.constant(base);
    Var<S> r = c3_.fwd(bd, ag::silu(c2_.fwd(bd, ag::silu(c1_.fwd(bd, x)))));
    return ag::add(x, ag::scale(r, S(0.1))).val();
  }

 private:
  ParamSet<S> params_;
  Conv2d<S> c1_, c2_, c3_;
};

template <class S>
Tensor<S> presr_generate(const Tensor<S>& lr, const PreSRSource& src) {
  if (src.scale < 1) throw ConfigError("presr_generate: scale must be at least 1");
  if (lr.rank() != 3 || lr.channels() != 3)
    throw DimensionError("presr_generate: need a (3,H,W) input");
  const Index oh = lr.height() * src.scale, ow = lr.width() * src.scale;
  Tensor<S> out;
  switch (src.mode) {
    case PreSRSource::Mode::Bicubic:
      out = src.scale == 1 ? lr : bicubic_resize(lr, oh, ow);
      break;
    case PreSRSource::Mode::LightCnn: {
      Tensor<S> base = src.scale == 1 ? lr : bicubic_resize(lr, oh, ow);
      out = LightCnn<S>(src.cnn_seed).refine(base);
      break;
    }
    case PreSRSource::Mode::External: {
      Tensor<double> img = read_png_rgb(src.path);
      if (img.height() != oh || img.width() != ow)
        throw IngestError("presr_generate: " + src.path + " is " +
                          std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                          ", expected " + std::to_string(oh) + "x" + std::to_string(ow));
      out = img.template cast<S>();
      break;
    }
  }
  out.array() = out.array().min(S(1)).max(S(0));
  return out;
}

}  // namespace hdwsr
