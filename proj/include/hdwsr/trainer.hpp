#pragma once

// Training, sampling and evaluation drivers on top of the model. One RNG
// stream (inside the pair stream) feeds crops, timesteps and noise draws, so
// a checkpointed RNG state resumes the exact training trajectory.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "hdwsr/config.hpp"
#include "hdwsr/dataset.hpp"
#include "hdwsr/metrics.hpp"
#include "hdwsr/model.hpp"
#include "hdwsr/png_io.hpp"

namespace hdwsr {

struct TrainLogRow {
  Index iter = 0;
  double total = 0.0, he = 0.0, ha = 0.0;
};

struct TrainOutcome {
  std::vector<TrainLogRow> log;
  std::string checkpoint_path;
};

namespace trainer_detail {

template <class S>
void dump_tensor_stats(std::ostream& os, const char* name, const Tensor<S>& t) {
  os << "  " << name << ": dims(";
  for (int i = 0; i < t.rank(); ++i) os << (i ? "," : "") << t.dim(i);
  os << ") min=" << t.array().minCoeff() << " max=" << t.array().maxCoeff()
     << " mean=" << t.array().mean() << "\n";
}

template <class S>
[[noreturn]] void abort_non_finite(const RunConfig& cfg, Index iter, Index item, int t,
                                   double total, double he, double ha, const Tensor<S>& presr,
                                   const Tensor<S>& x0, const Tensor<S>& eps) {
  const std::string path = cfg.out_dir + "/nan_dump.txt";
  std::ofstream os(path);
  os << std::setprecision(17);
  os << "non-finite loss at iteration " << iter << ", batch item " << item << ", t=" << t
     << "\n";
  os << "losses: total=" << total << " he=" << he << " ha=" << ha << "\n";
  dump_tensor_stats(os, "presr", presr);
  dump_tensor_stats(os, "x0", x0);
  dump_tensor_stats(os, "eps", eps);
  throw ContractError("training aborted: non-finite loss at iteration " + std::to_string(iter) +
                      "; diagnostics written to " + path);
}

}  // namespace trainer_detail

// Runs iterations [start_iter, cfg.iterations). Gradients average over the
// batch; every loss is checked for finiteness before the optimizer step.
template <class S>
TrainOutcome train(HdwModel<S>& model, Adam<S>& opt, PairStream<S>& stream, const RunConfig& cfg,
                   Index start_iter = 0, std::ostream* info = nullptr) {
  cfg.validate();
  if (start_iter < 0 || start_iter > cfg.iterations)
    throw ConfigError("train: start_iter outside 0.." + std::to_string(cfg.iterations));
  std::filesystem::create_directories(cfg.out_dir);

  const NoiseSchedule<S> sched = make_schedule<S>(cfg.model.steps, static_cast<S>(cfg.model.beta_start),
                                                  static_cast<S>(cfg.model.beta_end));
  const PreSRSource presr_src = cfg.presr_source();
  Rng& rng = stream.rng();

  std::ofstream loss_log(cfg.out_dir + "/loss_log.txt",
                         start_iter > 0 ? std::ios::app : std::ios::trunc);
  loss_log << std::setprecision(17);

  TrainOutcome out;
  std::vector<Tensor<S>> grads;
  for (Index iter = start_iter; iter < cfg.iterations; ++iter) {
    double tot = 0.0, the = 0.0, tha = 0.0;
    for (Index item = 0; item < cfg.batch; ++item) {
      TrainPair<S> pair = stream.next();
      Tensor<S> presr = presr_generate<S>(pair.lr, presr_src);
      Tensor<S> x0 = form_pair(pair.hr, presr);
      const int t = static_cast<int>(rng.uniform_int(1, cfg.model.steps));
      Tensor<S> eps = randn_tensor<S>(rng, x0.dims());

      Tape<S> tape;
      Binding<S> bd(model.params(), tape);
      auto losses = model.training_losses(bd, presr, x0, t, eps, sched, cfg.ablation);
      const double l_tot = losses.total.val()[0];
      const double l_he = losses.he.val()[0];
      const double l_ha = losses.ha.val()[0];
      if (!std::isfinite(l_tot))
        trainer_detail::abort_non_finite(cfg, iter, item, t, l_tot, l_he, l_ha, presr, x0, eps);
      tape.backward(losses.total);
      std::vector<Tensor<S>> g = bd.collect_grads();
      if (grads.empty()) {
        grads = std::move(g);
      } else {
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i].array() += g[i].array();
      }
      tot += l_tot;
      the += l_he;
      tha += l_ha;
    }
    const S inv = S(1) / static_cast<S>(cfg.batch);
    for (Tensor<S>& g : grads) g.array() *= inv;
    opt.step(model.params(), grads);
    grads.clear();

    TrainLogRow row{iter + 1, tot / cfg.batch, the / cfg.batch, tha / cfg.batch};
    out.log.push_back(row);
    loss_log << row.iter << " " << row.total << " " << row.he << " " << row.ha << "\n";
    if (info && (row.iter % 50 == 0 || row.iter == cfg.iterations))
      *info << "iter " << row.iter << "/" << cfg.iterations << " loss " << row.total << "\n";

    if (cfg.checkpoint_every > 0 && row.iter % cfg.checkpoint_every == 0 &&
        row.iter < cfg.iterations) {
      const std::string path = cfg.out_dir + "/checkpoint_" + std::to_string(row.iter) + ".hdwsr";
      save_checkpoint(path, config_string(cfg), static_cast<std::uint64_t>(row.iter),
                      rng.save_state(), model.params(), opt.steps_taken());
      if (info) *info << "wrote " << path << "\n";
    }
  }

  out.checkpoint_path = cfg.out_dir + "/model.hdwsr";
  save_checkpoint(out.checkpoint_path, config_string(cfg),
                  static_cast<std::uint64_t>(cfg.iterations), rng.save_state(), model.params(),
                  opt.steps_taken());
  return out;
}

// Rejects geometries the network cannot process before any compute happens.
inline void require_sr_geometry(const ModelConfig& cfg, Index h, Index w) {
  for (Index j = 1; j <= cfg.levels; ++j) {
    const Index div = Index{1} << j;
    if (h % div != 0 || w % div != 0)
      throw DimensionError("sample: " + std::to_string(h) + "x" + std::to_string(w) +
                           " not divisible by 2^" + std::to_string(j));
    if ((h / div) % cfg.swin_window != 0 || (w / div) % cfg.swin_window != 0)
      throw DimensionError("sample: level " + std::to_string(j) + " grid " +
                           std::to_string(h / div) + "x" + std::to_string(w / div) +
                           " does not tile into windows of " + std::to_string(cfg.swin_window));
  }
}

// Full ancestral trajectory from pure noise; the guidance pyramid is computed
// once and reused by every step. Returns the composed SR image in [0,1].
template <class S>
Tensor<S> sample_sr(const HdwModel<S>& model, const Tensor<S>& lr, const PreSRSource& src,
                    const AblationConfig& ab, std::uint64_t seed, FlopLedger* ledger = nullptr) {
  Tensor<S> presr = presr_generate<S>(lr, src);
  require_sr_geometry(model.config(), presr.height(), presr.width());
  const GuidancePyramid<S> guidance = model.guidance_for(presr, ledger);
  const NoiseSchedule<S> sched =
      make_schedule<S>(model.config().steps, static_cast<S>(model.config().beta_start),
                       static_cast<S>(model.config().beta_end));
  Rng rng(seed);
  Tensor<S> x = randn_tensor<S>(rng, presr.dims());
  for (int t = sched.steps; t >= 1; --t) {
    Tensor<S> eps_pred = model.predict_eps(x, t, guidance, ab, ledger);
    Tensor<S> z = t > 1 ? randn_tensor<S>(rng, x.dims()) : Tensor<S>(x.dims());
    x = reverse_step(x, eps_pred, t, sched, z);
  }
  Tensor<S> sr = compose_sr(presr, x);
  sr.array() = sr.array().cwiseMax(S(0)).cwiseMin(S(1));
  return sr;
}

struct EvalRow {
  std::string name;
  double psnr = 0.0, ssim = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_psnr = 0.0, mean_ssim = 0.0;
};

// Evaluates over every usable PNG in cfg.eval_dir: the HR image is
// center-cropped to the model's geometry grain, degraded to LR by bicubic
// downscale, super-resolved, and scored. A null model is the identity stub
// (SR := HR), the reference point for the metric plumbing.
template <class S>
EvalReport evaluate_dir(const HdwModel<S>* model, const RunConfig& cfg,
                        std::ostream* info = nullptr) {
  Index grain = cfg.scale;
  if (model) {
    const Index tile = cfg.model.swin_window << cfg.model.levels;
    grain = std::lcm(cfg.scale, tile);
  }
  EvalReport rep;
  std::size_t index = 0;
  for (const std::string& path : list_pngs(cfg.eval_dir)) {
    Tensor<double> img;
    try {
      img = read_png_rgb(path);
    } catch (const Error& e) {
      if (info) *info << "warning: skipping '" << path << "': " << e.what() << "\n";
      continue;
    }
    const Index h = (img.height() / grain) * grain;
    const Index w = (img.width() / grain) * grain;
    if (h == 0 || w == 0) {
      if (info)
        *info << "warning: skipping '" << path << "': smaller than geometry grain " << grain
              << "\n";
      continue;
    }
    Tensor<S> hr({3, h, w});
    const Index top = (img.height() - h) / 2, left = (img.width() - w) / 2;
    for (Index c = 0; c < 3; ++c)
      hr.channel(c) = img.channel(c).block(top, left, h, w).template cast<S>();

    Tensor<S> sr;
    if (model) {
      Tensor<S> lr = bicubic_resize(hr, h / cfg.scale, w / cfg.scale);
      lr.array() = lr.array().cwiseMax(S(0)).cwiseMin(S(1));
      sr = sample_sr(*model, lr, cfg.presr_source(), cfg.ablation, cfg.seed + index);
    } else {
      sr = hr;
    }
    EvalRow row;
    row.name = std::filesystem::path(path).filename().string();
    row.psnr = psnr(sr.template cast<double>(), hr.template cast<double>());
    row.ssim = ssim(sr.template cast<double>(), hr.template cast<double>());
    rep.rows.push_back(row);
    if (info)
      *info << row.name << " psnr=" << row.psnr << " ssim=" << row.ssim << "\n";
    ++index;
  }
  if (rep.rows.empty()) throw IngestError("no usable evaluation images in '" + cfg.eval_dir + "'");
  for (const EvalRow& r : rep.rows) {
    rep.mean_psnr += r.psnr;
    rep.mean_ssim += r.ssim;
  }
  rep.mean_psnr /= static_cast<double>(rep.rows.size());
  rep.mean_ssim /= static_cast<double>(rep.rows.size());
  return rep;
}

}  // namespace hdwsr
