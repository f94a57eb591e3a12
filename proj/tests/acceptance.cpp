// Acceptance gate: eleven standalone criteria, one PASS/FAIL line each.
// Every tolerance is pinned in the criterion itself. Exit code is the number
// of failed criteria. An optional argv filter runs a subset, e.g. "9".

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hdwsr/attention.hpp"
#include "hdwsr/config.hpp"
#include "hdwsr/metrics.hpp"
#include "hdwsr/model.hpp"
#include "hdwsr/trainer.hpp"
#include "hdwsr/wavelet.hpp"

using hdwsr::AblationConfig;
using hdwsr::BinMat;
using hdwsr::Binding;
using hdwsr::HdwModel;
using hdwsr::Index;
using hdwsr::MaskTrace;
using hdwsr::MatX;
using hdwsr::ModelConfig;
using hdwsr::Rng;
using hdwsr::Tape;
using hdwsr::Tensor;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.base_channels = 4;
  c.levels = 2;
  c.dfa_repeats = {1, 1};
  c.decoder_repeats = {1, 1};
  c.swin_window = 2;
  c.heads = 2;
  c.pfa_repeats = 1;
  c.t_embed_dim = 8;
  c.steps = 4;
  return c;
}

// ---------------------------------------------------------------- criterion 1

bool criterion_wavelet(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst_rt = 0.0, worst_energy = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Index h = 2 * rng.uniform_int(1, 16);
    const Index w = 2 * rng.uniform_int(1, 16);
    const Index c = rng.uniform_int(1, 3);
    Tensor<double> x = hdwsr::randn_tensor<double>(rng, {c, h, w});
    auto bands = hdwsr::dwt2_haar(x);
    Tensor<double> back = hdwsr::idwt2_haar(bands);
    worst_rt = std::max(worst_rt, (back.array() - x.array()).abs().maxCoeff());
    const double ex = x.array().square().sum();
    const double eb = bands.ll.array().square().sum() + bands.lh.array().square().sum() +
                      bands.hl.array().square().sum() + bands.hh.array().square().sum();
    worst_energy = std::max(worst_energy, std::abs(eb - ex) / ex);
  }
  const double dt = seconds_since(t0);
  std::ostringstream os;
  os << "1000 maps, max roundtrip err " << worst_rt << " (<1e-5), max energy err " << worst_energy
     << " (<1e-6), " << dt << "s (<10s)";
  detail = os.str();
  return worst_rt < 1e-5 && worst_energy < 1e-6 && dt < 10.0;
}

// ---------------------------------------------------------------- criterion 2

// Brute force: recompute the split statistic from scratch for every bin, pick
// the first strict maximum (the documented tie rule).
int oracle_dtb_bin(const MatX<double>& a, const BinMat& active) {
  std::vector<std::int64_t> hist(hdwsr::kDtbBins, 0);
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      if (active(i, j)) hist[static_cast<std::size_t>(hdwsr::detail::dtb_bin(a(i, j)))]++;
  std::int64_t n = 0, s_tot = 0;
  for (int b = 0; b < hdwsr::kDtbBins; ++b) {
    n += hist[b];
    s_tot += hist[b] * (2 * b + 1);
  }
  double best = 0.0;
  int best_k = 0;
  for (int k = 0; k < hdwsr::kDtbBins; ++k) {
    std::int64_t w1 = 0, s1 = 0;
    for (int b = 0; b <= k; ++b) {
      w1 += hist[b];
      s1 += hist[b] * (2 * b + 1);
    }
    const std::int64_t w2 = n - w1, s2 = s_tot - s1;
    if (w1 <= 0 || w2 <= 0) continue;
    const double d =
        static_cast<double>(s1) * static_cast<double>(w2) - static_cast<double>(s2) * static_cast<double>(w1);
    const double stat = d * d / (static_cast<double>(w1) * static_cast<double>(w2));
    if (stat > best) {
      best = stat;
      best_k = k;
    }
  }
  return best_k;
}

bool criterion_dtb_oracle(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(202);
  int mismatches = 0;
  auto check_one = [&](const MatX<double>& a) {
    BinMat active = BinMat::Constant(a.rows(), a.cols(), 1);
    auto r = hdwsr::dtb_threshold(a, active);
    if (r.k_index != oracle_dtb_bin(a, active)) ++mismatches;
  };
  for (int trial = 0; trial < 500; ++trial) {
    const Index n = rng.uniform_int(2, 24), m = rng.uniform_int(2, 24);
    MatX<double> a(n, m);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j) a(i, j) = rng.uniform();
    check_one(a);
  }
  for (int trial = 0; trial < 500; ++trial) {
    const Index n = rng.uniform_int(2, 24), m = rng.uniform_int(4, 24);
    MatX<double> a(n, m);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j) {
        const bool high = rng.uniform() < 0.3;
        a(i, j) = high ? 0.6 + 0.3 * rng.uniform() : 0.02 + 0.08 * rng.uniform();
      }
    check_one(a);
  }
  const double dt = seconds_since(t0);
  std::ostringstream os;
  os << "500 random + 500 bimodal matrices, " << mismatches << " bin mismatches (=0), " << dt
     << "s (<30s)";
  detail = os.str();
  return mismatches == 0 && dt < 30.0;
}

// ---------------------------------------------------------------- criterion 3

bool criterion_sparse_dense_equivalence(std::string& detail) {
  Rng rng(303);
  double worst = 0.0;
  int cases = 0;
  auto run_case = [&](Index n, Index m, Index d, const BinMat& I) {
    MatX<double> Q(n, d), K(m, d), V(m, d);
    for (Index i = 0; i < n * d; ++i) Q.data()[i] = rng.normal();
    for (Index i = 0; i < m * d; ++i) K.data()[i] = rng.normal();
    for (Index i = 0; i < m * d; ++i) V.data()[i] = rng.normal();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    MatX<double> A = hdwsr::smm_softmax<double>(Q, K, I, scale, nullptr);

    // Dense oracle: full scores, masked stabilized softmax per row.
    MatX<double> S = Q * K.transpose() * scale;
    MatX<double> A_ref = MatX<double>::Zero(n, m);
    for (Index i = 0; i < n; ++i) {
      double mx = -1e300;
      for (Index j = 0; j < m; ++j)
        if (I(i, j)) mx = std::max(mx, S(i, j));
      double z = 0.0;
      for (Index j = 0; j < m; ++j)
        if (I(i, j)) z += std::exp(S(i, j) - mx);
      for (Index j = 0; j < m; ++j)
        if (I(i, j)) A_ref(i, j) = std::exp(S(i, j) - mx) / z;
    }
    worst = std::max(worst, (A - A_ref).cwiseAbs().maxCoeff());

    MatX<double> out = hdwsr::attend<double>(A, V, I, nullptr);
    MatX<double> out_ref = A_ref * V;  // off-support entries of A_ref are zero
    worst = std::max(worst, (out - out_ref).cwiseAbs().maxCoeff());
    ++cases;
  };

  for (int trial = 0; trial < 198; ++trial) {
    const Index n = rng.uniform_int(1, 64), m = rng.uniform_int(1, 64);
    const Index d = rng.uniform_int(1, 16);
    BinMat I(n, m);
    for (Index i = 0; i < n; ++i) {
      bool any = false;
      for (Index j = 0; j < m; ++j) {
        I(i, j) = rng.uniform() < 0.5 ? 1 : 0;
        any = any || I(i, j);
      }
      if (!any) I(i, rng.uniform_int(0, m - 1)) = 1;  // keep rows realizable
    }
    run_case(n, m, d, I);
  }
  {  // all-ones and singleton-row index matrices
    const Index n = 32, m = 48, d = 8;
    run_case(n, m, d, BinMat::Constant(n, m, 1));
    BinMat single = BinMat::Zero(n, m);
    for (Index i = 0; i < n; ++i) single(i, rng.uniform_int(0, m - 1)) = 1;
    run_case(n, m, d, single);
  }
  std::ostringstream os;
  os << cases << " cases, max |sparse - dense oracle| " << worst << " (<1e-6)";
  detail = os.str();
  return cases == 200 && worst < 1e-6;
}

// ---------------------------------------------------------------- criterion 4

bool criterion_support_monotone(std::string& detail) {
  Rng rng(404);
  int violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = rng.uniform_int(4, 32), m = rng.uniform_int(4, 32);
    const Index d = rng.uniform_int(2, 8);
    auto state = hdwsr::initial_attention_state<double>(n, m);
    std::int64_t prev_nnz = hdwsr::detail::count_ones(state.I);
    for (int layer = 0; layer < 3; ++layer) {
      MatX<double> Q(n, d), K(m, d), V(m, d);
      for (Index i = 0; i < n * d; ++i) Q.data()[i] = rng.normal();
      for (Index i = 0; i < m * d; ++i) K.data()[i] = rng.normal();
      for (Index i = 0; i < m * d; ++i) V.data()[i] = rng.normal();
      auto r = hdwsr::dfa_round<double>(Q, K, V, state, hdwsr::MaskMode::Dtb);
      const std::int64_t nnz = hdwsr::detail::count_ones(r.state.I);
      if (nnz > prev_nnz) ++violations;
      prev_nnz = nnz;
      state = std::move(r.state);
    }
  }
  std::ostringstream os;
  os << "100 stacks x 3 layers, " << violations << " monotonicity violations (=0)";
  detail = os.str();
  return violations == 0;
}

// ---------------------------------------------------------------- criterion 5

bool criterion_flop_direction(std::string& detail) {
  Rng rng(505);
  const Index n = 16, m = 32, d = 4;
  int dtb_not_worse = 0, below_dense = 0;
  for (int trial = 0; trial < 100; ++trial) {
    // Shared high/low key clusters give every query row a bimodal softmax
    // with high-mode mass strictly below M/2.
    const Index m_hi = rng.uniform_int(2, m / 2 - 1);
    MatX<double> u(1, d);
    for (Index k = 0; k < d; ++k) u(0, k) = rng.normal();
    u /= u.norm();
    MatX<double> Q(n, d), K(m, d), V(m, d);
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < d; ++k) Q(i, k) = 6.0 * u(0, k) + 0.05 * rng.normal();
    for (Index j = 0; j < m; ++j)
      for (Index k = 0; k < d; ++k)
        K(j, k) = (j < m_hi ? 1.0 : -1.0) * u(0, k) + 0.05 * rng.normal();
    for (Index i = 0; i < m * d; ++i) V.data()[i] = rng.normal();

    auto count_mode = [&](hdwsr::MaskMode mode, Index k) {
      hdwsr::FlopLedger ledger;
      auto st = hdwsr::initial_attention_state<double>(n, m);
      (void)hdwsr::dfa_round<double>(Q, K, V, st, mode, k, &ledger);
      return ledger.total();
    };
    const auto dtb = count_mode(hdwsr::MaskMode::Dtb, 0);
    const auto topk = count_mode(hdwsr::MaskMode::TopK, m / 2);
    const auto dense = count_mode(hdwsr::MaskMode::Dense, 0);
    if (dtb <= topk) ++dtb_not_worse;
    if (dtb < dense && topk < dense) ++below_dense;
  }
  std::ostringstream os;
  os << "dtb<=topk(M/2) in " << dtb_not_worse << "/100 (>=95), both<dense in " << below_dense
     << "/100 (=100)";
  detail = os.str();
  return dtb_not_worse >= 95 && below_dense == 100;
}

// ---------------------------------------------------------------- criterion 6

bool criterion_gradients(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig cfg = tiny_config();
  HdwModel<double> model(cfg, 606);
  Rng rng(607);
  Tensor<double> presr = hdwsr::rand_tensor<double>(rng, {3, 8, 8});
  Tensor<double> hr = hdwsr::rand_tensor<double>(rng, {3, 8, 8});
  Tensor<double> x0 = hdwsr::form_pair(hr, presr);
  Tensor<double> eps = hdwsr::randn_tensor<double>(rng, {3, 8, 8});
  auto sched = hdwsr::make_schedule<double>(cfg.steps, cfg.beta_start, cfg.beta_end);
  const int t = 3;
  const AblationConfig ab;

  MaskTrace trace;
  Tape<double> tape;
  Binding<double> bd(model.params(), tape);
  auto losses = model.training_losses(bd, presr, x0, t, eps, sched, ab, &trace);
  tape.backward(losses.total);
  auto grads = bd.collect_grads();

  auto frozen_loss = [&]() {
    MaskTrace replay = trace;
    replay.start_replay();
    Tape<double> tp(false);
    Binding<double> b2(model.params(), tp);
    return model.training_losses(b2, presr, x0, t, eps, sched, ab, &replay).total.val()[0];
  };

  Rng dir_rng(608);
  double worst = 0.0;
  int groups = 0;
  for (Index id = 0; id < model.params().count(); ++id) {
    auto& p = model.params().at(id);
    Tensor<double> d = hdwsr::randn_tensor<double>(dir_rng, p.value.dims());
    d.array() /= std::sqrt(d.array().square().sum());
    const double h = 1e-5;
    const Tensor<double> saved = p.value;
    p.value.array() = saved.array() + h * d.array();
    const double up = frozen_loss();
    p.value.array() = saved.array() - h * d.array();
    const double dn = frozen_loss();
    p.value = saved;
    const double numeric = (up - dn) / (2 * h);
    const double analytic = (grads[id].array() * d.array()).sum();
    const double rel = std::abs(numeric - analytic) /
                       std::max({1.0, std::abs(numeric), std::abs(analytic)});
    worst = std::max(worst, rel);
    ++groups;
  }
  const double dt = seconds_since(t0);
  std::ostringstream os;
  os << groups << " parameter groups, worst rel err " << worst << " (<1e-3), " << dt
     << "s (<300s)";
  detail = os.str();
  return worst < 1e-3 && dt < 300.0;
}

// ---------------------------------------------------------------- criterion 7

bool criterion_diffusion_stats(std::string& detail) {
  auto sched = hdwsr::make_schedule<double>(100, 1e-4, 0.02);
  Rng rng(707);
  Tensor<double> x0 = hdwsr::rand_tensor<double>(rng, {1, 2, 2});
  x0.array() = x0.array() * 2.0 - 1.0;
  const int t = 50;
  const double ab = sched.alpha_bar[t - 1];

  const int draws = 10000;
  double sum = 0.0, sumsq = 0.0;
  const double count = static_cast<double>(draws) * static_cast<double>(x0.size());
  for (int i = 0; i < draws; ++i) {
    Tensor<double> eps = hdwsr::randn_tensor<double>(rng, {1, 2, 2});
    Tensor<double> xt = hdwsr::q_sample(x0, t, eps, sched);
    for (Index k = 0; k < x0.size(); ++k) {
      const double centered = xt[k] - std::sqrt(ab) * x0[k];
      sum += centered;
      sumsq += centered * centered;
    }
  }
  const double mean = sum / count;
  const double var = sumsq / count - mean * mean;
  const double var_expected = 1.0 - ab;
  const double mean_err = std::abs(mean) / std::sqrt(var_expected);
  const double var_err = std::abs(var - var_expected) / var_expected;

  // Oracle-noise replay over the full T=100 chain.
  Tensor<double> x0_img({1, 8, 8});
  for (Index i = 0; i < x0_img.size(); ++i) x0_img[i] = 0.5 * rng.normal();
  Tensor<double> eps = hdwsr::randn_tensor<double>(rng, {1, 8, 8});
  Tensor<double> x = hdwsr::q_sample(x0_img, 100, eps, sched);
  Tensor<double> z = Tensor<double>::zeros({1, 8, 8});
  for (int t2 = 100; t2 >= 1; --t2) {
    const double ab2 = sched.alpha_bar[t2 - 1];
    Tensor<double> eps_true({1, 8, 8});
    eps_true.array() = (x.array() - std::sqrt(ab2) * x0_img.array()) / std::sqrt(1.0 - ab2);
    x = hdwsr::reverse_step(x, eps_true, t2, sched, z);
  }
  const double replay_err = (x.array() - x0_img.array()).abs().maxCoeff();
  const double bound = 1e-3 * x0_img.array().abs().maxCoeff();

  std::ostringstream os;
  os << "n=10000: mean err " << mean_err << ", var err " << var_err
     << " (both <0.05); replay Linf " << replay_err << " (<" << bound << ")";
  detail = os.str();
  return mean_err < 0.05 && var_err < 0.05 && replay_err < bound;
}

// ---------------------------------------------------------------- criterion 8

bool criterion_loss_arithmetic(std::string& detail) {
  Rng rng(808);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const double he = 10.0 * rng.uniform(), ha = 10.0 * rng.uniform();
    const auto terms = hdwsr::loss_total(he, ha, 0.2);
    worst = std::max(worst, std::abs(terms.total - (0.2 * he + 0.8 * ha)));
  }
  // The beta sweep is a pure config axis: values round-trip untouched.
  bool sweep_ok = true;
  for (double beta : {0.1, 0.2, 0.5, 0.8}) {
    hdwsr::RunConfig cfg;
    cfg.model.beta_weight = beta;
    cfg.model.validate();
    hdwsr::RunConfig back = hdwsr::config_from_json(hdwsr::to_json(cfg));
    sweep_ok = sweep_ok && back.model.beta_weight == beta;
  }
  std::ostringstream os;
  os << "100 pairs, max |total - (0.2 he + 0.8 ha)| = " << worst
     << " (<=1e-15 abs); beta sweep via config " << (sweep_ok ? "ok" : "BROKEN");
  detail = os.str();
  return worst <= 1e-15 && sweep_ok;
}

// ---------------------------------------------------------------- criterion 9

bool criterion_overfit(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  const bool verbose = std::getenv("HDWSR_ACCEPT_VERBOSE") != nullptr;

  ModelConfig cfg;
  cfg.base_channels = 8;
  cfg.levels = 2;
  cfg.dfa_repeats = {1, 1};
  cfg.decoder_repeats = {1, 1};
  cfg.swin_window = 4;
  cfg.heads = 2;
  cfg.pfa_repeats = 1;
  cfg.t_embed_dim = 16;
  cfg.steps = 4;
  cfg.beta_start = 0.2;
  cfg.beta_end = 0.7;  // alpha_bar(T) ~ 0.07: x_T is nearly pure noise

  // 32x32 target with detail at and beyond the LR Nyquist rate: bicubic
  // alone stays well under the bar, so the memorized residual must carry it.
  const Index hr_side = 32, scale = 4;
  Tensor<double> hr({3, hr_side, hr_side});
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < hr_side; ++i)
      for (Index j = 0; j < hr_side; ++j) {
        hr.channel(c)(i, j) = 0.5 + 0.18 * std::sin(2 * M_PI * (i + 5.0 * c) / 16.0) +
                              0.12 * std::cos(2 * M_PI * (j - 3.0 * c) / 12.0) +
                              0.08 * std::sin(2 * M_PI * (i + j) / 8.0);
      }
  Tensor<double> lr = hdwsr::bicubic_resize(hr, hr_side / scale, hr_side / scale);
  lr.array() = lr.array().cwiseMax(0.0).cwiseMin(1.0);

  hdwsr::PreSRSource src;
  src.scale = scale;
  Tensor<double> presr = hdwsr::presr_generate<double>(lr, src);
  const double presr_psnr = hdwsr::psnr(presr, hr);
  Tensor<double> x0 = hdwsr::form_pair(hr, presr);
  auto sched = hdwsr::make_schedule<double>(cfg.steps, cfg.beta_start, cfg.beta_end);

  HdwModel<double> model(cfg, 909);
  auto& ps = model.params();
  hdwsr::AdamConfig ac;
  ac.lr = 2e-3;
  hdwsr::Adam<double> opt(ac);
  Rng rng(910);
  const AblationConfig ab;

  // Sampling quality is gated by the t=1 prediction and by parameter jitter
  // from the stochastic (t, eps) draws, so draws are biased toward t=1 and
  // sampling runs on a Polyak average of the weights.
  std::vector<Tensor<double>> avg;
  avg.reserve(static_cast<std::size_t>(ps.count()));
  for (Index id = 0; id < ps.count(); ++id) avg.push_back(ps.at(id).value);
  auto swap_avg = [&] {
    for (Index id = 0; id < ps.count(); ++id)
      std::swap(ps.at(id).value, avg[static_cast<std::size_t>(id)]);
  };
  Rng probe_rng(912);
  std::vector<Tensor<double>> probe_eps;
  for (int t = 1; t <= cfg.steps; ++t)
    probe_eps.push_back(hdwsr::randn_tensor<double>(probe_rng, x0.dims()));

  int iters = 0;
  double ha_ema = -1.0, sr_psnr = 0.0;
  for (; iters < 45000; ++iters) {
    if (iters == 8000) opt.set_lr(1e-3);
    if (iters == 14000) opt.set_lr(5e-4);
    if (iters == 22000) opt.set_lr(2.5e-4);
    if (iters == 32000) opt.set_lr(1.25e-4);
    const int t = rng.uniform() < 0.4 ? 1 : static_cast<int>(rng.uniform_int(2, cfg.steps));
    Tensor<double> eps = hdwsr::randn_tensor<double>(rng, x0.dims());
    Tape<double> tape;
    Binding<double> bd(ps, tape);
    auto losses = model.training_losses(bd, presr, x0, t, eps, sched, ab);
    const double ha = losses.ha.val()[0];
    ha_ema = ha_ema < 0 ? ha : 0.99 * ha_ema + 0.01 * ha;
    tape.backward(losses.total);
    opt.step(ps, bd.collect_grads());
    for (Index id = 0; id < ps.count(); ++id) {
      auto& a = avg[static_cast<std::size_t>(id)];
      a.array() = 0.999 * a.array() + 0.001 * ps.at(id).value.array();
    }
    if (iters >= 1000 && iters % 250 == 0) {
      swap_avg();
      sr_psnr = hdwsr::psnr(hdwsr::sample_sr(model, lr, src, ab, 911), hr);
      if (verbose) {
        std::ostringstream ls;
        for (int tq = 1; tq <= cfg.steps; ++tq) {
          Tape<double> tp(false);
          Binding<double> b2(ps, tp);
          ls << " " << model
                          .training_losses(b2, presr, x0, tq,
                                           probe_eps[static_cast<std::size_t>(tq - 1)], sched, ab)
                          .ha.val()[0];
        }
        std::fprintf(stderr, "  it %d ha_ema %.5f psnr %.2f per-t%s\n", iters, ha_ema, sr_psnr,
                     ls.str().c_str());
      }
      swap_avg();
      if (sr_psnr >= 35.3) break;
    }
    if (seconds_since(t0) > 27 * 60) break;  // leave sampling time inside the budget
  }

  swap_avg();  // sample from the averaged weights
  Tensor<double> sr = hdwsr::sample_sr(model, lr, src, ab, 911);
  sr_psnr = hdwsr::psnr(sr, hr);
  const double dt = seconds_since(t0);
  std::ostringstream os;
  os << iters << " iters, loss_ha ema " << ha_ema << ", presr baseline " << presr_psnr
     << " dB, sampled SR " << sr_psnr << " dB (>=35), " << dt << "s (<1800s)";
  detail = os.str();
  return sr_psnr >= 35.0 && dt < 1800.0;
}

// --------------------------------------------------------------- criterion 10

bool criterion_introspection(std::string& detail) {
  ModelConfig cfg;
  cfg.dfa_repeats = {2, 4, 4};
  cfg.decoder_repeats = {4, 6, 6};
  HdwModel<float> model(cfg, 1);
  const auto dfa = model.dfa_block_counts();
  const auto dec = model.decoder_swin_counts();
  std::ostringstream os;
  os << "dfa [" << dfa[0] << "," << dfa[1] << "," << dfa[2] << "] (=[2,4,4]), decoder [" << dec[0]
     << "," << dec[1] << "," << dec[2] << "] (=[4,6,6])";
  detail = os.str();
  return dfa == std::vector<Index>{2, 4, 4} && dec == std::vector<Index>{4, 6, 6};
}

// --------------------------------------------------------------- criterion 11

// Independent SSIM oracle: same definition, different numerical route
// (central moments from per-window means rather than raw-moment subtraction).
double ssim_oracle(const Tensor<double>& a, const Tensor<double>& b) {
  constexpr int n = 11;
  constexpr double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  static std::vector<double> w = [] {
    std::vector<double> v(n * n);
    double s = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double di = i - 5, dj = j - 5;
        v[i * n + j] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
        s += v[i * n + j];
      }
    for (double& x : v) x /= s;
    return v;
  }();
  double total = 0.0;
  Index count = 0;
  for (Index ch = 0; ch < a.channels(); ++ch)
    for (Index i = 0; i + n <= a.height(); ++i)
      for (Index j = 0; j + n <= a.width(); ++j) {
        double mu1 = 0, mu2 = 0;
        for (int di = 0; di < n; ++di)
          for (int dj = 0; dj < n; ++dj) {
            mu1 += w[di * n + dj] * a(ch, i + di, j + dj);
            mu2 += w[di * n + dj] * b(ch, i + di, j + dj);
          }
        double v1 = 0, v2 = 0, cov = 0;
        for (int di = 0; di < n; ++di)
          for (int dj = 0; dj < n; ++dj) {
            const double dx = a(ch, i + di, j + dj) - mu1;
            const double dy = b(ch, i + di, j + dj) - mu2;
            v1 += w[di * n + dj] * dx * dx;
            v2 += w[di * n + dj] * dy * dy;
            cov += w[di * n + dj] * dx * dy;
          }
        total += ((2 * mu1 * mu2 + c1) * (2 * cov + c2)) /
                 ((mu1 * mu1 + mu2 * mu2 + c1) * (v1 + v2 + c2));
        ++count;
      }
  return total / static_cast<double>(count);
}

bool criterion_metrics(std::string& detail) {
  Rng rng(111);
  Tensor<double> base = hdwsr::rand_tensor<double>(rng, {3, 16, 16});
  Tensor<double> offset = base;
  offset.array() += 0.1;
  const double p20 = hdwsr::psnr(base, offset);
  const bool psnr_exact = std::abs(p20 - 20.0) < 1e-6;
  const bool ssim_exact = hdwsr::ssim(base, base) == 1.0;

  double worst_psnr = 0.0, worst_ssim = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor<double> x = hdwsr::rand_tensor<double>(rng, {3, 14, 13});
    Tensor<double> y = hdwsr::rand_tensor<double>(rng, {3, 14, 13});
    double mse = 0.0;
    for (Index i = 0; i < x.size(); ++i) mse += (x[i] - y[i]) * (x[i] - y[i]);
    mse /= static_cast<double>(x.size());
    worst_psnr = std::max(worst_psnr, std::abs(hdwsr::psnr(x, y) - 10.0 * std::log10(1.0 / mse)));
    worst_ssim = std::max(worst_ssim, std::abs(hdwsr::ssim(x, y) - ssim_oracle(x, y)));
  }
  std::ostringstream os;
  os << "psnr(+0.1) err " << std::abs(p20 - 20.0) << " (<1e-6), ssim(a,a)==1 "
     << (ssim_exact ? "exact" : "BROKEN") << ", 100 pairs: psnr oracle err " << worst_psnr
     << " (<1e-9), ssim oracle err " << worst_ssim << " (<1e-9)";
  detail = os.str();
  return psnr_exact && ssim_exact && worst_psnr < 1e-9 && worst_ssim < 1e-9;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    char* end = nullptr;
    const long id = std::strtol(argv[i], &end, 10);
    if (end == argv[i] || *end != '\0' || id < 1 || id > 11) {
      std::fprintf(stderr, "usage: %s [criterion numbers 1..11]\n", argv[0]);
      return 2;
    }
    only.insert(static_cast<int>(id));
  }

  struct Criterion {
    int id;
    const char* name;
    std::function<bool(std::string&)> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "wavelet exactness", criterion_wavelet},
      {2, "DTB oracle equivalence", criterion_dtb_oracle},
      {3, "sparse/dense attention equivalence", criterion_sparse_dense_equivalence},
      {4, "support monotonicity", criterion_support_monotone},
      {5, "FLOP direction (DTB vs Top-K vs dense)", criterion_flop_direction},
      {6, "gradient correctness", criterion_gradients},
      {7, "diffusion statistics", criterion_diffusion_stats},
      {8, "loss arithmetic", criterion_loss_arithmetic},
      {9, "overfit end-to-end", criterion_overfit},
      {10, "config fidelity", criterion_introspection},
      {11, "metric sanity", criterion_metrics},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    std::string det;
    bool ok = false;
    try {
      ok = c.run(det);
    } catch (const std::exception& e) {
      det = std::string("exception: ") + e.what();
    }
    if (!ok) ++failures;
    std::printf("criterion %2d %s: %s [%s]\n", c.id, c.name, ok ? "PASS" : "FAIL", det.c_str());
    std::fflush(stdout);
  }
  return failures;
}
