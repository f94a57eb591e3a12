// Command-line front end: train, sample, eval, dwt-debug and flops verbs.
// A JSON config file seeds the run configuration; explicitly passed flags
// override file values key by key.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hdwsr/config.hpp"
#include "hdwsr/dataset.hpp"
#include "hdwsr/trainer.hpp"
#include "hdwsr/wavelet.hpp"

namespace {

using hdwsr::Index;
using hdwsr::RunConfig;
using hdwsr::Tensor;

using Scalar = double;

bool deterministic_mode() { return std::getenv("HDWSR_DETERMINISTIC") != nullptr; }

// Mirrors every RunConfig key as a flag; values the user actually passed
// override whatever the config file provided.
struct ConfigFlags {
  std::string config_path;

  Index base_channels = 0, levels = 0, pfa_repeats = 0, swin_window = 0, heads = 0,
        t_embed_dim = 0;
  std::vector<Index> dfa_repeats, decoder_repeats;
  int steps = 0;
  double beta_start = 0, beta_end = 0, beta_weight = 0;

  double lr = 0;
  Index iterations = 0, batch = 0, checkpoint_every = 0, patch = 0, scale = 0;
  std::string train_dir, eval_dir, out_dir, presr_mode, presr_path;
  std::string attention, sampling, guidance;
  Index topk_k = 0;
  std::uint64_t seed = 0;

  void attach(CLI::App* app, bool seed_required) {
    app->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--base-channels", base_channels);
    app->add_option("--levels", levels);
    app->add_option("--dfa-repeats", dfa_repeats);
    app->add_option("--decoder-repeats", decoder_repeats);
    app->add_option("--pfa-repeats", pfa_repeats);
    app->add_option("--swin-window", swin_window);
    app->add_option("--heads", heads);
    app->add_option("--t-embed-dim", t_embed_dim);
    app->add_option("--steps", steps);
    app->add_option("--beta-start", beta_start);
    app->add_option("--beta-end", beta_end);
    app->add_option("--beta-weight", beta_weight);
    app->add_option("--lr", lr);
    app->add_option("--iterations", iterations);
    app->add_option("--batch", batch);
    app->add_option("--checkpoint-every", checkpoint_every);
    app->add_option("--patch", patch);
    app->add_option("--scale", scale);
    app->add_option("--train-dir", train_dir);
    app->add_option("--eval-dir", eval_dir);
    app->add_option("--out-dir", out_dir);
    app->add_option("--presr-mode", presr_mode)
        ->check(CLI::IsMember({"bicubic", "light-cnn", "external"}));
    app->add_option("--presr-path", presr_path);
    app->add_option("--attention", attention)
        ->check(CLI::IsMember({"dtb", "topk", "dense", "self-only"}));
    app->add_option("--topk-k", topk_k);
    app->add_option("--sampling", sampling)->check(CLI::IsMember({"dwt", "strided-conv"}));
    app->add_option("--guidance", guidance)->check(CLI::IsMember({"he-net", "ha-self", "none"}));
    auto* seed_opt = app->add_option("--seed", seed, "RNG seed (reproducibility contract)");
    if (seed_required) seed_opt->required();
  }

  RunConfig resolve(const CLI::App* app) const {
    RunConfig cfg;
    if (!config_path.empty()) cfg = hdwsr::load_config(config_path);
    auto passed = [app](const std::string& name) { return app->count(name) > 0; };
    if (passed("--base-channels")) cfg.model.base_channels = base_channels;
    if (passed("--levels")) cfg.model.levels = levels;
    if (passed("--dfa-repeats")) cfg.model.dfa_repeats = dfa_repeats;
    if (passed("--decoder-repeats")) cfg.model.decoder_repeats = decoder_repeats;
    if (passed("--pfa-repeats")) cfg.model.pfa_repeats = pfa_repeats;
    if (passed("--swin-window")) cfg.model.swin_window = swin_window;
    if (passed("--heads")) cfg.model.heads = heads;
    if (passed("--t-embed-dim")) cfg.model.t_embed_dim = t_embed_dim;
    if (passed("--steps")) cfg.model.steps = steps;
    if (passed("--beta-start")) cfg.model.beta_start = beta_start;
    if (passed("--beta-end")) cfg.model.beta_end = beta_end;
    if (passed("--beta-weight")) cfg.model.beta_weight = beta_weight;
    if (passed("--lr")) cfg.lr = lr;
    if (passed("--iterations")) cfg.iterations = iterations;
    if (passed("--batch")) cfg.batch = batch;
    if (passed("--checkpoint-every")) cfg.checkpoint_every = checkpoint_every;
    if (passed("--patch")) cfg.patch = patch;
    if (passed("--scale")) cfg.scale = scale;
    if (passed("--train-dir")) cfg.train_dir = train_dir;
    if (passed("--eval-dir")) cfg.eval_dir = eval_dir;
    if (passed("--out-dir")) cfg.out_dir = out_dir;
    if (passed("--presr-mode")) cfg.presr_mode = presr_mode;
    if (passed("--presr-path")) cfg.presr_path = presr_path;
    if (passed("--attention")) cfg.ablation.attention = hdwsr::config_detail::attention_from(attention);
    if (passed("--topk-k")) cfg.ablation.topk_k = topk_k;
    if (passed("--sampling")) cfg.ablation.sampling = hdwsr::config_detail::sampling_from(sampling);
    if (passed("--guidance")) cfg.ablation.guidance = hdwsr::config_detail::guidance_from(guidance);
    if (passed("--seed")) cfg.seed = seed;
    return cfg;
  }
};

// Rebuilds model and optimizer state from a checkpoint; the echoed config
// wins except for the iteration budget, which the caller may extend.
struct Restored {
  RunConfig cfg;
  Index start_iter = 0;
  std::int64_t adam_steps = 0;
  std::string rng_state;
};

Restored restore(const std::string& path) {
  auto header = hdwsr::read_checkpoint_header(path);
  Restored r;
  r.cfg = hdwsr::config_from_json(nlohmann::json::parse(header.config_json));
  r.start_iter = static_cast<Index>(header.iteration);
  r.adam_steps = header.adam_steps;
  r.rng_state = header.rng_state;
  return r;
}

int cmd_train(const CLI::App* app, const ConfigFlags& flags, const std::string& resume_path) {
  RunConfig cfg = flags.resolve(app);
  Index start_iter = 0;
  std::unique_ptr<hdwsr::HdwModel<Scalar>> model;
  hdwsr::AdamConfig ac;
  std::string rng_state;

  if (!resume_path.empty()) {
    Restored r = restore(resume_path);
    RunConfig resumed = r.cfg;
    if (app->count("--iterations")) resumed.iterations = cfg.iterations;
    if (app->count("--out-dir")) resumed.out_dir = cfg.out_dir;
    if (app->count("--train-dir")) resumed.train_dir = cfg.train_dir;
    cfg = resumed;
    start_iter = r.start_iter;
    rng_state = r.rng_state;
    model = std::make_unique<hdwsr::HdwModel<Scalar>>(cfg.model, cfg.seed);
    hdwsr::load_checkpoint_params(resume_path, model->params());
    ac.lr = cfg.lr;
    hdwsr::Adam<Scalar> opt(ac);
    opt.set_steps_taken(r.adam_steps);
    auto images = hdwsr::load_hr_images<Scalar>(cfg.train_dir, cfg.patch);
    hdwsr::PairStream<Scalar> stream(images, cfg.patch, cfg.scale, cfg.seed);
    stream.rng().load_state(rng_state);
    auto out = hdwsr::train(model.get()[0], opt, stream, cfg, start_iter, &std::cout);
    std::cout << "checkpoint=" << out.checkpoint_path << "\n";
    return 0;
  }

  cfg.validate();
  if (cfg.train_dir.empty()) throw hdwsr::ConfigError("train: --train-dir is required");
  model = std::make_unique<hdwsr::HdwModel<Scalar>>(cfg.model, cfg.seed);
  ac.lr = cfg.lr;
  hdwsr::Adam<Scalar> opt(ac);
  auto images = hdwsr::load_hr_images<Scalar>(cfg.train_dir, cfg.patch);
  hdwsr::PairStream<Scalar> stream(images, cfg.patch, cfg.scale, cfg.seed);
  auto out = hdwsr::train(*model, opt, stream, cfg, 0, &std::cout);
  if (!out.log.empty()) std::cout << "final_loss=" << out.log.back().total << "\n";
  std::cout << "checkpoint=" << out.checkpoint_path << "\n";
  return 0;
}

int cmd_sample(const CLI::App* app, const ConfigFlags& flags, const std::string& ckpt,
               const std::string& input, const std::string& output) {
  RunConfig cfg = flags.resolve(app);
  std::unique_ptr<hdwsr::HdwModel<Scalar>> model;
  if (!ckpt.empty()) {
    Restored r = restore(ckpt);
    RunConfig from_ckpt = r.cfg;
    from_ckpt.seed = cfg.seed;
    if (app->count("--attention")) from_ckpt.ablation.attention = cfg.ablation.attention;
    if (app->count("--topk-k")) from_ckpt.ablation.topk_k = cfg.ablation.topk_k;
    if (app->count("--sampling")) from_ckpt.ablation.sampling = cfg.ablation.sampling;
    if (app->count("--guidance")) from_ckpt.ablation.guidance = cfg.ablation.guidance;
    if (app->count("--presr-mode")) from_ckpt.presr_mode = cfg.presr_mode;
    if (app->count("--presr-path")) from_ckpt.presr_path = cfg.presr_path;
    cfg = from_ckpt;
    model = std::make_unique<hdwsr::HdwModel<Scalar>>(cfg.model, cfg.seed);
    hdwsr::load_checkpoint_params(ckpt, model->params());
  } else {
    model = std::make_unique<hdwsr::HdwModel<Scalar>>(cfg.model, cfg.seed);
    std::cerr << "note: no checkpoint given, sampling from a freshly seeded model\n";
  }
  Tensor<Scalar> lr = hdwsr::read_png_rgb(input).cast<Scalar>();
  Tensor<Scalar> sr = hdwsr::sample_sr(*model, lr, cfg.presr_source(), cfg.ablation, cfg.seed);
  hdwsr::write_png_rgb(output, sr.cast<double>());
  std::cout << "wrote " << output << " (" << sr.height() << "x" << sr.width() << ")\n";
  return 0;
}

int cmd_eval(const CLI::App* app, const ConfigFlags& flags, const std::string& ckpt,
             bool identity_stub, bool with_flops, const std::string& report_path) {
  RunConfig cfg = flags.resolve(app);
  std::unique_ptr<hdwsr::HdwModel<Scalar>> model;
  if (!identity_stub) {
    if (!ckpt.empty()) {
      Restored r = restore(ckpt);
      RunConfig from_ckpt = r.cfg;
      from_ckpt.seed = cfg.seed;
      from_ckpt.eval_dir = cfg.eval_dir;
      if (app->count("--attention")) from_ckpt.ablation.attention = cfg.ablation.attention;
      if (app->count("--topk-k")) from_ckpt.ablation.topk_k = cfg.ablation.topk_k;
      if (app->count("--sampling")) from_ckpt.ablation.sampling = cfg.ablation.sampling;
      if (app->count("--guidance")) from_ckpt.ablation.guidance = cfg.ablation.guidance;
      cfg = from_ckpt;
      model = std::make_unique<hdwsr::HdwModel<Scalar>>(cfg.model, cfg.seed);
      hdwsr::load_checkpoint_params(ckpt, model->params());
    } else {
      model = std::make_unique<hdwsr::HdwModel<Scalar>>(cfg.model, cfg.seed);
      std::cerr << "note: no checkpoint given, evaluating a freshly seeded model\n";
    }
  }
  if (cfg.eval_dir.empty()) throw hdwsr::ConfigError("eval: --eval-dir is required");

  auto rep = hdwsr::evaluate_dir<Scalar>(model.get(), cfg, &std::cerr);
  std::vector<std::pair<std::string, double>> lines;
  for (const auto& row : rep.rows) {
    lines.push_back({row.name + ".psnr", row.psnr});
    lines.push_back({row.name + ".ssim", row.ssim});
  }
  lines.push_back({"mean.psnr", rep.mean_psnr});
  lines.push_back({"mean.ssim", rep.mean_ssim});
  std::cout << hdwsr::metric_lines(lines);
  std::cout << "deterministic=" << (deterministic_mode() ? 1 : 0) << "\n";

  nlohmann::json report;
  for (const auto& [k, v] : lines)
    report[k] = std::isinf(v) ? nlohmann::json("inf") : nlohmann::json(v);

  if (with_flops && model) {
    auto images = hdwsr::load_hr_images<Scalar>(cfg.eval_dir, 1);
    const Index tile = cfg.model.swin_window << cfg.model.levels;
    const Index grain = std::lcm(cfg.scale, tile);
    const Index h = std::max<Index>(grain, (images[0].height() / grain) * grain);
    hdwsr::FlopLedger ledger;
    Tensor<Scalar> hr({3, h, h});
    for (Index c = 0; c < 3; ++c) hr.channel(c) = images[0].channel(c).block(0, 0, h, h);
    Tensor<Scalar> lr = hdwsr::bicubic_resize(hr, h / cfg.scale, h / cfg.scale);
    (void)hdwsr::sample_sr(*model, lr, cfg.presr_source(), cfg.ablation, cfg.seed, &ledger);
    std::cout << hdwsr::flop_report_text(ledger);
    report["flops"] = hdwsr::flop_report_json(ledger);
  }
  if (!report_path.empty()) {
    std::ofstream os(report_path);
    os << report.dump(2) << "\n";
    std::cout << "report=" << report_path << "\n";
  }
  return 0;
}

int cmd_dwt_debug(const std::string& input, const std::string& out_dir, int levels) {
  Tensor<double> img = hdwsr::read_png_rgb(input);
  std::filesystem::create_directories(out_dir);
  auto pyr = hdwsr::decompose_pyramid(img, levels);
  auto write_band = [&](const Tensor<double>& band, const std::string& name) {
    Tensor<double> vis = band;
    const double lo = vis.array().minCoeff(), hi = vis.array().maxCoeff();
    vis.array() = hi > lo ? ((vis.array() - lo) / (hi - lo)).eval() : (vis.array() * 0 + 0.5).eval();
    hdwsr::write_png_rgb(out_dir + "/" + name + ".png", vis);
  };
  for (std::size_t j = 0; j < pyr.size(); ++j) {
    const std::string lv = "L" + std::to_string(j + 1) + "_";
    write_band(pyr[j].ll, lv + "ll");
    write_band(pyr[j].lh, lv + "lh");
    write_band(pyr[j].hl, lv + "hl");
    write_band(pyr[j].hh, lv + "hh");
  }
  std::cout << "wrote " << pyr.size() * 4 << " subband images to " << out_dir << "\n";
  return 0;
}

int cmd_flops(const CLI::App* app, const ConfigFlags& flags, bool compare) {
  RunConfig cfg = flags.resolve(app);
  cfg.model.validate();
  hdwsr::HdwModel<Scalar> model(cfg.model, cfg.seed);
  const Index tile = cfg.model.swin_window << cfg.model.levels;
  const Index hr_side = std::lcm(cfg.scale, tile);
  hdwsr::Rng rng(cfg.seed);
  Tensor<Scalar> lr = hdwsr::rand_tensor<Scalar>(rng, {3, hr_side / cfg.scale, hr_side / cfg.scale});

  auto run_mode = [&](hdwsr::AttnAblation mode, hdwsr::FlopLedger& ledger) {
    hdwsr::AblationConfig ab = cfg.ablation;
    ab.attention = mode;
    Tensor<Scalar> presr = hdwsr::presr_generate<Scalar>(lr, cfg.presr_source());
    auto guidance = model.guidance_for(presr, &ledger);
    (void)model.predict_eps(hdwsr::randn_tensor<Scalar>(rng, presr.dims()), 1, guidance, ab,
                            &ledger);
  };

  if (compare) {
    for (auto [mode, name] :
         {std::pair{hdwsr::AttnAblation::Dtb, "dtb"}, {hdwsr::AttnAblation::TopK, "topk"},
          {hdwsr::AttnAblation::Dense, "dense"}}) {
      hdwsr::FlopLedger ledger;
      run_mode(mode, ledger);
      std::cout << name << ".total=" << ledger.total() << "\n";
    }
    return 0;
  }
  hdwsr::FlopLedger ledger;
  run_mode(cfg.ablation.attention, ledger);
  std::cout << hdwsr::flop_report_text(ledger);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HDW-SR: residual diffusion super-resolution with wavelet guidance"};
  app.require_subcommand(1);

  ConfigFlags train_flags, sample_flags, eval_flags, flops_flags;
  std::string resume_path, ckpt_path, input_path, output_path, report_path, dwt_input,
      dwt_out = "dwt_debug";
  int dwt_levels = 3;
  bool identity_stub = false, with_flops = false, compare = false;

  auto* train = app.add_subcommand("train", "Train from a directory of HR PNGs");
  train_flags.attach(train, true);
  train->add_option("--resume", resume_path, "checkpoint to resume from")
      ->check(CLI::ExistingFile);

  auto* sample = app.add_subcommand("sample", "Super-resolve one LR PNG");
  sample_flags.attach(sample, true);
  sample->add_option("--checkpoint", ckpt_path)->check(CLI::ExistingFile);
  sample->add_option("--input", input_path, "LR input PNG")->required()->check(CLI::ExistingFile);
  sample->add_option("--output", output_path, "SR output PNG")->required();

  auto* eval = app.add_subcommand("eval", "Score a directory of HR PNGs");
  eval_flags.attach(eval, true);
  eval->add_option("--checkpoint", ckpt_path)->check(CLI::ExistingFile);
  eval->add_flag("--identity-stub", identity_stub, "score HR against itself (plumbing check)");
  eval->add_flag("--flops", with_flops, "append a FLOP report from one sampling run");
  eval->add_option("--report", report_path, "write a JSON report file");

  auto* dwt = app.add_subcommand("dwt-debug", "Dump wavelet subband visualizations");
  dwt->add_option("--input", dwt_input)->required()->check(CLI::ExistingFile);
  dwt->add_option("--out-dir", dwt_out);
  dwt->add_option("--levels", dwt_levels);

  auto* flops = app.add_subcommand("flops", "Report attention FLOP counts");
  flops_flags.attach(flops, true);
  flops->add_flag("--compare", compare, "report dtb, topk and dense side by side");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train, train_flags, resume_path);
    if (sample->parsed()) return cmd_sample(sample, sample_flags, ckpt_path, input_path, output_path);
    if (eval->parsed())
      return cmd_eval(eval, eval_flags, ckpt_path, identity_stub, with_flops, report_path);
    if (dwt->parsed()) return cmd_dwt_debug(dwt_input, dwt_out, dwt_levels);
    if (flops->parsed()) return cmd_flops(flops, flops_flags, compare);
  } catch (const hdwsr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
