#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "hdwsr/config.hpp"
#include "hdwsr/model.hpp"

using hdwsr::AblationConfig;
using hdwsr::AttnAblation;
using hdwsr::Binding;
using hdwsr::GuidanceAblation;
using hdwsr::HdwModel;
using hdwsr::Index;
using hdwsr::MaskTrace;
using hdwsr::ModelConfig;
using hdwsr::ParamSet;
using hdwsr::Rng;
using hdwsr::SamplingAblation;
using hdwsr::Tape;
using hdwsr::Tensor;
using hdwsr::Var;

namespace {

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

// Center-tap channel-copy weights: output o takes input channel o % cin.
// Composed with the wavelet roundtrip this makes HE-Net an exact identity.
template <class S>
void set_selection_conv(ParamSet<S>& ps, const std::string& name, Index cin, Index cout,
                        Index k) {
  auto& w = ps.at(ps.id_of(name + ".w"));
  w.value.array().setZero();
  for (Index o = 0; o < cout; ++o) {
    const Index f = ((o % cin) * k + k / 2) * k + k / 2;
    w.value.mat()(o, f) = S(1);
  }
  ps.at(ps.id_of(name + ".b")).value.array().setZero();
}

template <class S>
void set_identity_linear(ParamSet<S>& ps, const std::string& name, Index c) {
  auto& w = ps.at(ps.id_of(name + ".w"));
  w.value.array().setZero();
  for (Index i = 0; i < c; ++i) w.value.mat()(i, i) = S(1);
  ps.at(ps.id_of(name + ".b")).value.array().setZero();
}

}  // namespace

TEST_CASE("config validation rejects malformed setups") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.dfa_repeats = {1};
  CHECK_THROWS_AS(c.validate(), hdwsr::ConfigError);
  c = tiny_config();
  c.beta_weight = 0.0;
  CHECK_THROWS_AS(c.validate(), hdwsr::ConfigError);
  c = tiny_config();
  c.t_embed_dim = 7;
  CHECK_THROWS_AS(c.validate(), hdwsr::ConfigError);
  c = tiny_config();
  c.decoder_repeats = {1, 0};
  CHECK_THROWS_AS(c.validate(), hdwsr::ConfigError);
}

TEST_CASE("he forward: reconstruction shape and guidance pyramid sizes") {
  HdwModel<double> model(tiny_config(), 11);
  Rng rng(5);
  Tensor<double> presr = hdwsr::rand_tensor<double>(rng, {3, 8, 8});
  Tape<double> tape(false);
  Binding<double> bd(model.params(), tape);
  auto out = model.he_forward(bd, tape.constant(presr));
  CHECK(out.recon.val().dims() == std::vector<Index>{3, 8, 8});
  REQUIRE(out.guidance.size() == 2);
  CHECK(out.guidance[0].val().dims() == std::vector<Index>{12, 4, 4});
  CHECK(out.guidance[1].val().dims() == std::vector<Index>{24, 2, 2});

  Tensor<double> odd = hdwsr::rand_tensor<double>(rng, {3, 6, 8});
  CHECK_THROWS_AS((void)model.he_forward(bd, tape.constant(odd)), hdwsr::DimensionError);
}

TEST_CASE("he forward: identity-initialized adjusters give a wavelet roundtrip") {
  ModelConfig cfg = tiny_config();
  HdwModel<double> model(cfg, 23);
  auto& ps = model.params();
  set_selection_conv<double>(ps, "he.adj1", 3, cfg.width(1), 3);
  set_selection_conv<double>(ps, "he.adj2", cfg.width(1), cfg.width(2), 3);
  set_identity_linear<double>(ps, "he.fc", cfg.width(2));
  set_selection_conv<double>(ps, "he.post2", cfg.width(2), cfg.width(1), 3);
  set_selection_conv<double>(ps, "he.exit", cfg.width(1), 3, 3);

  Rng rng(9);
  Tensor<double> presr = hdwsr::rand_tensor<double>(rng, {3, 8, 8});
  Tape<double> tape(false);
  Binding<double> bd(model.params(), tape);
  auto out = model.he_forward(bd, tape.constant(presr));
  CHECK((out.recon.val().array() - presr.array()).abs().maxCoeff() < 1e-5);

  // A constant image has no detail at any scale: every guidance entry is
  // exactly zero and the reconstruction is exact.
  Tensor<double> flat({3, 8, 8});
  flat.array().setConstant(0.625);
  auto out2 = model.he_forward(bd, tape.constant(flat));
  for (const auto& g : out2.guidance) CHECK(g.val().array().abs().maxCoeff() == 0.0);
  CHECK((out2.recon.val().array() - flat.array()).abs().maxCoeff() == 0.0);
}

TEST_CASE("loss_he: zero, constant-difference and oracle values") {
  Rng rng(3);
  Tensor<double> a = hdwsr::rand_tensor<double>(rng, {3, 6, 6});
  CHECK(hdwsr::loss_he_value(a, a) == 0.0);

  Tensor<double> b = a;
  b.array() += 1.0;
  CHECK(hdwsr::loss_he_value(a, b) == doctest::Approx(2.0).epsilon(1e-12));

  Tensor<double> c = hdwsr::rand_tensor<double>(rng, {3, 6, 6});
  double sq = 0.0, ab = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = c[i] - a[i];
    sq += d * d;
    ab += std::abs(d);
  }
  const double n = static_cast<double>(a.size());
  const double oracle = std::sqrt(sq / n) + ab / n;
  CHECK(hdwsr::loss_he_value(a, c) == doctest::Approx(oracle).epsilon(1e-7));
}

TEST_CASE("ha forward: output shape, determinism and ablation modes") {
  ModelConfig cfg = tiny_config();
  HdwModel<double> model(cfg, 31);
  Rng rng(7);
  Tensor<double> presr = hdwsr::rand_tensor<double>(rng, {3, 8, 8});
  Tensor<double> x_t = hdwsr::randn_tensor<double>(rng, {3, 8, 8});
  auto guidance = model.guidance_for(presr);

  AblationConfig ab;
  Tensor<double> e1 = model.predict_eps(x_t, 2, guidance, ab);
  CHECK(e1.dims() == x_t.dims());
  Tensor<double> e2 = model.predict_eps(x_t, 2, guidance, ab);
  CHECK((e1.array() == e2.array()).all());

  // Every ablation mode runs and the masking mode changes the output while
  // the parameters stay untouched.
  const Tensor<double> before = model.params().at(0).value;
  AblationConfig topk = ab;
  topk.attention = AttnAblation::TopK;
  AblationConfig dense = ab;
  dense.attention = AttnAblation::Dense;
  AblationConfig self_only = ab;
  self_only.attention = AttnAblation::SelfOnly;
  AblationConfig strided = ab;
  strided.sampling = SamplingAblation::StridedConv;
  AblationConfig no_guid = ab;
  no_guid.guidance = GuidanceAblation::None;
  Tensor<double> ed = model.predict_eps(x_t, 2, guidance, dense, nullptr);
  CHECK(ed.dims() == x_t.dims());
  CHECK(model.predict_eps(x_t, 2, guidance, topk).dims() == x_t.dims());
  CHECK(model.predict_eps(x_t, 2, guidance, self_only).dims() == x_t.dims());
  CHECK(model.predict_eps(x_t, 2, guidance, strided).dims() == x_t.dims());
  CHECK(model.predict_eps(x_t, 2, guidance, no_guid).dims() == x_t.dims());
  CHECK((model.params().at(0).value.array() == before.array()).all());
}

TEST_CASE("ha forward: the timestep embedding is live") {
  ModelConfig cfg = tiny_config();
  cfg.steps = 1000;
  HdwModel<double> model(cfg, 41);
  Rng rng(13);
  Tensor<double> presr = hdwsr::rand_tensor<double>(rng, {3, 8, 8});
  Tensor<double> x_t = hdwsr::randn_tensor<double>(rng, {3, 8, 8});
  auto guidance = model.guidance_for(presr);
  AblationConfig ab;
  Tensor<double> lo = model.predict_eps(x_t, 10, guidance, ab);
  Tensor<double> hi = model.predict_eps(x_t, 900, guidance, ab);
  CHECK((lo.array() - hi.array()).abs().maxCoeff() > 0.0);
}

TEST_CASE("timestep features: zero phase, injectivity, bounds") {
  auto z = hdwsr::timestep_features<double>(0, 8);
  for (Index i = 0; i < 4; ++i) {
    CHECK(z[2 * i] == 0.0);
    CHECK(z[2 * i + 1] == 1.0);
  }

  const Index dim = 128;
  std::vector<Tensor<double>> emb;
  for (int t = 1; t <= 1000; ++t) {
    emb.push_back(hdwsr::timestep_features<double>(t, dim));
    CHECK(emb.back().array().abs().maxCoeff() <= 1.0);
  }
  // All pairwise distinct: sort-free exhaustive check on the full vectors.
  bool all_distinct = true;
  for (std::size_t i = 0; i < emb.size() && all_distinct; ++i)
    for (std::size_t j = i + 1; j < emb.size(); ++j)
      if ((emb[i].array() == emb[j].array()).all()) {
        all_distinct = false;
        break;
      }
  CHECK(all_distinct);

  CHECK_THROWS_AS(hdwsr::timestep_features<double>(1, 7), hdwsr::ConfigError);
}

TEST_CASE("introspection: constructed repeats echo the config") {
  ModelConfig cfg;  // desk defaults: dfa [2,4,4], decoder [4,6,6]
  HdwModel<float> model(cfg, 1);
  CHECK(model.dfa_block_counts() == std::vector<Index>{2, 4, 4});
  CHECK(model.decoder_swin_counts() == std::vector<Index>{4, 6, 6});
  CHECK(model.param_tensor_count() > 0);

  HdwModel<float> again(cfg, 1);
  CHECK(again.param_tensor_count() == model.param_tensor_count());
  CHECK(again.param_scalar_count() == model.param_scalar_count());
}

TEST_CASE("same seed gives identical parameters, different seed differs") {
  ModelConfig cfg = tiny_config();
  HdwModel<double> a(cfg, 99), b(cfg, 99), c(cfg, 100);
  bool same = true, diff = false;
  for (Index i = 0; i < a.params().count(); ++i) {
    same = same && (a.params().at(i).value.array() == b.params().at(i).value.array()).all();
    diff = diff || ((a.params().at(i).value.array() != c.params().at(i).value.array()).any());
  }
  CHECK(same);
  CHECK(diff);
}

TEST_CASE("training losses: joint objective arithmetic and finiteness") {
  ModelConfig cfg = tiny_config();
  HdwModel<double> model(cfg, 55);
  Rng rng(21);
  Tensor<double> presr = hdwsr::rand_tensor<double>(rng, {3, 8, 8});
  Tensor<double> hr = hdwsr::rand_tensor<double>(rng, {3, 8, 8});
  Tensor<double> x0 = hdwsr::form_pair(hr, presr);
  Tensor<double> eps = hdwsr::randn_tensor<double>(rng, {3, 8, 8});
  auto sched = hdwsr::make_schedule<double>(cfg.steps, cfg.beta_start, cfg.beta_end);

  Tape<double> tape;
  Binding<double> bd(model.params(), tape);
  auto losses = model.training_losses(bd, presr, x0, 2, eps, sched, AblationConfig{});
  const double he = losses.he.val()[0];
  const double ha = losses.ha.val()[0];
  const double total = losses.total.val()[0];
  CHECK(std::isfinite(total));
  CHECK(he >= 0.0);
  CHECK(ha >= 0.0);
  CHECK(total == doctest::Approx(0.2 * he + 0.8 * ha).epsilon(1e-15));
}

TEST_CASE("joint gradient smoke check on frozen masks") {
  ModelConfig cfg = tiny_config();
  HdwModel<double> model(cfg, 77);
  Rng rng(33);
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

  auto loss_with_frozen_masks = [&]() {
    MaskTrace replay = trace;
    replay.start_replay();
    Tape<double> tp(false);
    Binding<double> b2(model.params(), tp);
    return model.training_losses(b2, presr, x0, t, eps, sched, ab, &replay).total.val()[0];
  };

  Rng dir_rng(101);
  for (const std::string pname : {"he.adj1.w", "ha.exit.w", "he.fc.w"}) {
    const Index id = model.params().id_of(pname);
    auto& p = model.params().at(id);
    Tensor<double> d = hdwsr::randn_tensor<double>(dir_rng, p.value.dims());
    d.array() /= std::sqrt(d.array().square().sum());
    const double h = 1e-5;
    const Tensor<double> saved = p.value;
    p.value.array() = saved.array() + h * d.array();
    const double up = loss_with_frozen_masks();
    p.value.array() = saved.array() - h * d.array();
    const double dn = loss_with_frozen_masks();
    p.value = saved;
    const double numeric = (up - dn) / (2 * h);
    const double analytic = (grads[id].array() * d.array()).sum();
    CHECK(std::abs(numeric - analytic) / std::max({1.0, std::abs(numeric), std::abs(analytic)}) <
          1e-3);
  }
}

TEST_CASE("overfit sanity: one tuple memorized within 2000 steps") {
  ModelConfig cfg = tiny_config();
  HdwModel<double> model(cfg, 88);
  Rng rng(44);
  Tensor<double> presr = hdwsr::rand_tensor<double>(rng, {3, 8, 8});
  Tensor<double> hr = hdwsr::rand_tensor<double>(rng, {3, 8, 8});
  Tensor<double> x0 = hdwsr::form_pair(hr, presr);
  Tensor<double> eps = hdwsr::randn_tensor<double>(rng, {3, 8, 8});
  auto sched = hdwsr::make_schedule<double>(cfg.steps, cfg.beta_start, cfg.beta_end);
  const int t = 2;

  hdwsr::AdamConfig ac;
  ac.lr = 3e-3;
  hdwsr::Adam<double> opt(ac);
  double ha = 0.0;
  for (int it = 0; it < 2000; ++it) {
    Tape<double> tape;
    Binding<double> bd(model.params(), tape);
    auto losses = model.training_losses(bd, presr, x0, t, eps, sched, AblationConfig{});
    ha = losses.ha.val()[0];
    if (ha < 1e-3) break;
    tape.backward(losses.total);
    opt.step(model.params(), bd.collect_grads());
  }
  CHECK(ha < 1e-3);
}

TEST_CASE("checkpoint: header echo, parameter round-trip, corruption checks") {
  ModelConfig mc = tiny_config();
  hdwsr::RunConfig rc;
  rc.model = mc;
  rc.seed = 7;
  HdwModel<double> model(mc, 7);
  model.params().at(0).m.array().setConstant(0.25);
  model.params().at(0).v.array().setConstant(0.5);

  const std::string path = "ckpt_test.hdwsr";
  hdwsr::save_checkpoint(path, hdwsr::config_string(rc), 42, "rngstate 1 2 3", model.params(),
                         17);

  auto header = hdwsr::read_checkpoint_header(path);
  CHECK(header.iteration == 42);
  CHECK(header.adam_steps == 17);
  CHECK(header.rng_state == "rngstate 1 2 3");
  CHECK(hdwsr::config_from_json(nlohmann::json::parse(header.config_json)) == rc);

  HdwModel<double> other(mc, 1234);
  hdwsr::load_checkpoint_params(path, other.params());
  for (Index i = 0; i < model.params().count(); ++i) {
    CHECK((other.params().at(i).value.array() == model.params().at(i).value.array()).all());
    CHECK((other.params().at(i).m.array() == model.params().at(i).m.array()).all());
    CHECK((other.params().at(i).v.array() == model.params().at(i).v.array()).all());
  }

  ModelConfig smaller = tiny_config();
  smaller.pfa_repeats = 2;
  HdwModel<double> mismatched(smaller, 7);
  CHECK_THROWS_AS(hdwsr::load_checkpoint_params(path, mismatched.params()), hdwsr::IngestError);

  {
    std::ofstream bad("ckpt_bad.hdwsr", std::ios::binary);
    bad << "NOTACKPT garbage";
  }
  CHECK_THROWS_AS(hdwsr::read_checkpoint_header("ckpt_bad.hdwsr"), hdwsr::IngestError);
  std::remove(path.c_str());
  std::remove("ckpt_bad.hdwsr");
}
