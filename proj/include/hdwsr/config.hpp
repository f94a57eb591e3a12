#pragma once

// Run configuration: model hyper-parameters, optimizer settings, data paths
// and ablation switches, with a lossless JSON round-trip.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "hdwsr/errors.hpp"
#include "hdwsr/model.hpp"
#include "hdwsr/presr.hpp"

namespace hdwsr {

struct RunConfig {
  ModelConfig model;
  AblationConfig ablation;

  double lr = 1e-4;
  Index iterations = 200;
  Index batch = 4;
  Index checkpoint_every = 0;  // 0 keeps only the final checkpoint

  Index patch = 64;  // HR crop edge used for training pairs
  Index scale = 4;
  std::string train_dir;
  std::string eval_dir;
  std::string out_dir = ".";

  std::string presr_mode = "bicubic";  // bicubic | light-cnn | external
  std::string presr_path;

  std::uint64_t seed = 0;

  // Training crops must survive `levels` halvings and still tile into
  // attention windows, and the LR side must be integral.
  void validate() const {
    model.validate();
    if (lr <= 0.0) throw ConfigError("lr must be positive");
    if (iterations <= 0) throw ConfigError("iterations must be positive");
    if (batch <= 0) throw ConfigError("batch must be positive");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
    if (scale < 1) throw ConfigError("scale must be at least 1");
    if (patch <= 0) throw ConfigError("patch must be positive");
    const Index grain = scale * (Index{1} << model.levels);
    if (patch % grain != 0)
      throw ConfigError("patch " + std::to_string(patch) + " must be divisible by scale*2^levels = " +
                        std::to_string(grain));
    Index side = patch;
    for (Index j = 0; j < model.levels; ++j) {
      side /= 2;
      if (side % model.swin_window != 0)
        throw ConfigError("patch " + std::to_string(patch) + " does not tile into windows of " +
                          std::to_string(model.swin_window) + " at level " + std::to_string(j + 1));
    }
    if (presr_mode != "bicubic" && presr_mode != "light-cnn" && presr_mode != "external")
      throw ConfigError("unknown presr_mode '" + presr_mode + "'");
    if (presr_mode == "external" && presr_path.empty())
      throw ConfigError("presr_mode 'external' requires presr_path");
  }

  PreSRSource presr_source() const {
    PreSRSource src;
    src.scale = scale;
    src.path = presr_path;
    if (presr_mode == "bicubic") src.mode = PreSRSource::Mode::Bicubic;
    else if (presr_mode == "light-cnn") src.mode = PreSRSource::Mode::LightCnn;
    else src.mode = PreSRSource::Mode::External;
    return src;
  }

  bool operator==(const RunConfig&) const = default;
};

namespace config_detail {

inline std::string attention_name(AttnAblation a) {
  switch (a) {
    case AttnAblation::Dtb: return "dtb";
    case AttnAblation::TopK: return "topk";
    case AttnAblation::Dense: return "dense";
    case AttnAblation::SelfOnly: return "self-only";
  }
  throw ConfigError("invalid attention ablation value");
}

inline AttnAblation attention_from(const std::string& s) {
  if (s == "dtb") return AttnAblation::Dtb;
  if (s == "topk") return AttnAblation::TopK;
  if (s == "dense") return AttnAblation::Dense;
  if (s == "self-only") return AttnAblation::SelfOnly;
  throw ConfigError("unknown attention ablation '" + s + "'");
}

inline std::string sampling_name(SamplingAblation a) {
  switch (a) {
    case SamplingAblation::Dwt: return "dwt";
    case SamplingAblation::StridedConv: return "strided-conv";
  }
  throw ConfigError("invalid sampling ablation value");
}

inline SamplingAblation sampling_from(const std::string& s) {
  if (s == "dwt") return SamplingAblation::Dwt;
  if (s == "strided-conv") return SamplingAblation::StridedConv;
  throw ConfigError("unknown sampling ablation '" + s + "'");
}

inline std::string guidance_name(GuidanceAblation a) {
  switch (a) {
    case GuidanceAblation::HeNet: return "he-net";
    case GuidanceAblation::HaSelf: return "ha-self";
    case GuidanceAblation::None: return "none";
  }
  throw ConfigError("invalid guidance ablation value");
}

inline GuidanceAblation guidance_from(const std::string& s) {
  if (s == "he-net") return GuidanceAblation::HeNet;
  if (s == "ha-self") return GuidanceAblation::HaSelf;
  if (s == "none") return GuidanceAblation::None;
  throw ConfigError("unknown guidance ablation '" + s + "'");
}

template <class T>
T require(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw ConfigError(std::string("config missing key '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& into) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace config_detail

inline nlohmann::json to_json(const RunConfig& c) {
  using namespace config_detail;
  nlohmann::json j;
  j["model"] = {
      {"base_channels", c.model.base_channels},
      {"levels", c.model.levels},
      {"steps", c.model.steps},
      {"beta_start", c.model.beta_start},
      {"beta_end", c.model.beta_end},
      {"beta_weight", c.model.beta_weight},
      {"dfa_repeats", c.model.dfa_repeats},
      {"decoder_repeats", c.model.decoder_repeats},
      {"pfa_repeats", c.model.pfa_repeats},
      {"swin_window", c.model.swin_window},
      {"heads", c.model.heads},
      {"t_embed_dim", c.model.t_embed_dim},
  };
  j["ablation"] = {
      {"attention", attention_name(c.ablation.attention)},
      {"topk_k", c.ablation.topk_k},
      {"sampling", sampling_name(c.ablation.sampling)},
      {"guidance", guidance_name(c.ablation.guidance)},
  };
  j["optimizer"] = {
      {"lr", c.lr},
      {"iterations", c.iterations},
      {"batch", c.batch},
      {"checkpoint_every", c.checkpoint_every},
  };
  j["data"] = {
      {"patch", c.patch},
      {"scale", c.scale},
      {"train_dir", c.train_dir},
      {"eval_dir", c.eval_dir},
      {"out_dir", c.out_dir},
      {"presr_mode", c.presr_mode},
      {"presr_path", c.presr_path},
  };
  j["seed"] = c.seed;
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  using namespace config_detail;
  RunConfig c;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    maybe(m, "base_channels", c.model.base_channels);
    maybe(m, "levels", c.model.levels);
    maybe(m, "steps", c.model.steps);
    maybe(m, "beta_start", c.model.beta_start);
    maybe(m, "beta_end", c.model.beta_end);
    maybe(m, "beta_weight", c.model.beta_weight);
    maybe(m, "dfa_repeats", c.model.dfa_repeats);
    maybe(m, "decoder_repeats", c.model.decoder_repeats);
    maybe(m, "pfa_repeats", c.model.pfa_repeats);
    maybe(m, "swin_window", c.model.swin_window);
    maybe(m, "heads", c.model.heads);
    maybe(m, "t_embed_dim", c.model.t_embed_dim);
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    std::string s;
    s = attention_name(c.ablation.attention); maybe(a, "attention", s);
    c.ablation.attention = attention_from(s);
    maybe(a, "topk_k", c.ablation.topk_k);
    s = sampling_name(c.ablation.sampling); maybe(a, "sampling", s);
    c.ablation.sampling = sampling_from(s);
    s = guidance_name(c.ablation.guidance); maybe(a, "guidance", s);
    c.ablation.guidance = guidance_from(s);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    maybe(o, "lr", c.lr);
    maybe(o, "iterations", c.iterations);
    maybe(o, "batch", c.batch);
    maybe(o, "checkpoint_every", c.checkpoint_every);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    maybe(d, "patch", c.patch);
    maybe(d, "scale", c.scale);
    maybe(d, "train_dir", c.train_dir);
    maybe(d, "eval_dir", c.eval_dir);
    maybe(d, "out_dir", c.out_dir);
    maybe(d, "presr_mode", c.presr_mode);
    maybe(d, "presr_path", c.presr_path);
  }
  maybe(j, "seed", c.seed);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  RunConfig c = config_from_json(j);
  for (const std::string& p : {c.train_dir, c.eval_dir, c.presr_path})
    if (!p.empty() && !std::filesystem::exists(p))
      throw ConfigError("config path '" + p + "' does not exist");
  return c;
}

inline void save_config(const RunConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file '" + path + "'");
  out << to_json(c).dump(2) << "\n";
}

inline std::string config_string(const RunConfig& c) { return to_json(c).dump(2); }

}  // namespace hdwsr
