#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>

#include <json.hpp>

#include "beal/adversary.hpp"
#include "beal/segnet.hpp"
#include "beal/synthdata.hpp"
#include "beal/tensor.hpp"
#include "beal/trainer.hpp"

namespace beal::config {

// Everything one experiment needs: where data comes from (synthesis
// parameters and/or existing dataset directories), the network and
// discriminator architectures, the training recipe, and evaluation options.
// One file drives every subcommand; ablations differ by a handful of keys.
struct ExperimentConfig {
  synthdata::DatasetConfig data;      // used when synthesizing datasets
  std::filesystem::path train_data;   // existing training dataset directory
  std::filesystem::path test_data;    // evaluation dataset directory
  segnet::SegNetConfig net;
  // unset discriminator configs fall back to the paper architecture, scaled
  // down when the net runs in tiny mode
  std::optional<adversary::DiscConfig> disc_b;
  std::optional<adversary::DiscConfig> disc_e;
  trainer::TrainConfig train;
  double eval_threshold = 0.5;
  std::filesystem::path out_dir;

  void validate() const {
    data.validate();
    net.validate();
    train.validate();
    if (disc_b) {
      disc_b->validate();
      if (disc_b->in_channels != 1)
        throw ValidationError(
            "ExperimentConfig: disc_b reads the 1-channel boundary map");
    }
    if (disc_e) {
      disc_e->validate();
      if (disc_e->in_channels != 2)
        throw ValidationError(
            "ExperimentConfig: disc_e reads the 2-channel entropy map");
    }
    if (!(eval_threshold > 0.0 && eval_threshold < 1.0))
      throw ValidationError(
          "ExperimentConfig: eval_threshold must lie in (0,1)");
    if (net.crop_size != train.crop_size)
      throw ValidationError(
          "ExperimentConfig: net.crop_size (" + std::to_string(net.crop_size) +
          ") and train.crop_size (" + std::to_string(train.crop_size) +
          ") disagree; set one of them");
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ValidationError("config: " + where + " must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (item.key() == a) {
        known = true;
        break;
      }
    if (!known) {
      std::string keys;
      for (const char* a : allowed) {
        if (!keys.empty()) keys += ", ";
        keys += a;
      }
      throw ValidationError("config: unknown key '" + item.key() + "' in " +
                            where + " (allowed: " + keys + ")");
    }
  }
}

inline void check_style_keys(const nlohmann::json& j,
                             const std::string& where) {
  check_keys(j, where, {"hue", "vessel", "brightness", "gamma", "noise",
                        "blur"});
}

inline void check_augment_keys(const nlohmann::json& j,
                               const std::string& where) {
  check_keys(j, where,
             {"rotation", "max_rotation_deg", "flip", "flip_prob", "elastic",
              "elastic_grid", "elastic_max_disp", "contrast", "contrast_lo",
              "contrast_hi", "noise", "noise_sigma", "erasing", "erasing_prob",
              "erase_frac_lo", "erase_frac_hi"});
}

inline void check_disc_keys(const nlohmann::json& j, const std::string& where) {
  check_keys(j, where,
             {"in_channels", "base_channels", "n_layers", "leaky_slope"});
}

}  // namespace detail

// Strict parse: any key the schema does not know is an error, recursively.
// The net section accepts "preset": "tiny" | "full", applied before the
// remaining keys; when the train section does not pin its own crop_size it
// follows the net's.
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  detail::check_keys(j, "config",
                     {"data", "train_data", "test_data", "net", "disc_b",
                      "disc_e", "train", "eval_threshold", "out_dir"});
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d, "data",
                       {"n_source", "n_target", "size", "seed", "source_style",
                        "target_style"});
    if (d.contains("source_style"))
      detail::check_style_keys(d.at("source_style"), "data.source_style");
    if (d.contains("target_style"))
      detail::check_style_keys(d.at("target_style"), "data.target_style");
    d.get_to(c.data);
  }
  if (j.contains("train_data"))
    c.train_data = j.at("train_data").get<std::string>();
  if (j.contains("test_data"))
    c.test_data = j.at("test_data").get<std::string>();
  if (j.contains("net")) {
    const auto& n = j.at("net");
    detail::check_keys(n, "net",
                       {"preset", "crop_size", "encoder_width_multiplier",
                        "encoder_depth", "aspp_rates",
                        "boundary_branch_channels", "decoder_channels",
                        "tiny_mode", "use_boundary_branch"});
    if (n.contains("preset")) {
      const std::string preset = n.at("preset").get<std::string>();
      if (preset == "tiny")
        c.net = segnet::SegNetConfig::tiny();
      else if (preset == "full")
        c.net = segnet::SegNetConfig::full();
      else
        throw ValidationError("config: net.preset must be 'tiny' or 'full', got '" +
                              preset + "'");
    }
    n.get_to(c.net);
  }
  if (j.contains("disc_b")) {
    detail::check_disc_keys(j.at("disc_b"), "disc_b");
    adversary::DiscConfig d = adversary::DiscConfig::boundary(c.net.tiny_mode);
    j.at("disc_b").get_to(d);
    c.disc_b = d;
  }
  if (j.contains("disc_e")) {
    detail::check_disc_keys(j.at("disc_e"), "disc_e");
    adversary::DiscConfig d = adversary::DiscConfig::entropy(c.net.tiny_mode);
    j.at("disc_e").get_to(d);
    c.disc_e = d;
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::check_keys(t, "train",
                       {"epochs", "batch_size", "seg_lr", "seg_lr_decay",
                        "seg_lr_decay_every", "disc_lr", "lambda", "seed",
                        "crop_size", "checkpoint_every", "use_bal", "use_eal",
                        "boundary_sigma", "augment"});
    if (t.contains("augment"))
      detail::check_augment_keys(t.at("augment"), "train.augment");
    t.get_to(c.train);
    if (!t.contains("crop_size")) c.train.crop_size = c.net.crop_size;
  } else {
    c.train.crop_size = c.net.crop_size;
  }
  if (j.contains("eval_threshold"))
    j.at("eval_threshold").get_to(c.eval_threshold);
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"data", c.data},
                     {"train_data", c.train_data.string()},
                     {"test_data", c.test_data.string()},
                     {"net", c.net},
                     {"train", c.train},
                     {"eval_threshold", c.eval_threshold},
                     {"out_dir", c.out_dir.string()}};
  if (c.disc_b) j["disc_b"] = *c.disc_b;
  if (c.disc_e) j["disc_e"] = *c.disc_e;
}

// Parse a config file; IO problems and malformed JSON are validation errors
// (the caller supplied a bad input, nothing was running yet).
inline ExperimentConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw ValidationError("config: cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config: " + path.string() + " is not valid JSON: " +
                          e.what());
  }
  try {
    return j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config: " + path.string() + ": " + e.what());
  }
}

// Default output root, overridable through the environment. Relative output
// paths land under it; absolute paths are used as given.
inline std::filesystem::path out_root() {
  if (const char* env = std::getenv("BEAL_OUT_ROOT"); env && *env)
    return std::filesystem::path(env);
  return std::filesystem::path(".");
}

inline std::filesystem::path resolve_output(const std::filesystem::path& p) {
  if (p.empty())
    throw ValidationError("config: no output directory given");
  return p.is_absolute() ? p : out_root() / p;
}

}  // namespace beal::config
