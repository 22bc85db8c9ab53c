#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "beal/checkpoint.hpp"
#include "beal/config.hpp"
#include "beal/evalkit.hpp"
#include "beal/synthdata.hpp"
#include "beal/trainer.hpp"

namespace fs = std::filesystem;

namespace {

// a boolean flag that remembers whether it was given on the command line
struct Flag {
  bool value = false;
  CLI::Option* opt = nullptr;
  bool given() const { return opt != nullptr && opt->count() > 0; }
};

struct TrainOverrides {
  std::optional<std::int64_t> epochs, batch_size, crop_size, checkpoint_every;
  std::optional<double> lambda, seg_lr, disc_lr;
  std::optional<std::uint64_t> seed;
  Flag bal, eal, boundary, tiny, augment;
};

void add_train_flags(CLI::App* cmd, TrainOverrides& o) {
  cmd->add_option("--epochs", o.epochs, "training epochs");
  cmd->add_option("--batch-size", o.batch_size, "samples per step");
  cmd->add_option("--crop-size", o.crop_size,
                  "square ROI side in pixels (applies to net and trainer)");
  cmd->add_option("--seed", o.seed, "experiment seed");
  cmd->add_option("--lambda", o.lambda, "adversarial loss weight");
  cmd->add_option("--seg-lr", o.seg_lr, "segmenter learning rate");
  cmd->add_option("--disc-lr", o.disc_lr, "discriminator learning rate");
  cmd->add_option("--checkpoint-every", o.checkpoint_every,
                  "save every N epochs (0 = final checkpoint only)");
  o.bal.opt = cmd->add_flag("--bal,!--no-bal", o.bal.value,
                            "boundary adversarial term");
  o.eal.opt = cmd->add_flag("--eal,!--no-eal", o.eal.value,
                            "entropy adversarial term");
  o.boundary.opt = cmd->add_flag("--boundary-branch,!--no-boundary-branch",
                                 o.boundary.value,
                                 "boundary regression branch");
  o.tiny.opt = cmd->add_flag("--tiny,!--full", o.tiny.value,
                             "desk-scale (or paper-scale) network preset");
  o.augment.opt = cmd->add_flag("--augment,!--no-augment", o.augment.value,
                                "training-time augmentation");
}

void apply_overrides(beal::config::ExperimentConfig& cfg,
                     const TrainOverrides& o) {
  if (o.tiny.given()) {
    cfg.net = o.tiny.value ? beal::segnet::SegNetConfig::tiny()
                           : beal::segnet::SegNetConfig::full();
    cfg.train.crop_size = cfg.net.crop_size;
  }
  if (o.crop_size) {
    cfg.net.crop_size = *o.crop_size;
    cfg.train.crop_size = *o.crop_size;
  }
  if (o.boundary.given()) cfg.net.use_boundary_branch = o.boundary.value;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.batch_size) cfg.train.batch_size = *o.batch_size;
  if (o.checkpoint_every) cfg.train.checkpoint_every = *o.checkpoint_every;
  if (o.lambda) cfg.train.lambda_adv = *o.lambda;
  if (o.seg_lr) cfg.train.seg_lr = *o.seg_lr;
  if (o.disc_lr) cfg.train.disc_lr = *o.disc_lr;
  if (o.seed) {
    cfg.train.seed = *o.seed;
    cfg.data.seed = *o.seed;
  }
  if (o.bal.given()) cfg.train.use_bal = o.bal.value;
  if (o.eal.given()) cfg.train.use_eal = o.eal.value;
  if (o.augment.given())
    cfg.train.augment = o.augment.value
                            ? beal::preprocess::AugmentPolicy{}
                            : beal::preprocess::AugmentPolicy::disabled();
}

beal::config::ExperimentConfig load_or_default(const std::string& path) {
  if (path.empty()) return {};
  return beal::config::load_config_file(path);
}

std::vector<std::size_t> split_indices(const beal::synthdata::Dataset& data,
                                       const std::string& split) {
  if (split == "target")
    return data.domain_indices(beal::synthdata::Domain::Target);
  if (split == "source")
    return data.domain_indices(beal::synthdata::Domain::Source);
  if (split == "all") {
    std::vector<std::size_t> ids(data.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    return ids;
  }
  throw beal::ValidationError("eval: --split must be target, source or all");
}

std::vector<beal::evalkit::ConfigTag> parse_only(const std::string& csv) {
  std::vector<beal::evalkit::ConfigTag> tags;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) tags.push_back(beal::evalkit::tag_from_name(item));
  return tags;
}

int cmd_generate(const beal::config::ExperimentConfig& cfg,
                 const std::string& out, bool force) {
  const fs::path dir = beal::config::resolve_output(
      out.empty() ? cfg.train_data : fs::path(out));
  beal::synthdata::generate_dataset(cfg.data, dir, force);
  std::cout << "wrote " << (cfg.data.n_source + cfg.data.n_target)
            << " samples to " << dir.string() << "\n";
  return 0;
}

int cmd_train(beal::config::ExperimentConfig cfg, const std::string& data,
              const std::string& out, const std::string& resume) {
  if (!data.empty()) cfg.train_data = data;
  if (!out.empty()) cfg.out_dir = out;
  if (cfg.train_data.empty())
    throw beal::ValidationError(
        "train: no training dataset (set train_data in the config or pass "
        "--data)");
  cfg.validate();
  const fs::path out_dir = beal::config::resolve_output(cfg.out_dir);
  const beal::synthdata::Dataset train_set(cfg.train_data);
  beal::trainer::Trainer<float> t(cfg.net, cfg.train, cfg.disc_b, cfg.disc_e);
  if (!resume.empty()) t.load(resume);
  t.fit(train_set, out_dir);
  std::cout << "trained to epoch " << t.epoch() << " ("
            << t.iteration() << " iterations); checkpoint at "
            << (out_dir / "final.ckpt").string() << "\n";
  return 0;
}

int cmd_eval(const beal::config::ExperimentConfig& cfg,
             const std::string& checkpoint, const std::string& data,
             const std::string& out, const std::string& split,
             std::optional<double> threshold, bool emit_visuals,
             const std::string& tag_str) {
  const auto ck = beal::ckpt::load_checkpoint<float>(checkpoint);
  if (ck.meta.value("format", "") != "beal-train-state")
    throw beal::RuntimeFailure("not a training checkpoint: " + checkpoint);
  const auto net_cfg =
      ck.meta.at("segnet_config").get<beal::segnet::SegNetConfig>();
  const auto train_cfg =
      ck.meta.at("train_config").get<beal::trainer::TrainConfig>();
  std::optional<beal::adversary::DiscConfig> db, de;
  if (ck.meta.contains("disc_b_config"))
    db = ck.meta.at("disc_b_config").get<beal::adversary::DiscConfig>();
  if (ck.meta.contains("disc_e_config"))
    de = ck.meta.at("disc_e_config").get<beal::adversary::DiscConfig>();

  beal::trainer::Trainer<float> t(net_cfg, train_cfg, db, de);
  t.load(checkpoint);

  const beal::synthdata::Dataset eval_set(data);
  const auto ids = split_indices(eval_set, split);
  const fs::path out_dir = beal::config::resolve_output(
      out.empty() ? cfg.out_dir : fs::path(out));
  const auto tag = beal::evalkit::tag_from_name(tag_str);
  const auto rep = beal::evalkit::evaluate(
      t.net(), eval_set, ids, train_cfg.crop_size, tag,
      threshold.value_or(cfg.eval_threshold),
      emit_visuals ? out_dir / "visuals" : fs::path());
  beal::evalkit::write_report(rep, out_dir);
  std::cout << "di_disc=" << rep.di_disc << " di_cup=" << rep.di_cup << " ("
            << rep.samples.size() << " samples, split=" << split << ")\n"
            << "report at " << (out_dir / "eval.tsv").string() << "\n";
  return 0;
}

int cmd_ablate(beal::config::ExperimentConfig cfg,
               const std::string& train_data, const std::string& test_data,
               const std::string& out, const std::string& only_csv,
               bool parallel) {
  if (!train_data.empty()) cfg.train_data = train_data;
  if (!test_data.empty()) cfg.test_data = test_data;
  if (!out.empty()) cfg.out_dir = out;
  if (cfg.train_data.empty() || cfg.test_data.empty())
    throw beal::ValidationError(
        "ablate: both a training and a test dataset are required (config "
        "train_data/test_data or --train-data/--test-data)");
  cfg.validate();
  const auto only = parse_only(only_csv);
  const fs::path out_dir = beal::config::resolve_output(cfg.out_dir);
  const auto rows = beal::evalkit::run_ablation<float>(
      cfg.net, cfg.train, cfg.train_data, cfg.test_data, out_dir, only,
      parallel);
  std::cout << "config\tdi_disc\tdi_cup\n";
  for (const auto& r : rows)
    std::cout << beal::evalkit::tag_name(r.tag) << "\t" << r.di_disc << "\t"
              << r.di_cup << "\n";
  std::cout << "table at " << (out_dir / "ablation.tsv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "beal: boundary- and entropy-driven adversarial learning for joint "
      "optic disc/cup segmentation"};
  app.require_subcommand(1);

  std::string gen_config, gen_out;
  bool gen_force = false;
  std::optional<std::int64_t> gen_n_source, gen_n_target, gen_size;
  std::optional<std::uint64_t> gen_seed;
  auto* gen = app.add_subcommand(
      "generate", "synthesize a two-domain fundus dataset");
  gen->add_option("--config", gen_config, "JSON experiment config");
  gen->add_option("--out", gen_out, "dataset directory to create");
  gen->add_option("--n-source", gen_n_source, "source-domain sample count");
  gen->add_option("--n-target", gen_n_target, "target-domain sample count");
  gen->add_option("--size", gen_size, "image side in pixels");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_flag("--force", gen_force, "replace an existing dataset directory");

  std::string train_config, train_data, train_out, train_resume;
  TrainOverrides train_o;
  auto* train = app.add_subcommand(
      "train", "fit the segmentation network (adversarial when bal/eal on)");
  train->add_option("--config", train_config, "JSON experiment config");
  train->add_option("--data", train_data, "training dataset directory");
  train->add_option("--out", train_out, "run directory for logs/checkpoints");
  train->add_option("--resume", train_resume, "checkpoint to continue from");
  add_train_flags(train, train_o);

  std::string eval_config, eval_ckpt, eval_data, eval_out, eval_split = "target";
  std::string eval_tag = "baseline";
  std::optional<double> eval_threshold;
  bool eval_visuals = false;
  auto* eval = app.add_subcommand(
      "eval", "score a checkpoint on a labeled dataset split");
  eval->add_option("--config", eval_config, "JSON experiment config");
  eval->add_option("--checkpoint", eval_ckpt, "trained checkpoint")
      ->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--out", eval_out, "report directory");
  eval->add_option("--split", eval_split, "target | source | all");
  eval->add_option("--threshold", eval_threshold,
                   "mask binarization threshold in (0,1)");
  eval->add_option("--tag", eval_tag, "configuration tag for the report");
  eval->add_flag("--emit-visuals", eval_visuals,
                 "write per-sample contour/entropy/boundary PNGs");

  std::string abl_config, abl_train_data, abl_test_data, abl_out, abl_only;
  bool abl_parallel = false;
  TrainOverrides abl_o;
  auto* ablate = app.add_subcommand(
      "ablate", "train and score every ablation configuration");
  ablate->add_option("--config", abl_config, "JSON experiment config");
  ablate->add_option("--train-data", abl_train_data,
                     "training dataset directory");
  ablate->add_option("--test-data", abl_test_data, "test dataset directory");
  ablate->add_option("--out", abl_out, "sweep directory");
  ablate->add_option("--only", abl_only,
                     "comma-separated subset of rows (e.g. bal,eal)");
  ablate->add_flag("--parallel", abl_parallel, "run configurations concurrently");
  add_train_flags(ablate, abl_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // bad flags are validation errors
  }

  try {
    if (gen->parsed()) {
      auto cfg = load_or_default(gen_config);
      if (gen_n_source) cfg.data.n_source = *gen_n_source;
      if (gen_n_target) cfg.data.n_target = *gen_n_target;
      if (gen_size) cfg.data.size = *gen_size;
      if (gen_seed) cfg.data.seed = *gen_seed;
      return cmd_generate(cfg, gen_out, gen_force);
    }
    if (train->parsed()) {
      auto cfg = load_or_default(train_config);
      apply_overrides(cfg, train_o);
      return cmd_train(std::move(cfg), train_data, train_out, train_resume);
    }
    if (eval->parsed()) {
      auto cfg = load_or_default(eval_config);
      return cmd_eval(cfg, eval_ckpt, eval_data, eval_out, eval_split,
                      eval_threshold, eval_visuals, eval_tag);
    }
    if (ablate->parsed()) {
      auto cfg = load_or_default(abl_config);
      apply_overrides(cfg, abl_o);
      return cmd_ablate(std::move(cfg), abl_train_data, abl_test_data, abl_out,
                        abl_only, abl_parallel);
    }
  } catch (const beal::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
