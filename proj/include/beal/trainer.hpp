#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "beal/adversary.hpp"
#include "beal/checkpoint.hpp"
#include "beal/objectives.hpp"
#include "beal/optim.hpp"
#include "beal/preprocess.hpp"
#include "beal/rng.hpp"
#include "beal/segnet.hpp"
#include "beal/synthdata.hpp"
#include "beal/tensor.hpp"

namespace beal::trainer {

struct TrainConfig {
  std::int64_t epochs = 200;
  std::int64_t batch_size = 8;       // tiny-scale runs use 4
  double seg_lr = 1e-3;
  double seg_lr_decay = 0.2;
  std::int64_t seg_lr_decay_every = 100;  // epochs
  double disc_lr = 2.5e-5;           // constant, no schedule
  double lambda_adv = 0.01;
  std::uint64_t seed = 1;
  std::int64_t crop_size = 512;
  std::int64_t checkpoint_every = 0;  // epochs; 0 = final checkpoint only
  bool use_bal = true;                // boundary-driven adversarial term + D_b
  bool use_eal = true;                // entropy-driven adversarial term + D_e
  double boundary_sigma = 0;          // 0 = size-scaled default
  preprocess::AugmentPolicy augment;

  double effective_boundary_sigma() const {
    return boundary_sigma > 0 ? boundary_sigma
                              : preprocess::default_boundary_sigma(crop_size);
  }

  void validate() const {
    if (epochs < 1) throw ValidationError("TrainConfig: epochs must be >= 1");
    if (batch_size < 1)
      throw ValidationError("TrainConfig: batch_size must be >= 1");
    if (seg_lr <= 0 || disc_lr <= 0)
      throw ValidationError("TrainConfig: learning rates must be > 0");
    if (seg_lr_decay <= 0 || seg_lr_decay_every < 1)
      throw ValidationError("TrainConfig: invalid learning-rate schedule");
    if (lambda_adv < 0)
      throw ValidationError("TrainConfig: lambda must be >= 0");
    if (crop_size < 8 || checkpoint_every < 0 || boundary_sigma < 0)
      throw ValidationError("TrainConfig: invalid sizes");
    augment.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"seg_lr", c.seg_lr},
                     {"seg_lr_decay", c.seg_lr_decay},
                     {"seg_lr_decay_every", c.seg_lr_decay_every},
                     {"disc_lr", c.disc_lr},
                     {"lambda", c.lambda_adv},
                     {"seed", c.seed},
                     {"crop_size", c.crop_size},
                     {"checkpoint_every", c.checkpoint_every},
                     {"use_bal", c.use_bal},
                     {"use_eal", c.use_eal},
                     {"boundary_sigma", c.boundary_sigma},
                     {"augment", c.augment}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("seg_lr", c.seg_lr);
  get("seg_lr_decay", c.seg_lr_decay);
  get("seg_lr_decay_every", c.seg_lr_decay_every);
  get("disc_lr", c.disc_lr);
  get("lambda", c.lambda_adv);
  get("seed", c.seed);
  get("crop_size", c.crop_size);
  get("checkpoint_every", c.checkpoint_every);
  get("use_bal", c.use_bal);
  get("use_eal", c.use_eal);
  get("boundary_sigma", c.boundary_sigma);
  get("augment", c.augment);
}

// seg lr decays by a fixed factor on a fixed epoch schedule; disc lr is flat
inline std::pair<double, double> lr_schedule(std::int64_t epoch,
                                             const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw ValidationError("lr_schedule: epoch out of range");
  const double seg =
      cfg.seg_lr * std::pow(cfg.seg_lr_decay,
                            static_cast<double>(epoch / cfg.seg_lr_decay_every));
  return {seg, cfg.disc_lr};
}

template <typename T>
struct Batch {
  Tensor<T> images;    // (N,3,H,W)
  Tensor<T> od, oc;    // (N,H,W); empty for the unlabeled role
  Tensor<T> boundary;  // (N,1,H,W); empty when the branch is off
  bool empty() const { return images.empty(); }
  std::int64_t size() const { return images.empty() ? 0 : images.dim(0); }
};

// Alternating optimization: (a) segmentation step on the combined objective
// with both discriminators frozen, (b) D_b step on detached boundary maps,
// (c) D_e step on detached entropy maps.
template <typename T>
class Trainer {
 public:
  using EpochHook = std::function<nlohmann::json(std::int64_t epoch)>;
  using PhaseHook = std::function<void(char phase)>;

  // The discriminator configurations default to the paper architecture
  // (scaled down in tiny mode); passing overrides mostly matters for
  // capacity experiments.
  Trainer(const segnet::SegNetConfig& net_cfg, const TrainConfig& cfg,
          std::optional<adversary::DiscConfig> disc_b_cfg = std::nullopt,
          std::optional<adversary::DiscConfig> disc_e_cfg = std::nullopt)
      : net_cfg_(net_cfg),
        cfg_(cfg),
        net_(net_cfg),
        data_rng_(hash_combine(cfg.seed, 0xda7aULL)) {
    cfg_.validate();
    if (cfg_.use_bal && !net_cfg_.use_boundary_branch)
      throw ValidationError(
          "TrainConfig: the boundary adversarial term requires the boundary "
          "branch");
    net_.init(hash_combine(cfg_.seed, 0x5e6ULL));
    seg_opt_.emplace(net_.params());
    if (cfg_.use_bal) {
      disc_b_cfg_ =
          disc_b_cfg.value_or(adversary::DiscConfig::boundary(net_cfg_.tiny_mode));
      disc_b_cfg_.validate();
      if (disc_b_cfg_.in_channels != 1)
        throw ValidationError(
            "Trainer: the boundary discriminator reads a 1-channel map");
      disc_b_.emplace(disc_b_cfg_);
      disc_b_->init(hash_combine(cfg_.seed, 0xd6ULL));
      db_opt_.emplace(disc_b_->params());
    }
    if (cfg_.use_eal) {
      disc_e_cfg_ =
          disc_e_cfg.value_or(adversary::DiscConfig::entropy(net_cfg_.tiny_mode));
      disc_e_cfg_.validate();
      if (disc_e_cfg_.in_channels != 2)
        throw ValidationError(
            "Trainer: the entropy discriminator reads a 2-channel map");
      disc_e_.emplace(disc_e_cfg_);
      disc_e_->init(hash_combine(cfg_.seed, 0xdeULL));
      de_opt_.emplace(disc_e_->params());
    }
  }

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  segnet::SegNet<T>& net() { return net_; }
  adversary::PatchDiscriminator<T>* disc_b() {
    return disc_b_ ? &*disc_b_ : nullptr;
  }
  adversary::PatchDiscriminator<T>* disc_e() {
    return disc_e_ ? &*disc_e_ : nullptr;
  }
  const TrainConfig& config() const { return cfg_; }
  const segnet::SegNetConfig& net_config() const { return net_cfg_; }
  const adversary::DiscConfig& disc_b_config() const { return disc_b_cfg_; }
  const adversary::DiscConfig& disc_e_config() const { return disc_e_cfg_; }
  std::int64_t epoch() const { return epoch_; }
  std::int64_t iteration() const { return iteration_; }
  void set_phase_hook(PhaseHook hook) { phase_hook_ = std::move(hook); }

  objectives::LossReport<T> train_step(const Batch<T>& source,
                                       const Batch<T>& target) {
    const bool adversarial = cfg_.use_bal || cfg_.use_eal;
    if (source.empty())
      throw ValidationError("train_step: empty source batch");
    if (adversarial && target.empty())
      throw ValidationError(
          "train_step: adversarial training requires a target batch");
    const auto [seg_lr, disc_lr] =
        lr_schedule(std::min(epoch_, cfg_.epochs - 1), cfg_);
    const T lambda = static_cast<T>(cfg_.lambda_adv);

    // phase (a): segmentation update, discriminators frozen
    net_.zero_grad();
    segnet::SegOutput<T> src_out =
        net_.forward(source.images, nn::Mode::Train, true);
    Tensor<T> d_mask, d_boundary;
    const T l_mask =
        objectives::mask_loss(src_out.mask_prob, source.od, source.oc, &d_mask);
    abort_non_finite(l_mask, "l_mask");
    T l_boundary = T(0);
    if (net_cfg_.use_boundary_branch) {
      l_boundary = objectives::boundary_loss(src_out.boundary, source.boundary,
                                             &d_boundary);
      abort_non_finite(l_boundary, "l_boundary");
    }
    net_.backward(d_boundary, d_mask);

    T l_adv_b = T(0), l_adv_e = T(0);
    Tensor<T> tgt_boundary, tgt_mask;
    if (adversarial) {
      segnet::SegOutput<T> tgt_out =
          net_.forward(target.images, nn::Mode::Train, true);
      Tensor<T> d_tgt_boundary, d_tgt_mask;
      if (cfg_.use_bal) {
        l_adv_b = objectives::adversarial_objective(*disc_b_, tgt_out.boundary,
                                                    &d_tgt_boundary);
        abort_non_finite(l_adv_b, "l_adv_b");
        d_tgt_boundary *= lambda;
      }
      if (cfg_.use_eal) {
        Tensor<T> ent = objectives::entropy_map(tgt_out.mask_prob);
        Tensor<T> d_ent;
        l_adv_e = objectives::adversarial_objective(*disc_e_, ent, &d_ent);
        abort_non_finite(l_adv_e, "l_adv_e");
        d_tgt_mask = objectives::entropy_map_backward(tgt_out.mask_prob, d_ent);
        d_tgt_mask *= lambda;
      }
      net_.backward(d_tgt_boundary, d_tgt_mask);
      tgt_boundary = std::move(tgt_out.boundary);
      tgt_mask = std::move(tgt_out.mask_prob);
    }
    seg_opt_->step(static_cast<T>(seg_lr));
    net_.zero_grad();
    if (phase_hook_) phase_hook_('a');

    // phase (b): boundary discriminator on detached maps
    T l_db = T(0);
    if (cfg_.use_bal) {
      disc_b_->zero_grad();
      l_db = objectives::discriminator_objective(*disc_b_, src_out.boundary,
                                                 tgt_boundary, true);
      abort_non_finite(l_db, "l_db");
      db_opt_->step(static_cast<T>(disc_lr));
      disc_b_->zero_grad();
    }
    if (phase_hook_) phase_hook_('b');

    // phase (c): entropy discriminator on detached maps
    T l_de = T(0);
    if (cfg_.use_eal) {
      disc_e_->zero_grad();
      Tensor<T> ent_src = objectives::entropy_map(src_out.mask_prob);
      Tensor<T> ent_tgt = objectives::entropy_map(tgt_mask);
      l_de = objectives::discriminator_objective(*disc_e_, ent_src, ent_tgt,
                                                 true);
      abort_non_finite(l_de, "l_de");
      de_opt_->step(static_cast<T>(disc_lr));
      disc_e_->zero_grad();
    }
    if (phase_hook_) phase_hook_('c');

    ++iteration_;
    return objectives::total_seg_objective(l_mask, l_boundary, l_adv_b,
                                           l_adv_e, lambda, l_db, l_de);
  }

  // Runs the remaining epochs over the given sample roles. The labeled role
  // drives the supervised losses; the unlabeled role feeds the adversarial
  // terms through images alone. A supervised run on target-domain labels (the
  // ablation upper bound) passes those indices through the labeled role; any
  // other target-domain label access is an error.
  void fit(const synthdata::Dataset& data,
           const std::vector<std::size_t>& labeled_role,
           const std::vector<std::size_t>& unlabeled_role,
           const std::filesystem::path& out_dir,
           const EpochHook& epoch_hook = nullptr) {
    namespace fs = std::filesystem;
    const bool adversarial = cfg_.use_bal || cfg_.use_eal;
    if (labeled_role.empty())
      throw ValidationError("fit: labeled role has no samples");
    if (adversarial && unlabeled_role.empty())
      throw ValidationError(
          "fit: adversarial training requires unlabeled target samples");
    fs::create_directories(out_dir);
    std::ofstream metrics(out_dir / "metrics.jsonl",
                          epoch_ == 0 ? std::ios::trunc : std::ios::app);
    if (!metrics)
      throw RuntimeFailure("cannot write metrics log in " + out_dir.string());

    const std::int64_t before_reads = data.target_label_reads();
    std::int64_t sanctioned_reads = 0;

    const std::int64_t bs = cfg_.batch_size;
    auto ceil_div = [](std::int64_t a, std::int64_t b) {
      return (a + b - 1) / b;
    };
    const std::int64_t steps = std::max(
        ceil_div(static_cast<std::int64_t>(labeled_role.size()), bs),
        adversarial ? ceil_div(static_cast<std::int64_t>(unlabeled_role.size()),
                               bs)
                    : std::int64_t(0));

    Cycler labeled{labeled_role, {}, 0};
    Cycler unlabeled{unlabeled_role, {}, 0};
    for (; epoch_ < cfg_.epochs;) {
      labeled.reshuffle(data_rng_);
      if (adversarial) unlabeled.reshuffle(data_rng_);
      for (std::int64_t s = 0; s < steps; ++s) {
        const Batch<T> sb =
            make_labeled_batch(data, labeled.next(bs, data_rng_),
                               &sanctioned_reads);
        Batch<T> tb;
        if (adversarial)
          tb = make_image_batch(data, unlabeled.next(bs, data_rng_));
        const objectives::LossReport<T> r = train_step(sb, tb);

        nlohmann::json rec;
        rec["iteration"] = iteration_;
        rec["epoch"] = epoch_;
        rec["l_mask"] = static_cast<double>(r.l_mask);
        rec["l_boundary"] = static_cast<double>(r.l_boundary);
        rec["l_adv_b"] = static_cast<double>(r.l_adv_b);
        rec["l_adv_e"] = static_cast<double>(r.l_adv_e);
        rec["l_db"] = static_cast<double>(r.l_db);
        rec["l_de"] = static_cast<double>(r.l_de);
        rec["seg_lr"] = lr_schedule(epoch_, cfg_).first;
        metrics << rec.dump() << "\n";
      }
      ++epoch_;
      nlohmann::json erec;
      erec["epoch"] = epoch_;
      erec["event"] = "epoch_end";
      if (epoch_hook) erec["eval"] = epoch_hook(epoch_);
      metrics << erec.dump() << "\n";
      metrics.flush();
      if (cfg_.checkpoint_every > 0 && epoch_ % cfg_.checkpoint_every == 0 &&
          epoch_ < cfg_.epochs)
        save(out_dir / epoch_checkpoint_name(epoch_));
    }
    save(out_dir / "final.ckpt");

    const std::int64_t reads = data.target_label_reads() - before_reads;
    if (reads != sanctioned_reads)
      throw RuntimeFailure(
          "fit: target-domain labels were read " + std::to_string(reads) +
          " times but only " + std::to_string(sanctioned_reads) +
          " reads were sanctioned by the labeled role");
  }

  // convenience wrapper: source domain is the labeled role
  void fit(const synthdata::Dataset& data, const std::filesystem::path& out_dir,
           const EpochHook& epoch_hook = nullptr) {
    fit(data, data.domain_indices(synthdata::Domain::Source),
        data.domain_indices(synthdata::Domain::Target), out_dir, epoch_hook);
  }

  static std::string epoch_checkpoint_name(std::int64_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "epoch_%04lld.ckpt",
                  static_cast<long long>(epoch));
    return buf;
  }

  void save(const std::filesystem::path& path) {
    nlohmann::json meta;
    meta["format"] = "beal-train-state";
    meta["epoch"] = epoch_;
    meta["iteration"] = iteration_;
    meta["adam_t"] = seg_opt_->step_count();
    meta["rng_state"] = data_rng_.state();
    meta["segnet_config"] = net_cfg_;
    meta["train_config"] = cfg_;
    if (disc_b_) meta["disc_b_config"] = disc_b_cfg_;
    if (disc_e_) meta["disc_e_config"] = disc_e_cfg_;
    std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
    collect_tensors([&](const std::string& name, Tensor<T>* t) {
      tensors.emplace_back(name, t);
    });
    ckpt::save_checkpoint(path, meta, tensors);
  }

  void load(const std::filesystem::path& path) {
    const ckpt::Checkpoint<T> ck = ckpt::load_checkpoint<T>(path);
    if (ck.meta.value("format", "") != "beal-train-state")
      throw RuntimeFailure("not a training checkpoint: " + path.string());
    const nlohmann::json want = net_cfg_;
    if (ck.meta.contains("segnet_config") && ck.meta.at("segnet_config") != want)
      throw RuntimeFailure(
          "checkpoint was written with a different network configuration: " +
          path.string());
    if (disc_b_ && ck.meta.contains("disc_b_config") &&
        ck.meta.at("disc_b_config") != nlohmann::json(disc_b_cfg_))
      throw RuntimeFailure(
          "checkpoint was written with a different boundary-discriminator "
          "configuration: " +
          path.string());
    if (disc_e_ && ck.meta.contains("disc_e_config") &&
        ck.meta.at("disc_e_config") != nlohmann::json(disc_e_cfg_))
      throw RuntimeFailure(
          "checkpoint was written with a different entropy-discriminator "
          "configuration: " +
          path.string());
    std::vector<std::pair<std::string, Tensor<T>*>> dests;
    collect_tensors([&](const std::string& name, Tensor<T>* t) {
      dests.emplace_back(name, t);
    });
    ckpt::restore_tensors(ck, dests);
    epoch_ = ck.meta.at("epoch");
    iteration_ = ck.meta.at("iteration");
    seg_opt_->set_step_count(ck.meta.at("adam_t"));
    std::array<std::uint64_t, 4> rs{};
    ck.meta.at("rng_state").get_to(rs);
    data_rng_.set_state(rs);
  }

  Batch<T> make_labeled_batch(const synthdata::Dataset& data,
                              const std::vector<std::size_t>& ids,
                              std::int64_t* sanctioned_target_reads = nullptr) {
    Batch<T> b;
    const std::int64_t n = static_cast<std::int64_t>(ids.size());
    const std::int64_t c = cfg_.crop_size;
    b.images = Tensor<T>({n, 3, c, c});
    b.od = Tensor<T>({n, c, c});
    b.oc = Tensor<T>({n, c, c});
    if (net_cfg_.use_boundary_branch) b.boundary = Tensor<T>({n, 1, c, c});
    for (std::int64_t j = 0; j < n; ++j) {
      if (sanctioned_target_reads &&
          data.entry(ids[j]).domain == synthdata::Domain::Target)
        ++*sanctioned_target_reads;
      synthdata::FundusSample s = data.load_labeled(ids[j]);
      s = preprocess::crop_roi(s, c);
      preprocess::BoundaryTarget bt;
      if (net_cfg_.use_boundary_branch)
        bt = preprocess::make_boundary_target(s.od_mask, s.oc_mask,
                                              cfg_.effective_boundary_sigma());
      std::tie(s, bt) =
          preprocess::augment(s, bt, cfg_.augment, data_rng_.next_u64());
      copy_cast(s.image, b.images, j * 3 * c * c);
      copy_cast(s.od_mask, b.od, j * c * c);
      copy_cast(s.oc_mask, b.oc, j * c * c);
      if (net_cfg_.use_boundary_branch) copy_cast(bt.map, b.boundary, j * c * c);
    }
    return b;
  }

  Batch<T> make_image_batch(const synthdata::Dataset& data,
                            const std::vector<std::size_t>& ids) {
    Batch<T> b;
    const std::int64_t n = static_cast<std::int64_t>(ids.size());
    const std::int64_t c = cfg_.crop_size;
    b.images = Tensor<T>({n, 3, c, c});
    for (std::int64_t j = 0; j < n; ++j) {
      synthdata::FundusSample s = data.load_image(ids[j]);
      s = preprocess::crop_roi(s, c);
      preprocess::BoundaryTarget none;
      std::tie(s, none) =
          preprocess::augment(s, none, cfg_.augment, data_rng_.next_u64());
      copy_cast(s.image, b.images, j * 3 * c * c);
    }
    return b;
  }

 private:
  struct Cycler {
    std::vector<std::size_t> base;
    std::vector<std::size_t> ids;
    std::size_t pos = 0;
    // Each shuffle starts from the pristine role order so the epoch order is
    // a pure function of the rng state, which is what makes training
    // resumable from a checkpoint.
    void reshuffle(Rng& rng) {
      ids = base;
      rng.shuffle(ids);
      pos = 0;
    }
    std::vector<std::size_t> next(std::int64_t n, Rng& rng) {
      std::vector<std::size_t> out;
      if (ids.empty()) return out;
      if (pos >= ids.size()) reshuffle(rng);
      while (static_cast<std::int64_t>(out.size()) < n && pos < ids.size())
        out.push_back(ids[pos++]);
      return out;
    }
  };

  void abort_non_finite(T v, const char* term) const {
    if (!std::isfinite(static_cast<double>(v)))
      throw RuntimeFailure(std::string("non-finite ") + term +
                           " at iteration " + std::to_string(iteration_));
  }

  template <typename Fn>
  void collect_tensors(Fn&& fn) {
    for (auto* p : net_.params()) fn("seg." + p->name, &p->value);
    for (auto* b : net_.buffers()) fn("seg." + b->name, &b->value);
    for (auto& [name, t] : seg_opt_->state_tensors()) fn("seg." + name, t);
    if (disc_b_)
      for (auto* p : disc_b_->params()) fn("db." + p->name, &p->value);
    if (disc_e_)
      for (auto* p : disc_e_->params()) fn("de." + p->name, &p->value);
  }

  static void copy_cast(const Tensor<double>& src, Tensor<T>& dst,
                        std::int64_t offset) {
    for (std::int64_t i = 0; i < src.numel(); ++i)
      dst[offset + i] = static_cast<T>(src[i]);
  }

  segnet::SegNetConfig net_cfg_;
  TrainConfig cfg_;
  adversary::DiscConfig disc_b_cfg_, disc_e_cfg_;
  segnet::SegNet<T> net_;
  std::optional<adversary::PatchDiscriminator<T>> disc_b_, disc_e_;
  std::optional<optim::Adam<T>> seg_opt_;
  std::optional<optim::Sgd<T>> db_opt_, de_opt_;
  Rng data_rng_;
  std::int64_t epoch_ = 0;
  std::int64_t iteration_ = 0;
  PhaseHook phase_hook_;
};

}  // namespace beal::trainer
