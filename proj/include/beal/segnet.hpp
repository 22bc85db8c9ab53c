#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "beal/nn.hpp"
#include "beal/rng.hpp"
#include "beal/tensor.hpp"

namespace beal::segnet {

struct SegNetConfig {
  std::int64_t crop_size = 512;
  double encoder_width_multiplier = 1.0;
  std::int64_t encoder_depth = 5;  // number of stride-2 stages, stem included
  std::vector<std::int64_t> aspp_rates = {1, 6, 12, 18};
  std::vector<std::int64_t> boundary_branch_channels = {256, 256, 1};
  std::int64_t decoder_channels = 256;
  bool tiny_mode = false;
  bool use_boundary_branch = true;

  static SegNetConfig full() { return SegNetConfig{}; }

  // Desk-scale preset: trains on CPU in minutes rather than GPU-days.
  static SegNetConfig tiny() {
    SegNetConfig c;
    c.crop_size = 128;
    c.encoder_width_multiplier = 0.25;
    c.encoder_depth = 3;
    c.aspp_rates = {1, 2, 3, 5};  // full-mode rates scaled by 1/4
    c.boundary_branch_channels = {48, 48, 1};
    c.decoder_channels = 48;
    c.tiny_mode = true;
    return c;
  }

  std::int64_t total_stride() const { return std::int64_t(1) << encoder_depth; }

  void validate() const {
    if (encoder_depth < 2)
      throw ValidationError("SegNetConfig: encoder_depth must be >= 2");
    if (aspp_rates.empty())
      throw ValidationError("SegNetConfig: aspp_rates must be nonempty");
    for (std::size_t i = 1; i < aspp_rates.size(); ++i)
      if (aspp_rates[i] <= aspp_rates[i - 1])
        throw ValidationError(
            "SegNetConfig: aspp_rates must be strictly increasing");
    if (boundary_branch_channels.size() != 3 ||
        boundary_branch_channels.back() != 1)
      throw ValidationError(
          "SegNetConfig: boundary branch is three conv layers ending in 1 "
          "channel");
    if (encoder_width_multiplier <= 0 || decoder_channels < 1 || crop_size < 8)
      throw ValidationError("SegNetConfig: invalid sizes");
  }
};

inline void to_json(nlohmann::json& j, const SegNetConfig& c) {
  j = nlohmann::json{{"crop_size", c.crop_size},
                     {"encoder_width_multiplier", c.encoder_width_multiplier},
                     {"encoder_depth", c.encoder_depth},
                     {"aspp_rates", c.aspp_rates},
                     {"boundary_branch_channels", c.boundary_branch_channels},
                     {"decoder_channels", c.decoder_channels},
                     {"tiny_mode", c.tiny_mode},
                     {"use_boundary_branch", c.use_boundary_branch}};
}

inline void from_json(const nlohmann::json& j, SegNetConfig& c) {
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("crop_size", c.crop_size);
  get("encoder_width_multiplier", c.encoder_width_multiplier);
  get("encoder_depth", c.encoder_depth);
  get("aspp_rates", c.aspp_rates);
  get("boundary_branch_channels", c.boundary_branch_channels);
  get("decoder_channels", c.decoder_channels);
  get("tiny_mode", c.tiny_mode);
  get("use_boundary_branch", c.use_boundary_branch);
}

template <typename T>
struct SegOutput {
  Tensor<T> boundary;   // (N,1,H,W) in [0,1]; empty when the branch is off
  Tensor<T> mask_prob;  // (N,2,H,W) in (0,1); channel 0 = OD, 1 = OC
};

namespace detail {

inline std::int64_t roundc(double base, double width) {
  return std::max<std::int64_t>(4, std::llround(base * width));
}

// MobileNetV2 building block: 1x1 expand -> 3x3 depthwise -> 1x1 project,
// with identity skip when stride 1 and matching channel counts.
template <typename T>
class InvertedResidual : public nn::Layer<T> {
 public:
  InvertedResidual(const std::string& name, std::int64_t in_c,
                   std::int64_t out_c, std::int64_t stride,
                   std::int64_t expand_ratio)
      : skip_(stride == 1 && in_c == out_c) {
    const std::int64_t mid = in_c * expand_ratio;
    if (expand_ratio != 1) {
      body_.template add<nn::Conv2d<T>>(name + ".expand", in_c, mid, 1, 1, 0, 1,
                                        false);
      body_.template add<nn::BatchNorm2d<T>>(name + ".expand_bn", mid);
      body_.template add<nn::ReLU6<T>>();
    }
    body_.template add<nn::DepthwiseConv2d<T>>(name + ".dw", mid, 3, stride, 1);
    body_.template add<nn::BatchNorm2d<T>>(name + ".dw_bn", mid);
    body_.template add<nn::ReLU6<T>>();
    body_.template add<nn::Conv2d<T>>(name + ".project", mid, out_c, 1, 1, 0, 1,
                                      false);
    body_.template add<nn::BatchNorm2d<T>>(name + ".project_bn", out_c);
  }

  Tensor<T> forward(const Tensor<T>& x, nn::Mode mode, bool us) override {
    Tensor<T> y = body_.forward(x, mode, us);
    if (skip_) y += x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool acc) override {
    Tensor<T> dx = body_.backward(dy, acc);
    if (skip_) dx += dy;
    return dx;
  }

  void collect_params(std::vector<nn::Param<T>*>& out) override {
    body_.collect_params(out);
  }
  void collect_buffers(std::vector<nn::Buffer<T>*>& out) override {
    body_.collect_buffers(out);
  }
  void init(Rng& rng) override { body_.init(rng); }

 private:
  nn::Sequential<T> body_;
  bool skip_;
};

}  // namespace detail

// Encoder-decoder segmentation network: depthwise-separable inverted-residual
// encoder, atrous spatial pyramid pooling, a low/high-level fusion decoder,
// a three-conv boundary regression branch, and a single-conv mask branch that
// consumes the boundary prediction concatenated with the shared features.
template <typename T>
class SegNet {
 public:
  explicit SegNet(SegNetConfig config) : cfg_(std::move(config)) {
    cfg_.validate();
    build();
  }

  const SegNetConfig& config() const { return cfg_; }

  void init(std::uint64_t seed) {
    Rng rng(hash_combine(seed, 0x5e67e7ULL));
    for (auto* layer : init_order_) layer->init(rng);
  }

  std::vector<nn::Param<T>*> params() {
    std::vector<nn::Param<T>*> out;
    for (auto* layer : init_order_) layer->collect_params(out);
    return out;
  }

  std::vector<nn::Buffer<T>*> buffers() {
    std::vector<nn::Buffer<T>*> out;
    for (auto* layer : init_order_) layer->collect_buffers(out);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->grad.zero();
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (auto* p : params()) n += p->value.numel();
    return n;
  }

  SegOutput<T> forward(const Tensor<T>& image, nn::Mode mode,
                       bool update_stats = true) {
    if (image.rank() != 4 || image.dim(1) != 3)
      throw ValidationError("SegNet::forward expects (N,3,H,W) input");
    const std::int64_t h = image.dim(2), w = image.dim(3);
    const std::int64_t stride = cfg_.total_stride();
    if (h % stride != 0 || w % stride != 0)
      throw ValidationError(
          "SegNet::forward: spatial size " + std::to_string(h) + "x" +
          std::to_string(w) + " not divisible by encoder stride " +
          std::to_string(stride) + "; pad input to a multiple of " +
          std::to_string(stride));

    Tensor<T> x = stem_.forward(image, mode, update_stats);
    x = block0_->forward(x, mode, update_stats);
    x = stages_[0]->forward(x, mode, update_stats);  // stride-4 tap
    Tensor<T> low = low_proj_.forward(x, mode, update_stats);
    for (std::size_t i = 1; i < stages_.size(); ++i)
      x = stages_[i]->forward(x, mode, update_stats);
    x = head_.forward(x, mode, update_stats);

    // ASPP: parallel dilated branches over the same feature map
    Tensor<T> aspp_cat;
    for (std::size_t i = 0; i < aspp_branches_.size(); ++i) {
      Tensor<T> b = aspp_branches_[i]->forward(x, mode, update_stats);
      aspp_cat = i == 0 ? std::move(b) : nn::concat_channels(aspp_cat, b);
    }
    Tensor<T> aspp = aspp_project_.forward(aspp_cat, mode, update_stats);

    up_to_low_.set_output_size(low.dim(2), low.dim(3));
    Tensor<T> up = up_to_low_.forward(aspp, mode, update_stats);
    Tensor<T> fused = nn::concat_channels(up, low);
    Tensor<T> feat = decoder_.forward(fused, mode, update_stats);

    SegOutput<T> out;
    Tensor<T> mask_in;
    if (cfg_.use_boundary_branch) {
      Tensor<T> b = boundary_branch_.forward(feat, mode, update_stats);
      boundary_low_ = b;  // post-sigmoid, decoder resolution
      mask_in = nn::concat_channels(feat, b);
      up_boundary_.set_output_size(h, w);
      out.boundary = up_boundary_.forward(b, mode, update_stats);
    } else {
      mask_in = feat;
    }
    Tensor<T> logits = mask_conv_->forward(mask_in, mode, update_stats);
    up_mask_.set_output_size(h, w);
    Tensor<T> up_logits = up_mask_.forward(logits, mode, update_stats);
    out.mask_prob = mask_sigmoid_.forward(up_logits, mode, update_stats);
    return out;
  }

  // Accumulates parameter gradients for d(loss)/d(boundary_out) and
  // d(loss)/d(mask_prob); either may be empty.
  void backward(const Tensor<T>& d_boundary, const Tensor<T>& d_mask_prob) {
    Tensor<T> d_feat;
    Tensor<T> d_blow;  // gradient reaching the decoder-resolution boundary map

    if (!d_mask_prob.empty()) {
      Tensor<T> d = mask_sigmoid_.backward(d_mask_prob, true);
      d = up_mask_.backward(d, true);
      d = mask_conv_->backward(d, true);
      if (cfg_.use_boundary_branch) {
        auto [df, db] = nn::split_channels(d, d.dim(1) - 1);
        d_feat = std::move(df);
        d_blow = std::move(db);
      } else {
        d_feat = std::move(d);
      }
    }
    if (cfg_.use_boundary_branch && !d_boundary.empty()) {
      Tensor<T> db = up_boundary_.backward(d_boundary, true);
      if (d_blow.empty())
        d_blow = std::move(db);
      else
        d_blow += db;
    }
    if (cfg_.use_boundary_branch && !d_blow.empty()) {
      Tensor<T> df = boundary_branch_.backward(d_blow, true);
      if (d_feat.empty())
        d_feat = std::move(df);
      else
        d_feat += df;
    }
    if (d_feat.empty()) return;

    Tensor<T> d_fused = decoder_.backward(d_feat, true);
    auto [d_up, d_low] = nn::split_channels(d_fused, aspp_out_channels_);
    Tensor<T> d_aspp = up_to_low_.backward(d_up, true);
    Tensor<T> d_cat = aspp_project_.backward(d_aspp, true);

    Tensor<T> d_x;
    for (auto& branch : aspp_branches_) {
      auto [head, rest] = nn::split_channels(d_cat, aspp_branch_channels_);
      Tensor<T> d_b = branch->backward(head, true);
      if (d_x.empty())
        d_x = std::move(d_b);
      else
        d_x += d_b;
      d_cat = std::move(rest);
    }
    d_x = head_.backward(d_x, true);
    for (std::size_t i = stages_.size(); i-- > 1;)
      d_x = stages_[i]->backward(d_x, true);
    Tensor<T> d_low_in = low_proj_.backward(d_low, true);
    d_x += d_low_in;
    d_x = stages_[0]->backward(d_x, true);
    d_x = block0_->backward(d_x, true);
    stem_.backward(d_x, true);  // input gradient not needed
  }

  // Decoder-resolution post-sigmoid boundary map from the latest forward.
  const Tensor<T>& boundary_low() const { return boundary_low_; }

 private:
  void build() {
    const double w = cfg_.encoder_width_multiplier;
    const std::int64_t c_stem = detail::roundc(32, w);
    const std::int64_t c_b0 = detail::roundc(16, w);
    const std::vector<double> stage_plan = {24, 32, 64, 96};

    stem_.template add<nn::Conv2d<T>>("encoder.stem.conv", 3, c_stem, 3, 2, 1,
                                      1, false, false);
    stem_.template add<nn::BatchNorm2d<T>>("encoder.stem.bn", c_stem);
    stem_.template add<nn::ReLU6<T>>();

    block0_ = std::make_unique<detail::InvertedResidual<T>>("encoder.block0",
                                                            c_stem, c_b0, 1, 1);
    std::int64_t c_prev = c_b0;
    std::int64_t c_low = 0;
    for (std::int64_t s = 0; s + 1 < cfg_.encoder_depth; ++s) {
      const std::int64_t c_out = detail::roundc(
          stage_plan[std::min<std::size_t>(s, stage_plan.size() - 1)], w);
      auto stage = std::make_unique<nn::Sequential<T>>();
      const std::string name = "encoder.stage" + std::to_string(s);
      stage->template add<detail::InvertedResidual<T>>(name + ".0", c_prev,
                                                       c_out, 2, 6);
      stage->template add<detail::InvertedResidual<T>>(name + ".1", c_out,
                                                       c_out, 1, 6);
      stages_.push_back(std::move(stage));
      if (s == 0) c_low = c_out;
      c_prev = c_out;
    }

    const std::int64_t c_head = detail::roundc(320, w);
    head_.template add<nn::Conv2d<T>>("encoder.head.conv", c_prev, c_head, 1, 1,
                                      0, 1, false);
    head_.template add<nn::BatchNorm2d<T>>("encoder.head.bn", c_head);
    head_.template add<nn::ReLU6<T>>();

    aspp_branch_channels_ = cfg_.decoder_channels;
    for (std::size_t i = 0; i < cfg_.aspp_rates.size(); ++i) {
      const std::int64_t rate = cfg_.aspp_rates[i];
      auto branch = std::make_unique<nn::Sequential<T>>();
      const std::string name = "aspp.branch" + std::to_string(i);
      if (rate == 1)
        branch->template add<nn::Conv2d<T>>(name + ".conv", c_head,
                                            aspp_branch_channels_, 1, 1, 0, 1,
                                            false);
      else
        branch->template add<nn::Conv2d<T>>(name + ".conv", c_head,
                                            aspp_branch_channels_, 3, 1, rate,
                                            rate, false);
      branch->template add<nn::BatchNorm2d<T>>(name + ".bn",
                                               aspp_branch_channels_);
      branch->template add<nn::ReLU<T>>();
      aspp_branches_.push_back(std::move(branch));
    }
    aspp_out_channels_ = aspp_branch_channels_;
    aspp_project_.template add<nn::Conv2d<T>>(
        "aspp.project.conv",
        aspp_branch_channels_ *
            static_cast<std::int64_t>(cfg_.aspp_rates.size()),
        aspp_out_channels_, 1, 1, 0, 1, false);
    aspp_project_.template add<nn::BatchNorm2d<T>>("aspp.project.bn",
                                                   aspp_out_channels_);
    aspp_project_.template add<nn::ReLU<T>>();

    const std::int64_t c_lowp = detail::roundc(48, w);
    low_proj_.template add<nn::Conv2d<T>>("decoder.low.conv", c_low, c_lowp, 1,
                                          1, 0, 1, false);
    low_proj_.template add<nn::BatchNorm2d<T>>("decoder.low.bn", c_lowp);
    low_proj_.template add<nn::ReLU<T>>();

    decoder_.template add<nn::Conv2d<T>>("decoder.fuse.conv",
                                         aspp_out_channels_ + c_lowp,
                                         cfg_.decoder_channels, 3, 1, 1, 1,
                                         false);
    decoder_.template add<nn::BatchNorm2d<T>>("decoder.fuse.bn",
                                              cfg_.decoder_channels);
    decoder_.template add<nn::ReLU<T>>();

    if (cfg_.use_boundary_branch) {
      const auto& bb = cfg_.boundary_branch_channels;
      boundary_branch_.template add<nn::Conv2d<T>>(
          "boundary.conv0", cfg_.decoder_channels, bb[0], 3, 1, 1);
      boundary_branch_.template add<nn::BatchNorm2d<T>>("boundary.bn0", bb[0]);
      boundary_branch_.template add<nn::ReLU<T>>();
      boundary_branch_.template add<nn::Conv2d<T>>("boundary.conv1", bb[0],
                                                   bb[1], 3, 1, 1);
      boundary_branch_.template add<nn::BatchNorm2d<T>>("boundary.bn1", bb[1]);
      boundary_branch_.template add<nn::ReLU<T>>();
      boundary_branch_.template add<nn::Conv2d<T>>("boundary.conv2", bb[1], 1,
                                                   1, 1, 0);
      boundary_branch_.template add<nn::Sigmoid<T>>();
    }

    const std::int64_t mask_in =
        cfg_.decoder_channels + (cfg_.use_boundary_branch ? 1 : 0);
    mask_conv_ = std::make_unique<nn::Conv2d<T>>("mask.conv", mask_in, 2, 3, 1,
                                                 1);

    init_order_ = {&stem_, block0_.get()};
    for (auto& s : stages_) init_order_.push_back(s.get());
    init_order_.push_back(&head_);
    for (auto& b : aspp_branches_) init_order_.push_back(b.get());
    init_order_.push_back(&aspp_project_);
    init_order_.push_back(&low_proj_);
    init_order_.push_back(&decoder_);
    if (cfg_.use_boundary_branch) init_order_.push_back(&boundary_branch_);
    init_order_.push_back(mask_conv_.get());
  }

  SegNetConfig cfg_;
  nn::Sequential<T> stem_;
  std::unique_ptr<detail::InvertedResidual<T>> block0_;
  std::vector<std::unique_ptr<nn::Sequential<T>>> stages_;
  nn::Sequential<T> head_;
  std::vector<std::unique_ptr<nn::Sequential<T>>> aspp_branches_;
  nn::Sequential<T> aspp_project_;
  nn::Sequential<T> low_proj_;
  nn::Sequential<T> decoder_;
  nn::Sequential<T> boundary_branch_;
  std::unique_ptr<nn::Conv2d<T>> mask_conv_;
  nn::BilinearUpsample<T> up_to_low_{1}, up_boundary_{1}, up_mask_{1};
  nn::Sigmoid<T> mask_sigmoid_;
  std::vector<nn::Layer<T>*> init_order_;

  std::int64_t aspp_branch_channels_ = 0, aspp_out_channels_ = 0;
  Tensor<T> boundary_low_;
};

}  // namespace beal::segnet
