#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "beal/rng.hpp"
#include "beal/segnet.hpp"
#include "beal/tensor.hpp"

using beal::Rng;
using beal::Tensor;
using beal::ValidationError;
using beal::segnet::SegNet;
using beal::segnet::SegNetConfig;
using beal::segnet::SegOutput;

namespace {

Tensor<double> random_image(std::int64_t n, std::int64_t size, std::uint64_t seed) {
  Tensor<double> img({n, 3, size, size});
  Rng rng(seed);
  for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("segnet config validation") {
  SegNetConfig c = SegNetConfig::tiny();
  REQUIRE_NOTHROW(c.validate());

  SECTION("boundary branch must be three convs ending in one channel") {
    c.boundary_branch_channels = {64, 64, 2};
    REQUIRE_THROWS_AS(c.validate(), ValidationError);
    c.boundary_branch_channels = {64, 1};
    REQUIRE_THROWS_AS(c.validate(), ValidationError);
  }
  SECTION("aspp rates strictly increasing") {
    c.aspp_rates = {1, 3, 3};
    REQUIRE_THROWS_AS(c.validate(), ValidationError);
    c.aspp_rates = {};
    REQUIRE_THROWS_AS(c.validate(), ValidationError);
  }
  SECTION("encoder depth lower bound") {
    c.encoder_depth = 1;
    REQUIRE_THROWS_AS(c.validate(), ValidationError);
  }
  SECTION("tiny preset stride") {
    REQUIRE(SegNetConfig::tiny().total_stride() == 8);
    REQUIRE(SegNetConfig::full().total_stride() == 32);
  }
}

TEST_CASE("segnet init is deterministic and finite") {
  SegNet<double> a(SegNetConfig::tiny());
  SegNet<double> b(SegNetConfig::tiny());
  a.init(99);
  b.init(99);
  auto pa = a.params();
  auto pb = b.params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i]->name == pb[i]->name);
    REQUIRE(pa[i]->value.all_finite());
    REQUIRE(pa[i]->value.numel() == pb[i]->value.numel());
    for (std::int64_t k = 0; k < pa[i]->value.numel(); ++k)
      REQUIRE(pa[i]->value[k] == pb[i]->value[k]);
  }

  SegNet<double> c(SegNetConfig::tiny());
  c.init(100);
  bool any_diff = false;
  auto pc = c.params();
  for (std::size_t i = 0; i < pa.size() && !any_diff; ++i)
    for (std::int64_t k = 0; k < pa[i]->value.numel(); ++k)
      if (pa[i]->value[k] != pc[i]->value[k]) {
        any_diff = true;
        break;
      }
  REQUIRE(any_diff);
}

TEST_CASE("tiny network is far smaller than full network") {
  SegNet<double> tiny(SegNetConfig::tiny());
  SegNet<double> full(SegNetConfig::full());
  const auto n_tiny = tiny.param_count();
  const auto n_full = full.param_count();
  INFO("tiny=" << n_tiny << " full=" << n_full);
  REQUIRE(n_tiny > 0);
  REQUIRE(n_tiny * 20 < n_full);
}

TEST_CASE("segnet forward shape and range contract") {
  SegNet<double> net(SegNetConfig::tiny());
  net.init(7);
  Tensor<double> img = random_image(2, 128, 21);
  SegOutput<double> out = net.forward(img, beal::nn::Mode::Train);

  REQUIRE(out.boundary.shape() == std::vector<std::int64_t>{2, 1, 128, 128});
  REQUIRE(out.mask_prob.shape() == std::vector<std::int64_t>{2, 2, 128, 128});
  for (std::int64_t i = 0; i < out.boundary.numel(); ++i) {
    REQUIRE(out.boundary[i] >= 0.0);
    REQUIRE(out.boundary[i] <= 1.0);
  }
  for (std::int64_t i = 0; i < out.mask_prob.numel(); ++i) {
    REQUIRE(out.mask_prob[i] > 0.0);
    REQUIRE(out.mask_prob[i] < 1.0);
  }
}

TEST_CASE("segnet output size follows input size") {
  SegNet<double> net(SegNetConfig::tiny());
  net.init(3);
  for (std::int64_t size : {128, 160}) {
    Tensor<double> img = random_image(1, size, 40 + size);
    SegOutput<double> out = net.forward(img, beal::nn::Mode::Eval);
    REQUIRE(out.boundary.dim(2) == size);
    REQUIRE(out.boundary.dim(3) == size);
    REQUIRE(out.mask_prob.dim(2) == size);
    REQUIRE(out.mask_prob.dim(3) == size);
  }
}

TEST_CASE("segnet rejects sizes not divisible by the encoder stride") {
  SegNet<double> net(SegNetConfig::tiny());
  net.init(3);
  Tensor<double> img = random_image(1, 100, 5);
  REQUIRE_THROWS_WITH(net.forward(img, beal::nn::Mode::Eval),
                      Catch::Matchers::ContainsSubstring("multiple"));
  Tensor<double> bad_channels({1, 1, 128, 128});
  REQUIRE_THROWS_AS(net.forward(bad_channels, beal::nn::Mode::Eval),
                    ValidationError);
}

TEST_CASE("boundary branch structure: three convs, two norm pairs, sigmoid") {
  SegNet<double> net(SegNetConfig::tiny());
  auto params = net.params();

  std::vector<std::string> conv_weights;
  std::vector<std::string> bn_gammas;
  for (auto* p : params) {
    if (p->name.rfind("boundary.conv", 0) == 0 &&
        p->name.find(".weight") != std::string::npos)
      conv_weights.push_back(p->name);
    if (p->name.rfind("boundary.bn", 0) == 0 &&
        p->name.find(".gamma") != std::string::npos)
      bn_gammas.push_back(p->name);
  }
  REQUIRE(conv_weights == std::vector<std::string>{"boundary.conv0.weight",
                                                   "boundary.conv1.weight",
                                                   "boundary.conv2.weight"});
  REQUIRE(bn_gammas ==
          std::vector<std::string>{"boundary.bn0.gamma", "boundary.bn1.gamma"});

  // last conv maps to a single channel and its output passes through a
  // sigmoid: the network-level range contract already pins [0,1]
  for (auto* p : params)
    if (p->name == "boundary.conv2.weight") REQUIRE(p->value.dim(0) == 1);
}

TEST_CASE("mask branch consumes boundary prediction as an extra channel") {
  SegNetConfig cfg = SegNetConfig::tiny();
  SegNet<double> net(cfg);
  bool found = false;
  for (auto* p : net.params())
    if (p->name == "mask.conv.weight") {
      found = true;
      // weight stored as (out_c, in_c * k * k) with k = 3
      REQUIRE(p->value.dim(0) == 2);
      REQUIRE(p->value.dim(1) == (cfg.decoder_channels + 1) * 9);
    }
  REQUIRE(found);

  SegNetConfig no_b = cfg;
  no_b.use_boundary_branch = false;
  SegNet<double> net2(no_b);
  for (auto* p : net2.params()) {
    REQUIRE(p->name.rfind("boundary.", 0) != 0);
    if (p->name == "mask.conv.weight")
      REQUIRE(p->value.dim(1) == cfg.decoder_channels * 9);
  }
}

TEST_CASE("perturbing the boundary head changes the mask output") {
  SegNetConfig cfg = SegNetConfig::tiny();
  SegNet<double> net(cfg);
  net.init(11);
  Tensor<double> img = random_image(1, 64, 17);

  SegOutput<double> before = net.forward(img, beal::nn::Mode::Eval);
  for (auto* p : net.params())
    if (p->name == "boundary.conv2.bias") p->value[0] += 0.5;
  SegOutput<double> after = net.forward(img, beal::nn::Mode::Eval);

  double max_mask_diff = 0, max_bnd_diff = 0;
  for (std::int64_t i = 0; i < before.mask_prob.numel(); ++i)
    max_mask_diff = std::max(
        max_mask_diff, std::abs(before.mask_prob[i] - after.mask_prob[i]));
  for (std::int64_t i = 0; i < before.boundary.numel(); ++i)
    max_bnd_diff = std::max(
        max_bnd_diff, std::abs(before.boundary[i] - after.boundary[i]));
  REQUIRE(max_bnd_diff > 1e-6);
  REQUIRE(max_mask_diff > 1e-8);
}

TEST_CASE("segnet without boundary branch still segments") {
  SegNetConfig cfg = SegNetConfig::tiny();
  cfg.use_boundary_branch = false;
  SegNet<double> net(cfg);
  net.init(5);
  Tensor<double> img = random_image(1, 64, 3);
  SegOutput<double> out = net.forward(img, beal::nn::Mode::Train);
  REQUIRE(out.boundary.empty());
  REQUIRE(out.mask_prob.shape() == std::vector<std::int64_t>{1, 2, 64, 64});

  // mask-only backward must run and touch encoder parameters
  net.zero_grad();
  Tensor<double> d_mask(out.mask_prob.shape());
  d_mask.fill(1.0 / static_cast<double>(d_mask.numel()));
  net.backward(Tensor<double>(), d_mask);
  double grad_mag = 0;
  for (auto* p : net.params())
    for (std::int64_t i = 0; i < p->grad.numel(); ++i)
      grad_mag += std::abs(p->grad[i]);
  REQUIRE(grad_mag > 0);
}

TEST_CASE("segnet analytic gradients match finite differences") {
  SegNetConfig cfg = SegNetConfig::tiny();
  SegNet<double> net(cfg);
  net.init(123);
  Tensor<double> img = random_image(1, 32, 77);

  // scalar readout: fixed random weighting of both outputs
  Rng wrng(4242);
  auto loss_of = [&](SegOutput<double>& out, const Tensor<double>& wb,
                     const Tensor<double>& wm) {
    double s = 0;
    for (std::int64_t i = 0; i < out.boundary.numel(); ++i)
      s += wb[i] * out.boundary[i];
    for (std::int64_t i = 0; i < out.mask_prob.numel(); ++i)
      s += wm[i] * out.mask_prob[i];
    return s;
  };

  SegOutput<double> probe = net.forward(img, beal::nn::Mode::Train, false);
  Tensor<double> wb(probe.boundary.shape()), wm(probe.mask_prob.shape());
  for (std::int64_t i = 0; i < wb.numel(); ++i) wb[i] = wrng.uniform(-1, 1);
  for (std::int64_t i = 0; i < wm.numel(); ++i) wm[i] = wrng.uniform(-1, 1);

  net.zero_grad();
  SegOutput<double> out = net.forward(img, beal::nn::Mode::Train, false);
  net.backward(wb, wm);

  auto params = net.params();
  Rng pick(555);
  // h balances truncation against roundoff: train-mode batchnorm couples
  // batch statistics across the whole graph and makes the loss extremely
  // curved along whole-channel directions, so a coarser step underresolves it
  const double h = 1e-5;
  int checked = 0;
  while (checked < 12) {
    auto* p = params[pick.below(params.size())];
    const std::int64_t idx = static_cast<std::int64_t>(
        pick.below(static_cast<std::uint64_t>(p->value.numel())));
    const double saved = p->value[idx];

    p->value[idx] = saved + h;
    SegOutput<double> op = net.forward(img, beal::nn::Mode::Train, false);
    const double lp = loss_of(op, wb, wm);
    p->value[idx] = saved - h;
    SegOutput<double> om = net.forward(img, beal::nn::Mode::Train, false);
    const double lm = loss_of(om, wb, wm);
    p->value[idx] = saved;

    const double fd = (lp - lm) / (2 * h);
    const double an = p->grad[idx];
    const double scale = std::max({std::abs(fd), std::abs(an), 1e-6});
    INFO(p->name << "[" << idx << "] fd=" << fd << " analytic=" << an);
    REQUIRE(std::abs(fd - an) / scale < 1e-3);
    ++checked;
  }
}
