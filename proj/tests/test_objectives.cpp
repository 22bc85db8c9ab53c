#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "beal/adversary.hpp"
#include "beal/objectives.hpp"
#include "beal/rng.hpp"
#include "beal/tensor.hpp"

using beal::Rng;
using beal::Tensor;
using beal::ValidationError;
using beal::adversary::DiscConfig;
using beal::adversary::PatchDiscriminator;
namespace obj = beal::objectives;

namespace {

Tensor<double> random_probs(std::vector<std::int64_t> shape, std::uint64_t seed,
                            double lo = 0.05, double hi = 0.95) {
  Tensor<double> t(std::move(shape));
  Rng rng(seed);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// independent scalar reference: BCE of sigmoid(x) against label y
double scalar_bce_logit(double x, double y) {
  const double p = 1.0 / (1.0 + std::exp(-x));
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

void zero_params(PatchDiscriminator<double>& d) {
  for (auto* p : d.params()) p->value.zero();
}

Tensor<double> duplicate_batch(const Tensor<double>& x) {
  Tensor<double> y({x.dim(0) * 2, x.dim(1), x.dim(2), x.dim(3)});
  const std::int64_t per = x.numel() / x.dim(0);
  for (std::int64_t n = 0; n < x.dim(0); ++n)
    for (std::int64_t i = 0; i < per; ++i) {
      y[n * per + i] = x[n * per + i];
      y[(x.dim(0) + n) * per + i] = x[n * per + i];
    }
  return y;
}

}  // namespace

TEST_CASE("entropy map closed forms") {
  Tensor<double> p({1, 2, 1, 2});
  p[0] = 1.0;
  p[1] = std::exp(-1.0);
  p[2] = 0.5;
  p[3] = 0.0;
  Tensor<double> e = obj::entropy_map(p);
  REQUIRE(e[0] == Catch::Approx(0.0).margin(1e-5));
  REQUIRE(e[1] == Catch::Approx(std::exp(-1.0)).epsilon(1e-12));
  REQUIRE(e[2] == Catch::Approx(0.5 * std::log(2.0)).epsilon(1e-12));
  REQUIRE(e[3] == Catch::Approx(0.0).margin(1e-5));
  for (std::int64_t i = 0; i < e.numel(); ++i) {
    REQUIRE(e[i] >= 0.0);
    REQUIRE(e[i] <= std::exp(-1.0) + 1e-12);
  }
}

TEST_CASE("entropy map maximizer sits at the grid point nearest 1/e") {
  double best_v = -1;
  int best_i = -1;
  for (int i = 1; i <= 99; ++i) {
    Tensor<double> p({1, 1, 1, 1});
    p[0] = i / 100.0;
    const double v = obj::entropy_map(p)[0];
    if (v > best_v) {
      best_v = v;
      best_i = i;
    }
  }
  // nearest grid point to e^-1 = 0.36788 is 0.37
  REQUIRE(best_i == 37);
}

TEST_CASE("entropy map gradient matches finite differences") {
  for (bool complement : {false, true}) {
    Tensor<double> p = random_probs({1, 2, 2, 2}, 64 + complement);
    Tensor<double> up(p.shape());
    Rng rng(9);
    for (std::int64_t i = 0; i < up.numel(); ++i) up[i] = rng.uniform(-1, 1);

    Tensor<double> grad = obj::entropy_map_backward(p, up, complement);
    const double h = 1e-6;
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      Tensor<double> pp = p, pm = p;
      pp[i] += h;
      pm[i] -= h;
      const auto ep = obj::entropy_map(pp, complement);
      const auto em = obj::entropy_map(pm, complement);
      double lp = 0, lm = 0;
      for (std::int64_t k = 0; k < ep.numel(); ++k) {
        lp += up[k] * ep[k];
        lm += up[k] * em[k];
      }
      const double fd = (lp - lm) / (2 * h);
      REQUIRE(fd == Catch::Approx(grad[i]).epsilon(1e-5).margin(1e-9));
    }
  }
}

TEST_CASE("entropy gradient is zeroed in the clamp zone") {
  Tensor<double> p({1, 1, 1, 2});
  p[0] = 0.0;
  p[1] = 1.0;
  Tensor<double> up(p.shape());
  up.fill(1.0);
  Tensor<double> g = obj::entropy_map_backward(p, up);
  REQUIRE(g[0] == 0.0);
  REQUIRE(g[1] == 0.0);
}

TEST_CASE("domain bce closed forms and scalar oracle") {
  Tensor<double> zeros({1, 1, 2, 2});
  REQUIRE(obj::domain_bce(zeros, 1.0) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  REQUIRE(obj::domain_bce(zeros, 0.0) == Catch::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor<double> sat({1, 1, 1, 1});
  sat[0] = 20.0;
  REQUIRE(obj::domain_bce(sat, 1.0) < 1e-8);

  // random 2x2 logit map against an independent scalar-by-scalar average
  Tensor<double> logits({1, 1, 2, 2});
  Rng rng(5);
  for (std::int64_t i = 0; i < 4; ++i) logits[i] = rng.uniform(-3, 3);
  for (double label : {0.0, 1.0}) {
    double oracle = 0;
    for (std::int64_t i = 0; i < 4; ++i)
      oracle += scalar_bce_logit(logits[i], label);
    oracle /= 4.0;
    REQUIRE(std::abs(obj::domain_bce(logits, label) - oracle) <= 1e-12);
  }

  Tensor<double> empty;
  REQUIRE_THROWS_AS(obj::domain_bce(empty, 1.0), ValidationError);
}

TEST_CASE("domain bce gradient matches finite differences") {
  Tensor<double> logits({2, 1, 2, 2});
  Rng rng(6);
  for (std::int64_t i = 0; i < logits.numel(); ++i)
    logits[i] = rng.uniform(-2, 2);
  Tensor<double> grad;
  obj::domain_bce(logits, 1.0, &grad);
  const double h = 1e-6;
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    Tensor<double> lp = logits, lm = logits;
    lp[i] += h;
    lm[i] -= h;
    const double fd =
        (obj::domain_bce(lp, 1.0) - obj::domain_bce(lm, 1.0)) / (2 * h);
    REQUIRE(fd == Catch::Approx(grad[i]).epsilon(1e-6).margin(1e-10));
  }
}

TEST_CASE("mask loss closed forms and scalar oracle") {
  Tensor<double> od({1, 2, 2}), oc({1, 2, 2});
  od[0] = 1;
  od[1] = 1;
  od[2] = 0;
  od[3] = 1;
  oc[0] = 1;
  oc[1] = 0;
  oc[2] = 0;
  oc[3] = 0;

  SECTION("exact prediction gives near-zero loss") {
    Tensor<double> p({1, 2, 2, 2});
    for (std::int64_t j = 0; j < 4; ++j) {
      p[j] = od[j];
      p[4 + j] = oc[j];
    }
    REQUIRE(obj::mask_loss(p, od, oc) < 1e-5);
  }
  SECTION("uniform 0.5 prediction gives log 2") {
    Tensor<double> p({1, 2, 2, 2});
    p.fill(0.5);
    REQUIRE(obj::mask_loss(p, od, oc) ==
            Catch::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SECTION("random case equals the scalar oracle") {
    Tensor<double> p = random_probs({1, 2, 3, 3}, 8);
    Tensor<double> od3({1, 3, 3}), oc3({1, 3, 3});
    Rng rng(13);
    for (std::int64_t i = 0; i < 9; ++i) {
      od3[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
      oc3[i] = od3[i] > 0.5 && rng.uniform() < 0.5 ? 1.0 : 0.0;
    }
    double oracle = 0;
    for (std::int64_t i = 0; i < 9; ++i) {
      oracle -= od3[i] * std::log(p[i]) + (1 - od3[i]) * std::log(1 - p[i]);
      oracle -=
          oc3[i] * std::log(p[9 + i]) + (1 - oc3[i]) * std::log(1 - p[9 + i]);
    }
    oracle /= 18.0;
    REQUIRE(std::abs(obj::mask_loss(p, od3, oc3) - oracle) <= 1e-12);
  }
  SECTION("missing labels are a hard failure") {
    Tensor<double> p({1, 2, 2, 2});
    p.fill(0.5);
    REQUIRE_THROWS_AS(obj::mask_loss(p, Tensor<double>(), oc),
                      ValidationError);
  }
}

TEST_CASE("mask loss gradient matches finite differences") {
  Tensor<double> p = random_probs({2, 2, 2, 2}, 91);
  Tensor<double> od({2, 2, 2}), oc({2, 2, 2});
  Rng rng(14);
  for (std::int64_t i = 0; i < od.numel(); ++i) {
    od[i] = rng.uniform() < 0.6 ? 1.0 : 0.0;
    oc[i] = od[i] > 0.5 && rng.uniform() < 0.5 ? 1.0 : 0.0;
  }
  Tensor<double> grad;
  obj::mask_loss(p, od, oc, &grad);
  const double h = 1e-6;
  for (std::int64_t i = 0; i < p.numel(); ++i) {
    Tensor<double> pp = p, pm = p;
    pp[i] += h;
    pm[i] -= h;
    const double fd =
        (obj::mask_loss(pp, od, oc) - obj::mask_loss(pm, od, oc)) / (2 * h);
    REQUIRE(fd == Catch::Approx(grad[i]).epsilon(1e-5).margin(1e-9));
  }
}

TEST_CASE("boundary loss closed forms and oracle") {
  Tensor<double> a({1, 1, 2, 2}), b({1, 1, 2, 2});
  a.fill(0.7);
  b.fill(0.7);
  REQUIRE(obj::boundary_loss(a, b) == 0.0);

  a.zero();
  b.fill(1.0);
  REQUIRE(obj::boundary_loss(a, b) == Catch::Approx(1.0).epsilon(1e-15));

  Rng rng(3);
  for (std::int64_t i = 0; i < 4; ++i) {
    a[i] = rng.uniform();
    b[i] = rng.uniform();
  }
  double oracle = 0;
  for (std::int64_t i = 0; i < 4; ++i) oracle += (a[i] - b[i]) * (a[i] - b[i]);
  oracle /= 4.0;
  REQUIRE(std::abs(obj::boundary_loss(a, b) - oracle) <= 1e-12);

  Tensor<double> wrong({1, 1, 2, 3});
  REQUIRE_THROWS_AS(obj::boundary_loss(a, wrong), ValidationError);

  Tensor<double> grad;
  obj::boundary_loss(a, b, &grad);
  const double h = 1e-6;
  for (std::int64_t i = 0; i < 4; ++i) {
    Tensor<double> ap = a, am = a;
    ap[i] += h;
    am[i] -= h;
    const double fd =
        (obj::boundary_loss(ap, b) - obj::boundary_loss(am, b)) / (2 * h);
    REQUIRE(fd == Catch::Approx(grad[i]).epsilon(1e-6).margin(1e-10));
  }
}

TEST_CASE("discriminator objective closed forms") {
  PatchDiscriminator<double> d(DiscConfig::boundary(true));
  d.init(2);
  zero_params(d);  // constant 0 logits regardless of input

  Tensor<double> src = random_probs({2, 1, 32, 32}, 10);
  Tensor<double> tgt = random_probs({3, 1, 32, 32}, 11);
  const double l =
      obj::discriminator_objective(d, src, tgt, /*accumulate_grads=*/false);
  REQUIRE(l == Catch::Approx(2 * std::log(2.0)).epsilon(1e-12));

  // perfect saturation: bce(+20, 1) + bce(-20, 0)
  Tensor<double> hi({1, 1, 1, 1}), lo({1, 1, 1, 1});
  hi[0] = 20.0;
  lo[0] = -20.0;
  REQUIRE(obj::domain_bce(hi, 1.0) + obj::domain_bce(lo, 0.0) < 1e-7);

  Tensor<double> empty;
  REQUIRE_THROWS_AS(obj::discriminator_objective(d, empty, tgt),
                    ValidationError);
  REQUIRE_THROWS_AS(obj::discriminator_objective(d, src, empty),
                    ValidationError);
}

TEST_CASE("discriminator objective equals the per-sample scalar oracle") {
  PatchDiscriminator<double> d(DiscConfig::boundary(true));
  d.init(19);
  Tensor<double> src = random_probs({2, 1, 32, 32}, 20);
  Tensor<double> tgt = random_probs({3, 1, 32, 32}, 21);

  auto per_sample_mean_bce = [&](const Tensor<double>& batch, double label) {
    const std::int64_t per = batch.numel() / batch.dim(0);
    double total = 0;
    for (std::int64_t n = 0; n < batch.dim(0); ++n) {
      Tensor<double> one({1, batch.dim(1), batch.dim(2), batch.dim(3)});
      for (std::int64_t i = 0; i < per; ++i) one[i] = batch[n * per + i];
      auto logits = d.forward(one).logits;
      double s = 0;
      for (std::int64_t i = 0; i < logits.numel(); ++i)
        s += scalar_bce_logit(logits[i], label);
      total += s / static_cast<double>(logits.numel());
    }
    return total / static_cast<double>(batch.dim(0));
  };

  const double oracle =
      per_sample_mean_bce(src, 1.0) + per_sample_mean_bce(tgt, 0.0);
  const double l = obj::discriminator_objective(d, src, tgt, false);
  REQUIRE(std::abs(l - oracle) <= 1e-12);
}

TEST_CASE("adversarial objective closed forms") {
  PatchDiscriminator<double> d(DiscConfig::boundary(true));
  d.init(4);
  Tensor<double> tgt = random_probs({2, 1, 32, 32}, 30);

  zero_params(d);
  REQUIRE(obj::adversarial_objective(d, tgt) ==
          Catch::Approx(std::log(2.0)).epsilon(1e-12));

  // discriminator already fooled: constant +20 logits via the final bias
  for (auto* p : d.params())
    if (p->name == "disc.conv4.bias") p->value.fill(20.0);
  REQUIRE(obj::adversarial_objective(d, tgt) < 1e-7);

  Tensor<double> empty;
  REQUIRE_THROWS_AS(obj::adversarial_objective(d, empty), ValidationError);
}

TEST_CASE("adversarial objective leaves discriminator gradients untouched") {
  PatchDiscriminator<double> d(DiscConfig::entropy(true));
  d.init(8);
  d.zero_grad();
  Tensor<double> tgt = random_probs({2, 2, 32, 32}, 31);
  Tensor<double> d_maps;
  obj::adversarial_objective(d, tgt, &d_maps);
  for (auto* p : d.params())
    for (std::int64_t i = 0; i < p->grad.numel(); ++i)
      REQUIRE(p->grad[i] == 0.0);
  REQUIRE(d_maps.shape() == tgt.shape());

  // while the discriminator objective does accumulate
  Tensor<double> src = random_probs({2, 2, 32, 32}, 32);
  obj::discriminator_objective(d, src, tgt, true);
  double mag = 0;
  for (auto* p : d.params())
    for (std::int64_t i = 0; i < p->grad.numel(); ++i) mag += std::abs(p->grad[i]);
  REQUIRE(mag > 0);
}

TEST_CASE("adversarial gradient through the entropy map matches finite differences") {
  PatchDiscriminator<double> d(DiscConfig::entropy(true));
  d.init(44);
  Tensor<double> mask_prob = random_probs({1, 2, 32, 32}, 45);

  auto loss_of = [&](const Tensor<double>& mp) {
    Tensor<double> e = obj::entropy_map(mp);
    return obj::adversarial_objective(d, e);
  };

  Tensor<double> e = obj::entropy_map(mask_prob);
  Tensor<double> d_e;
  obj::adversarial_objective(d, e, &d_e);
  Tensor<double> d_mask = obj::entropy_map_backward(mask_prob, d_e);

  Rng pick(46);
  const double h = 1e-5;
  for (int k = 0; k < 6; ++k) {
    const std::int64_t idx = static_cast<std::int64_t>(
        pick.below(static_cast<std::uint64_t>(mask_prob.numel())));
    Tensor<double> mp = mask_prob, mm = mask_prob;
    mp[idx] += h;
    mm[idx] -= h;
    const double fd = (loss_of(mp) - loss_of(mm)) / (2 * h);
    const double scale = std::max({std::abs(fd), std::abs(d_mask[idx]), 1e-10});
    INFO("idx=" << idx << " fd=" << fd << " analytic=" << d_mask[idx]);
    REQUIRE(std::abs(fd - d_mask[idx]) / scale < 1e-3);
  }
}

TEST_CASE("losses are invariant to batch duplication") {
  PatchDiscriminator<double> d(DiscConfig::boundary(true));
  d.init(55);
  Tensor<double> src = random_probs({2, 1, 32, 32}, 56);
  Tensor<double> tgt = random_probs({2, 1, 32, 32}, 57);

  const double l1 = obj::discriminator_objective(d, src, tgt, false);
  const double l2 = obj::discriminator_objective(d, duplicate_batch(src),
                                                 duplicate_batch(tgt), false);
  REQUIRE(std::abs(l1 - l2) <= 1e-12);

  const double a1 = obj::adversarial_objective(d, tgt);
  const double a2 = obj::adversarial_objective(d, duplicate_batch(tgt));
  REQUIRE(std::abs(a1 - a2) <= 1e-12);

  Tensor<double> p = random_probs({2, 2, 4, 4}, 58);
  Tensor<double> od({2, 4, 4}), oc({2, 4, 4});
  Rng rng(59);
  for (std::int64_t i = 0; i < od.numel(); ++i) {
    od[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    oc[i] = 0.0;
  }
  Tensor<double> od2({4, 4, 4}), oc2({4, 4, 4});
  for (std::int64_t i = 0; i < od.numel(); ++i) {
    od2[i] = od[i];
    od2[od.numel() + i] = od[i];
  }
  const double m1 = obj::mask_loss(p, od, oc);
  const double m2 = obj::mask_loss(duplicate_batch(p), od2, oc2);
  REQUIRE(std::abs(m1 - m2) <= 1e-12);

  Tensor<double> bt = random_probs({2, 1, 4, 4}, 60);
  Tensor<double> bp = random_probs({2, 1, 4, 4}, 61);
  REQUIRE(std::abs(obj::boundary_loss(bp, bt) -
                   obj::boundary_loss(duplicate_batch(bp),
                                      duplicate_batch(bt))) <= 1e-12);
}

TEST_CASE("total objective assembly") {
  auto r0 = obj::total_seg_objective(0.3, 0.1, 0.7, 0.7, 0.0);
  REQUIRE(r0.total_seg == 0.3 + 0.1);

  auto r1 = obj::total_seg_objective(1.0, 1.0, 1.0, 1.0, 1.0);
  REQUIRE(r1.total_seg == Catch::Approx(4.0).epsilon(1e-15));

  auto r = obj::total_seg_objective(0.3, 0.1, 0.7, 0.7, 0.01);
  REQUIRE(r.total_seg == Catch::Approx(0.414).epsilon(1e-12));
  REQUIRE(r.all_finite());
  REQUIRE(r.l_mask == 0.3);
  REQUIRE(r.l_db == 0.0);

  auto rn = obj::total_seg_objective(
      std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0, 0.0, 0.0);
  REQUIRE_FALSE(rn.all_finite());
}

TEST_CASE("losses are non-negative on clamped inputs") {
  Rng rng(71);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<double> p = random_probs({1, 2, 3, 3}, 100 + trial, 0.001, 0.999);
    Tensor<double> od({1, 3, 3}), oc({1, 3, 3});
    for (std::int64_t i = 0; i < 9; ++i) {
      od[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
      oc[i] = 0.0;
    }
    REQUIRE(obj::mask_loss(p, od, oc) >= 0.0);
    Tensor<double> b = random_probs({1, 1, 3, 3}, 200 + trial, 0, 1);
    Tensor<double> bt = random_probs({1, 1, 3, 3}, 300 + trial, 0, 1);
    REQUIRE(obj::boundary_loss(b, bt) >= 0.0);
    Tensor<double> logits({1, 1, 2, 2});
    for (std::int64_t i = 0; i < 4; ++i) logits[i] = rng.uniform(-5, 5);
    REQUIRE(obj::domain_bce(logits, 1.0) >= 0.0);
    REQUIRE(obj::domain_bce(logits, 0.0) >= 0.0);
  }
}
