#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "beal/checkpoint.hpp"
#include "beal/evalkit.hpp"
#include "beal/rng.hpp"
#include "beal/synthdata.hpp"
#include "beal/trainer.hpp"

namespace fs = std::filesystem;
using beal::Rng;
using beal::RuntimeFailure;
using beal::Tensor;
using beal::ValidationError;
using beal::evalkit::ConfigTag;
using beal::evalkit::dice;
using beal::evalkit::EvalReport;
using beal::evalkit::postprocess;
using beal::evalkit::tag_from_name;
using beal::evalkit::tag_name;

namespace {

beal::segnet::SegNetConfig tiny_net(std::int64_t crop = 32) {
  auto c = beal::segnet::SegNetConfig::tiny();
  c.crop_size = crop;
  return c;
}

beal::trainer::TrainConfig micro_train(std::int64_t epochs) {
  beal::trainer::TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 4;
  c.crop_size = 32;
  c.seed = 5;
  c.augment = beal::preprocess::AugmentPolicy::disabled();
  return c;
}

beal::synthdata::DatasetConfig small_data_cfg(std::int64_t n_source,
                                              std::int64_t n_target,
                                              std::uint64_t seed) {
  beal::synthdata::DatasetConfig cfg;
  cfg.n_source = n_source;
  cfg.n_target = n_target;
  cfg.size = 64;
  cfg.seed = seed;
  return cfg;
}

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("beal_evalkit_" + tag);
  fs::remove_all(p);
  return p;
}

Tensor<double> mask_from_bits(unsigned bits) {
  Tensor<double> m({3, 3});
  for (int i = 0; i < 9; ++i) m[i] = (bits >> i) & 1u ? 1.0 : 0.0;
  return m;
}

// probability plane pair (2,H,W): high inside the given 0/1 masks, low outside
Tensor<double> prob_from_masks(const Tensor<double>& od,
                               const Tensor<double>& oc) {
  const std::int64_t h = od.dim(0), w = od.dim(1);
  Tensor<double> p({2, h, w});
  for (std::int64_t i = 0; i < h * w; ++i) {
    p[i] = od[i] == 1.0 ? 0.9 : 0.1;
    p[h * w + i] = oc[i] == 1.0 ? 0.9 : 0.1;
  }
  return p;
}

std::int64_t count_nonzero(const Tensor<double>& m) {
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < m.numel(); ++i) n += m[i] != 0.0;
  return n;
}

}  // namespace

TEST_CASE("dice matches set counting on every 3x3 mask pair") {
  std::int64_t bad = 0;
  for (unsigned a = 0; a < 512; ++a) {
    const Tensor<double> ma = mask_from_bits(a);
    for (unsigned b = 0; b < 512; ++b) {
      const Tensor<double> mb = mask_from_bits(b);
      const int na = std::popcount(a), nb = std::popcount(b);
      const int inter = std::popcount(a & b);
      const double expect =
          na + nb == 0 ? 1.0 : 2.0 * inter / static_cast<double>(na + nb);
      if (std::abs(dice(ma, mb) - expect) > 1e-12) ++bad;
    }
  }
  REQUIRE(bad == 0);
}

TEST_CASE("dice is symmetric on random 16x16 pairs") {
  Rng rng(99);
  std::int64_t bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor<double> a({16, 16}), b({16, 16});
    const double pa = rng.uniform(), pb = rng.uniform();
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      a[i] = rng.uniform() < pa ? 1.0 : 0.0;
      b[i] = rng.uniform() < pb ? 1.0 : 0.0;
    }
    if (dice(a, b) != dice(b, a)) ++bad;
  }
  REQUIRE(bad == 0);
}

TEST_CASE("dice anchor values and input validation") {
  Tensor<double> a({3, 3}), b({3, 3});
  // top-left 2x2 block vs bottom-right 2x2 block: they share one pixel
  for (auto [y, x] : {std::pair{0, 0}, {0, 1}, {1, 0}, {1, 1}})
    a[y * 3 + x] = 1.0;
  for (auto [y, x] : {std::pair{1, 1}, {1, 2}, {2, 1}, {2, 2}})
    b[y * 3 + x] = 1.0;
  REQUIRE(dice(a, b) == Catch::Approx(0.25).margin(1e-15));
  REQUIRE(dice(a, a) == 1.0);

  Tensor<double> empty1({3, 3}), empty2({3, 3});
  REQUIRE(dice(empty1, empty2) == 1.0);
  REQUIRE(dice(a, empty1) == 0.0);

  Tensor<double> disjoint({3, 3});
  disjoint[2] = 1.0;  // (0,2) only; a is zero there
  REQUIRE(dice(a, disjoint) == 0.0);

  Tensor<double> soft({3, 3});
  soft[0] = 0.5;
  REQUIRE_THROWS_AS(dice(a, soft), ValidationError);
  REQUIRE_THROWS_WITH(dice(soft, a),
                      Catch::Matchers::ContainsSubstring("binary"));
  Tensor<double> other({2, 2});
  REQUIRE_THROWS_WITH(dice(a, other),
                      Catch::Matchers::ContainsSubstring("shape mismatch"));
}

TEST_CASE("postprocess thresholds and keeps one filled component per channel") {
  SECTION("uniform high probability fills the frame") {
    Tensor<double> p = Tensor<double>::full({2, 16, 16}, 0.9);
    auto [od, oc] = postprocess(p);
    REQUIRE(count_nonzero(od) == 16 * 16);
    REQUIRE(count_nonzero(oc) == 16 * 16);
  }

  SECTION("uniform low probability yields empty masks") {
    Tensor<double> p = Tensor<double>::full({2, 16, 16}, 0.1);
    auto [od, oc] = postprocess(p);
    REQUIRE(count_nonzero(od) == 0);
    REQUIRE(count_nonzero(oc) == 0);
  }

  SECTION("only the largest component survives") {
    Tensor<double> od({24, 24}), oc({24, 24});
    for (std::int64_t y = 2; y < 12; ++y)  // 10x10 = 100 px
      for (std::int64_t x = 2; x < 12; ++x) od[y * 24 + x] = 1.0;
    for (std::int64_t x = 18; x < 23; ++x) od[20 * 24 + x] = 1.0;  // 5 px
    auto [po, pc] = postprocess(prob_from_masks(od, oc));
    REQUIRE(count_nonzero(po) == 100);
    REQUIRE(po[20 * 24 + 18] == 0.0);
    REQUIRE(po[5 * 24 + 5] == 1.0);
    REQUIRE(count_nonzero(pc) == 0);
  }

  SECTION("an annulus is filled back to the rasterized disc") {
    const std::int64_t n = 32;
    const double cx = 16, cy = 16;
    Tensor<double> disc({n, n}), ring({n, n}), oc({n, n});
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x) {
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        disc[y * n + x] = r2 <= 100.0 ? 1.0 : 0.0;  // radius 10
        ring[y * n + x] = (r2 <= 100.0 && r2 > 36.0) ? 1.0 : 0.0;
      }
    auto [od, _] = postprocess(prob_from_masks(ring, oc));
    for (std::int64_t i = 0; i < n * n; ++i) REQUIRE(od[i] == disc[i]);
  }

  SECTION("the cup is clipped to the disc") {
    Tensor<double> od({16, 16}), oc({16, 16});
    for (std::int64_t y = 0; y < 8; ++y)
      for (std::int64_t x = 0; x < 16; ++x) od[y * 16 + x] = 1.0;
    for (std::int64_t y = 4; y < 12; ++y)  // straddles the disc edge
      for (std::int64_t x = 4; x < 12; ++x) oc[y * 16 + x] = 1.0;
    auto [po, pc] = postprocess(prob_from_masks(od, oc));
    REQUIRE(count_nonzero(pc) == 4 * 8);
    for (std::int64_t i = 0; i < 16 * 16; ++i)
      REQUIRE((pc[i] == 0.0 || po[i] == 1.0));
  }

  SECTION("threshold and shape validation") {
    Tensor<double> p = Tensor<double>::full({2, 4, 4}, 0.9);
    REQUIRE_THROWS_AS(postprocess(p, 0.0), ValidationError);
    REQUIRE_THROWS_AS(postprocess(p, 1.0), ValidationError);
    Tensor<double> bad({3, 4, 4});
    REQUIRE_THROWS_WITH(postprocess(bad),
                        Catch::Matchers::ContainsSubstring("(2,H,W)"));
  }
}

TEST_CASE("tag names round-trip and reject junk") {
  for (ConfigTag t : beal::evalkit::all_tags())
    REQUIRE(tag_from_name(tag_name(t)) == t);
  REQUIRE_THROWS_WITH(tag_from_name("bael"),
                      Catch::Matchers::ContainsSubstring("unknown ablation tag"));
}

TEST_CASE("evaluate scores an overfit model highly and is deterministic") {
  const fs::path data_dir = fresh_dir("overfit_data");
  beal::synthdata::generate_dataset(small_data_cfg(4, 1, 21), data_dir);
  beal::synthdata::Dataset data(data_dir);
  const auto src = data.domain_indices(beal::synthdata::Domain::Source);

  beal::trainer::TrainConfig cfg = micro_train(200);  // 1 step per epoch
  cfg.use_bal = false;
  cfg.use_eal = false;
  beal::trainer::Trainer<float> t(tiny_net(), cfg);
  const fs::path out = fresh_dir("overfit_out");
  t.fit(data, src, {}, out);

  const EvalReport r1 =
      beal::evalkit::evaluate(t.net(), data, src, 32, ConfigTag::upper_bound);
  INFO("di_disc=" << r1.di_disc << " di_cup=" << r1.di_cup);
  REQUIRE(r1.samples.size() == 4);
  REQUIRE(r1.di_disc >= 0.9);

  // aggregate rows are plain means of the per-sample columns
  double sd = 0, sc = 0;
  for (const auto& s : r1.samples) {
    REQUIRE(s.di_disc >= 0.0);
    REQUIRE(s.di_disc <= 1.0);
    REQUIRE(s.di_cup >= 0.0);
    REQUIRE(s.di_cup <= 1.0);
    sd += s.di_disc;
    sc += s.di_cup;
  }
  REQUIRE(std::abs(r1.di_disc - sd / 4.0) <= 1e-12);
  REQUIRE(std::abs(r1.di_cup - sc / 4.0) <= 1e-12);

  // evaluation mode is frozen: a second pass reproduces the report exactly
  const EvalReport r2 =
      beal::evalkit::evaluate(t.net(), data, src, 32, ConfigTag::upper_bound);
  REQUIRE(r1.di_disc == r2.di_disc);
  REQUIRE(r1.di_cup == r2.di_cup);
  for (std::size_t i = 0; i < r1.samples.size(); ++i) {
    REQUIRE(r1.samples[i].id == r2.samples[i].id);
    REQUIRE(r1.samples[i].di_disc == r2.samples[i].di_disc);
    REQUIRE(r1.samples[i].di_cup == r2.samples[i].di_cup);
  }

  REQUIRE_THROWS_WITH(beal::evalkit::evaluate(t.net(), data, {}, 32),
                      Catch::Matchers::ContainsSubstring("no samples"));

  // report files: TSV with per-sample rows plus a mean row, JSON round-trip
  beal::evalkit::write_report(r1, out);
  std::ifstream tsv(out / "eval.tsv");
  REQUIRE(tsv.good());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(tsv, line))
    if (!line.empty()) lines.push_back(line);
  REQUIRE(lines.size() == 6);  // header + 4 samples + mean
  REQUIRE(lines.front() == "id\tdi_disc\tdi_cup");
  REQUIRE(lines.back().rfind("mean\t", 0) == 0);

  std::ifstream js(out / "eval.json");
  REQUIRE(js.good());
  const EvalReport back = nlohmann::json::parse(js).get<EvalReport>();
  REQUIRE(back.tag == r1.tag);
  REQUIRE(back.samples.size() == r1.samples.size());
  REQUIRE(back.di_disc == r1.di_disc);

  fs::remove_all(data_dir);
  fs::remove_all(out);
}

TEST_CASE("emit_visuals writes three deterministically named files") {
  const fs::path data_dir = fresh_dir("vis_data");
  beal::synthdata::generate_dataset(small_data_cfg(1, 1, 77), data_dir);
  beal::synthdata::Dataset data(data_dir);

  beal::trainer::Trainer<float> t(tiny_net(), micro_train(1));
  beal::synthdata::FundusSample s = data.load_labeled(0);
  s = beal::preprocess::crop_roi(s, 32);
  Tensor<float> x({1, 3, 32, 32});
  for (std::int64_t i = 0; i < x.numel(); ++i)
    x[i] = static_cast<float>(s.image[i]);
  const auto out = t.net().forward(x, beal::nn::Mode::Eval, false);

  const fs::path dir = fresh_dir("vis_out");
  const auto paths = beal::evalkit::emit_visuals(s, out, dir, "sample_000");
  REQUIRE(paths.size() == 3);
  REQUIRE(paths[0].filename() == "sample_000_overlay.png");
  REQUIRE(paths[1].filename() == "sample_000_entropy.png");
  REQUIRE(paths[2].filename() == "sample_000_boundary.png");
  for (const auto& p : paths) REQUIRE(fs::exists(p));

  // a fresh network is uncertain everywhere, so the rescaled entropy map
  // must span the full [0,1] range
  cv::Mat ent = cv::imread((dir / "sample_000_entropy.png").string(),
                           cv::IMREAD_GRAYSCALE);
  REQUIRE(ent.rows == 32);
  REQUIRE(ent.cols == 64);
  double lo = 0, hi = 0;
  cv::minMaxLoc(ent(cv::Rect(0, 0, 32, 32)), &lo, &hi);
  REQUIRE(lo == 0.0);
  REQUIRE(hi == 255.0);

  fs::remove_all(dir);
  fs::remove_all(data_dir);
}

TEST_CASE("emit_visuals degenerates a constant entropy map to zeros") {
  beal::synthdata::FundusSample s;
  s.image = Tensor<double>::full({3, 8, 8}, 0.3);
  beal::segnet::SegOutput<float> out;
  out.mask_prob = Tensor<float>::full({1, 2, 8, 8}, 0.5f);  // constant entropy

  const fs::path dir = fresh_dir("vis_const");
  const auto paths = beal::evalkit::emit_visuals(s, out, dir, "flat");
  cv::Mat ent = cv::imread((dir / "flat_entropy.png").string(),
                           cv::IMREAD_GRAYSCALE);
  REQUIRE(cv::countNonZero(ent) == 0);
  // no boundary branch output: the boundary map is all black
  cv::Mat bnd = cv::imread((dir / "flat_boundary.png").string(),
                           cv::IMREAD_GRAYSCALE);
  REQUIRE(cv::countNonZero(bnd) == 0);
  fs::remove_all(dir);

  const fs::path blocked = fresh_dir("vis_blocked");
  { std::ofstream f(blocked); f << "x"; }  // a file where the dir should go
  REQUIRE_THROWS_AS(
      beal::evalkit::emit_visuals(s, out, blocked / "sub", "flat"),
      RuntimeFailure);
  fs::remove_all(blocked);
}

TEST_CASE("run_ablation emits a complete seven-row table") {
  const fs::path train_dir = fresh_dir("abl_train");
  const fs::path test_dir = fresh_dir("abl_test");
  beal::synthdata::generate_dataset(small_data_cfg(3, 3, 41), train_dir);
  beal::synthdata::generate_dataset(small_data_cfg(1, 2, 42), test_dir);

  const fs::path out = fresh_dir("abl_out");
  const auto rows = beal::evalkit::run_ablation<float>(
      tiny_net(), micro_train(1), train_dir, test_dir, out);

  REQUIRE(rows.size() == 7);
  std::set<ConfigTag> seen;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    REQUIRE(rows[i].tag == beal::evalkit::all_tags()[i]);
    seen.insert(rows[i].tag);
    REQUIRE(rows[i].samples.size() == 2);
    REQUIRE(rows[i].di_disc >= 0.0);
    REQUIRE(rows[i].di_disc <= 1.0);
  }
  REQUIRE(seen.size() == 7);

  // no_da re-evaluates the baseline checkpoint, so the rows agree exactly
  REQUIRE(rows[5].di_disc == rows[1].di_disc);
  REQUIRE(rows[5].di_cup == rows[1].di_cup);

  // table files and per-run artifacts
  std::ifstream tsv(out / "ablation.tsv");
  REQUIRE(tsv.good());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(tsv, line))
    if (!line.empty()) lines.push_back(line);
  REQUIRE(lines.size() == 8);
  REQUIRE(lines.front() == "config\tdi_disc\tdi_cup");
  std::ifstream js(out / "ablation.json");
  const auto table = nlohmann::json::parse(js);
  REQUIRE(table.is_array());
  REQUIRE(table.size() == 7);
  for (const char* run : {"no_boundary", "baseline", "bal", "eal", "beal",
                          "upper_bound"}) {
    REQUIRE(fs::exists(out / run / "metrics.jsonl"));
    REQUIRE(fs::exists(out / run / "final.ckpt"));
    REQUIRE(fs::exists(out / run / "eval.tsv"));
    REQUIRE(fs::exists(out / run / "eval.json"));
  }
  REQUIRE(fs::exists(out / "no_da" / "eval.json"));

  // configuration contracts visible in the artifacts: the BAL-only run never
  // exercises the entropy adversary and vice versa
  auto check_metrics = [&](const char* run, const char* zero_key,
                           const char* live_key) {
    std::ifstream in(out / run / "metrics.jsonl");
    REQUIRE(in.good());
    std::string rec_line;
    bool saw_step = false;
    while (std::getline(in, rec_line)) {
      const auto rec = nlohmann::json::parse(rec_line);
      if (!rec.contains("l_adv_b")) continue;  // epoch_end records
      saw_step = true;
      REQUIRE(rec.at(zero_key).get<double>() == 0.0);
      REQUIRE(rec.at(live_key).get<double>() > 0.0);
    }
    REQUIRE(saw_step);
  };
  check_metrics("bal", "l_adv_e", "l_adv_b");
  check_metrics("eal", "l_adv_b", "l_adv_e");

  // the boundary-free checkpoint carries no boundary-branch parameters
  const auto ck_nb =
      beal::ckpt::load_checkpoint<float>(out / "no_boundary" / "final.ckpt");
  const auto ck_base =
      beal::ckpt::load_checkpoint<float>(out / "baseline" / "final.ckpt");
  auto has_boundary_params = [](const beal::ckpt::Checkpoint<float>& ck) {
    for (const auto& [name, t] : ck.tensors)
      if (name.rfind("seg.boundary", 0) == 0) return true;
    return false;
  };
  REQUIRE_FALSE(has_boundary_params(ck_nb));
  REQUIRE(has_boundary_params(ck_base));

  fs::remove_all(train_dir);
  fs::remove_all(test_dir);
  fs::remove_all(out);
}

TEST_CASE("run_ablation honours row selection and names a failing run") {
  const fs::path train_dir = fresh_dir("abl2_train");
  const fs::path test_dir = fresh_dir("abl2_test");
  beal::synthdata::generate_dataset(small_data_cfg(2, 2, 51), train_dir);
  beal::synthdata::generate_dataset(small_data_cfg(1, 2, 52), test_dir);

  SECTION("--only restricts the table to the requested rows") {
    const fs::path out = fresh_dir("abl2_only");
    const auto rows = beal::evalkit::run_ablation<float>(
        tiny_net(), micro_train(1), train_dir, test_dir, out,
        {ConfigTag::bal, ConfigTag::eal});
    REQUIRE(rows.size() == 2);
    REQUIRE(rows[0].tag == ConfigTag::bal);
    REQUIRE(rows[1].tag == ConfigTag::eal);
    REQUIRE(fs::exists(out / "bal" / "final.ckpt"));
    REQUIRE_FALSE(fs::exists(out / "beal"));
    fs::remove_all(out);
  }

  SECTION("a no_da-only table still trains its baseline dependency") {
    const fs::path out = fresh_dir("abl2_alias");
    const auto rows = beal::evalkit::run_ablation<float>(
        tiny_net(), micro_train(1), train_dir, test_dir, out,
        {ConfigTag::no_da});
    REQUIRE(rows.size() == 1);
    REQUIRE(rows[0].tag == ConfigTag::no_da);
    REQUIRE(fs::exists(out / "baseline" / "final.ckpt"));
    fs::remove_all(out);
  }

  SECTION("a failing run aborts the sweep naming its tag") {
    const fs::path out = fresh_dir("abl2_fail");
    REQUIRE_THROWS_WITH(
        beal::evalkit::run_ablation<float>(tiny_net(), micro_train(1),
                                           train_dir,
                                           fresh_dir("abl2_missing"), out,
                                           {ConfigTag::eal}),
        Catch::Matchers::ContainsSubstring("ablation run 'eal' failed"));
    fs::remove_all(out);
  }

  SECTION("parallel execution reproduces the sequential table") {
    const fs::path out_seq = fresh_dir("abl2_seq");
    const fs::path out_par = fresh_dir("abl2_par");
    const std::vector<ConfigTag> only = {ConfigTag::baseline, ConfigTag::bal};
    const auto seq = beal::evalkit::run_ablation<float>(
        tiny_net(), micro_train(1), train_dir, test_dir, out_seq, only, false);
    const auto par = beal::evalkit::run_ablation<float>(
        tiny_net(), micro_train(1), train_dir, test_dir, out_par, only, true);
    REQUIRE(seq.size() == par.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      REQUIRE(seq[i].tag == par[i].tag);
      REQUIRE(seq[i].di_disc == par[i].di_disc);
      REQUIRE(seq[i].di_cup == par[i].di_cup);
    }
    fs::remove_all(out_seq);
    fs::remove_all(out_par);
  }

  fs::remove_all(train_dir);
  fs::remove_all(test_dir);
}
