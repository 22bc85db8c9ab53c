#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "beal/objectives.hpp"
#include "beal/preprocess.hpp"
#include "beal/segnet.hpp"
#include "beal/synthdata.hpp"
#include "beal/tensor.hpp"
#include "beal/trainer.hpp"

namespace beal::evalkit {

// Ablation table rows. no_da re-evaluates the baseline checkpoint (same
// model, the tag exists so comparison tables are explicit about what the
// non-adapted reference is); upper_bound trains supervised on target labels.
enum class ConfigTag {
  no_boundary,
  baseline,
  bal,
  eal,
  beal,
  no_da,
  upper_bound,
};

inline const std::array<ConfigTag, 7>& all_tags() {
  static const std::array<ConfigTag, 7> tags = {
      ConfigTag::no_boundary, ConfigTag::baseline, ConfigTag::bal,
      ConfigTag::eal,         ConfigTag::beal,     ConfigTag::no_da,
      ConfigTag::upper_bound};
  return tags;
}

inline std::string tag_name(ConfigTag t) {
  switch (t) {
    case ConfigTag::no_boundary: return "no_boundary";
    case ConfigTag::baseline: return "baseline";
    case ConfigTag::bal: return "bal";
    case ConfigTag::eal: return "eal";
    case ConfigTag::beal: return "beal";
    case ConfigTag::no_da: return "no_da";
    case ConfigTag::upper_bound: return "upper_bound";
  }
  throw ValidationError("tag_name: unknown config tag");
}

inline ConfigTag tag_from_name(const std::string& name) {
  for (ConfigTag t : all_tags())
    if (tag_name(t) == name) return t;
  throw ValidationError("unknown ablation tag: '" + name + "'");
}

// Dice overlap 2|A∩B| / (|A|+|B|) of two binary masks. Two empty masks agree
// vacuously and score 1.0.
template <typename T>
double dice(const Tensor<T>& a, const Tensor<T>& b) {
  a.check_same_shape(b);
  std::int64_t inter = 0, na = 0, nb = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const T va = a[i], vb = b[i];
    if ((va != T(0) && va != T(1)) || (vb != T(0) && vb != T(1)))
      throw ValidationError("dice: masks must be binary");
    na += va == T(1);
    nb += vb == T(1);
    inter += va == T(1) && vb == T(1);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

namespace detail {

// Set every enclosed background region of a 0/255 mask to foreground. A
// region is enclosed when a 4-connected background walk from the border
// cannot reach it.
inline cv::Mat fill_holes(const cv::Mat& mask) {
  cv::Mat padded;
  cv::copyMakeBorder(mask, padded, 1, 1, 1, 1, cv::BORDER_CONSTANT, 0);
  cv::Mat reach = 255 - padded;
  cv::floodFill(reach, cv::Point(0, 0), 0, nullptr, cv::Scalar(), cv::Scalar(),
                4);
  cv::Mat filled = padded | reach;  // unreached background = holes
  return filled(cv::Rect(1, 1, mask.cols, mask.rows)).clone();
}

// Keep only the largest 8-connected component of a 0/255 mask and fill its
// holes. Ties go to the first component in raster order.
inline cv::Mat keep_largest_filled(const cv::Mat& mask) {
  if (cv::countNonZero(mask) == 0) return mask.clone();
  cv::Mat labels, stats, centroids;
  const int n = cv::connectedComponentsWithStats(mask, labels, stats,
                                                 centroids, 8, CV_32S);
  int best = 1;
  for (int l = 2; l < n; ++l)
    if (stats.at<int>(l, cv::CC_STAT_AREA) >
        stats.at<int>(best, cv::CC_STAT_AREA))
      best = l;
  cv::Mat comp = labels == best;
  return fill_holes(comp);
}

template <typename T>
cv::Mat threshold_channel(const T* p, std::int64_t h, std::int64_t w,
                          double threshold) {
  cv::Mat m(static_cast<int>(h), static_cast<int>(w), CV_8U);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      m.at<uchar>(static_cast<int>(y), static_cast<int>(x)) =
          static_cast<double>(p[y * w + x]) > threshold ? 255 : 0;
  return m;
}

template <typename T>
Tensor<T> to_tensor(const cv::Mat& mask) {
  Tensor<T> t({mask.rows, mask.cols});
  for (int y = 0; y < mask.rows; ++y)
    for (int x = 0; x < mask.cols; ++x)
      t[static_cast<std::int64_t>(y) * mask.cols + x] =
          mask.at<uchar>(y, x) ? T(1) : T(0);
  return t;
}

}  // namespace detail

// Binarize the two mask channels at `threshold`, keep the largest
// 8-connected component per channel, fill interior holes, then clip the cup
// to the disc. The intersection can in principle split the cup again, so the
// cleanup runs once more on it; the result is always one filled component
// per channel (or an empty mask) with oc ⊆ od.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> postprocess(const Tensor<T>& mask_prob,
                                            double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ValidationError("postprocess: threshold must lie in (0,1)");
  std::int64_t h = 0, w = 0;
  if (mask_prob.rank() == 3 && mask_prob.dim(0) == 2) {
    h = mask_prob.dim(1);
    w = mask_prob.dim(2);
  } else if (mask_prob.rank() == 4 && mask_prob.dim(0) == 1 &&
             mask_prob.dim(1) == 2) {
    h = mask_prob.dim(2);
    w = mask_prob.dim(3);
  } else {
    throw ValidationError("postprocess: expected a (2,H,W) or (1,2,H,W) map, got " +
                          mask_prob.shape_string());
  }
  const T* base = mask_prob.data();
  cv::Mat od = detail::keep_largest_filled(
      detail::threshold_channel(base, h, w, threshold));
  cv::Mat oc = detail::keep_largest_filled(
      detail::threshold_channel(base + h * w, h, w, threshold));
  oc &= od;
  oc = detail::keep_largest_filled(oc);
  return {detail::to_tensor<T>(od), detail::to_tensor<T>(oc)};
}

struct SampleScore {
  std::string id;
  double di_disc = 0;
  double di_cup = 0;
};

inline void to_json(nlohmann::json& j, const SampleScore& s) {
  j = nlohmann::json{{"id", s.id}, {"di_disc", s.di_disc}, {"di_cup", s.di_cup}};
}

inline void from_json(const nlohmann::json& j, SampleScore& s) {
  j.at("id").get_to(s.id);
  j.at("di_disc").get_to(s.di_disc);
  j.at("di_cup").get_to(s.di_cup);
}

// Per-sample and mean Dice of one model on one labeled split.
struct EvalReport {
  ConfigTag tag = ConfigTag::baseline;
  std::vector<SampleScore> samples;
  double di_disc = 0;
  double di_cup = 0;

  // recompute the aggregate columns as plain means of the per-sample ones
  void finalize() {
    if (samples.empty())
      throw ValidationError("EvalReport: no per-sample scores");
    double sd = 0, sc = 0;
    for (const SampleScore& s : samples) {
      sd += s.di_disc;
      sc += s.di_cup;
    }
    di_disc = sd / static_cast<double>(samples.size());
    di_cup = sc / static_cast<double>(samples.size());
  }
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"config", tag_name(r.tag)},
                     {"di_disc", r.di_disc},
                     {"di_cup", r.di_cup},
                     {"samples", r.samples}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r.tag = tag_from_name(j.at("config").get<std::string>());
  j.at("di_disc").get_to(r.di_disc);
  j.at("di_cup").get_to(r.di_cup);
  j.at("samples").get_to(r.samples);
}

namespace detail {

inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace detail

// Write `<stem>.tsv` (one row per sample plus a mean row) and `<stem>.json`.
inline void write_report(const EvalReport& r, const std::filesystem::path& dir,
                         const std::string& stem = "eval") {
  std::filesystem::create_directories(dir);
  std::ofstream tsv(dir / (stem + ".tsv"));
  if (!tsv)
    throw RuntimeFailure("cannot write report in " + dir.string());
  tsv << "id\tdi_disc\tdi_cup\n";
  for (const SampleScore& s : r.samples)
    tsv << s.id << "\t" << detail::fmt6(s.di_disc) << "\t"
        << detail::fmt6(s.di_cup) << "\n";
  tsv << "mean\t" << detail::fmt6(r.di_disc) << "\t" << detail::fmt6(r.di_cup)
      << "\n";
  std::ofstream js(dir / (stem + ".json"));
  if (!js)
    throw RuntimeFailure("cannot write report in " + dir.string());
  js << nlohmann::json(r).dump(2) << "\n";
}

template <typename T>
std::vector<std::filesystem::path> emit_visuals(
    const synthdata::FundusSample& sample, const segnet::SegOutput<T>& out,
    const std::filesystem::path& dir, const std::string& stem);

// Forward → postprocess → dice over `ids`, with the network in evaluation
// mode (frozen batch-norm statistics). This reads ground-truth masks, so it
// is only ever pointed at splits where labels are fair game. Samples are
// independent of each other; order only affects row order. A non-empty
// `visuals_dir` additionally writes the per-sample figure set there.
template <typename T>
EvalReport evaluate(segnet::SegNet<T>& net, const synthdata::Dataset& data,
                    const std::vector<std::size_t>& ids,
                    std::int64_t crop_size,
                    ConfigTag tag = ConfigTag::baseline,
                    double threshold = 0.5,
                    const std::filesystem::path& visuals_dir = {}) {
  if (ids.empty()) throw ValidationError("evaluate: no samples selected");
  EvalReport rep;
  rep.tag = tag;
  for (std::size_t idx : ids) {
    synthdata::FundusSample s = data.load_labeled(idx);
    if (!s.has_masks())
      throw RuntimeFailure("evaluate: sample '" + data.entry(idx).id +
                           "' has no ground-truth masks");
    s = preprocess::crop_roi(s, crop_size);
    Tensor<T> x({1, 3, crop_size, crop_size});
    for (std::int64_t i = 0; i < x.numel(); ++i)
      x[i] = static_cast<T>(s.image[i]);
    const segnet::SegOutput<T> out = net.forward(x, nn::Mode::Eval, false);
    auto [od, oc] = postprocess(out.mask_prob, threshold);
    SampleScore sc;
    sc.id = data.entry(idx).id;
    sc.di_disc = dice(od, s.od_mask.template cast<T>());
    sc.di_cup = dice(oc, s.oc_mask.template cast<T>());
    rep.samples.push_back(std::move(sc));
    if (!visuals_dir.empty())
      emit_visuals(s, out, visuals_dir, data.entry(idx).id);
  }
  rep.finalize();
  return rep;
}

namespace detail {

inline void write_png(const cv::Mat& img, const std::filesystem::path& path) {
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), img);
  } catch (const cv::Exception& e) {
    throw RuntimeFailure("emit_visuals: cannot write " + path.string() + ": " +
                         e.what());
  }
  if (!ok)
    throw RuntimeFailure("emit_visuals: cannot write " + path.string());
}

// min-max rescale one channel to [0,1]; a constant channel degenerates to
// all zeros
template <typename T>
void rescale_channel(const T* src, std::int64_t n, cv::Mat& dst) {
  T lo = src[0], hi = src[0];
  for (std::int64_t i = 1; i < n; ++i) {
    lo = std::min(lo, src[i]);
    hi = std::max(hi, src[i]);
  }
  auto* out = dst.ptr<uchar>();
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = hi > lo ? (static_cast<double>(src[i]) - lo) / (hi - lo)
                             : 0.0;
    out[i] = static_cast<uchar>(std::llround(v * 255.0));
  }
}

inline void draw_contours(cv::Mat& img, const cv::Mat& mask,
                          const cv::Scalar& color) {
  std::vector<std::vector<cv::Point>> contours;
  cv::findContours(mask, contours, cv::RETR_EXTERNAL, cv::CHAIN_APPROX_NONE);
  cv::drawContours(img, contours, -1, color, 1);
}

}  // namespace detail

// Three PNGs per sample under deterministic names:
//   <stem>_overlay.png   input with predicted disc (green) and cup (blue)
//                        contours
//   <stem>_entropy.png   per-channel min-max rescaled entropy map, disc and
//                        cup channels side by side
//   <stem>_boundary.png  boundary prediction (black when the branch is off)
template <typename T>
std::vector<std::filesystem::path> emit_visuals(
    const synthdata::FundusSample& sample, const segnet::SegOutput<T>& out,
    const std::filesystem::path& dir, const std::string& stem) {
  namespace fs = std::filesystem;
  if (sample.image.rank() != 3 || sample.image.dim(0) != 3)
    throw ValidationError("emit_visuals: expected a (3,H,W) sample image");
  const std::int64_t h = sample.image.dim(1), w = sample.image.dim(2);
  if (out.mask_prob.rank() != 4 || out.mask_prob.dim(0) != 1 ||
      out.mask_prob.dim(2) != h || out.mask_prob.dim(3) != w)
    throw ValidationError(
        "emit_visuals: mask probabilities do not match the sample image");
  std::error_code ec;
  fs::create_directories(dir, ec);  // failure surfaces as a write error below

  const int hi = static_cast<int>(h), wi = static_cast<int>(w);
  cv::Mat overlay(hi, wi, CV_8UC3);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      auto& px = overlay.at<cv::Vec3b>(static_cast<int>(y),
                                       static_cast<int>(x));
      for (int c = 0; c < 3; ++c) {  // RGB planes to BGR pixels
        const double v = sample.image[(2 - c) * h * w + y * w + x];
        px[c] = static_cast<uchar>(std::llround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  auto [od, oc] = postprocess(out.mask_prob);
  detail::draw_contours(overlay, detail::threshold_channel(od.data(), h, w, 0.5),
                        cv::Scalar(0, 255, 0));
  detail::draw_contours(overlay, detail::threshold_channel(oc.data(), h, w, 0.5),
                        cv::Scalar(255, 0, 0));

  const Tensor<T> ent = objectives::entropy_map(out.mask_prob);
  cv::Mat entropy(hi, 2 * wi, CV_8U);
  for (int c = 0; c < 2; ++c) {
    cv::Mat view = entropy(cv::Rect(c * wi, 0, wi, hi));
    cv::Mat chan(hi, wi, CV_8U);
    detail::rescale_channel(ent.data() + c * h * w, h * w, chan);
    chan.copyTo(view);
  }

  cv::Mat boundary(hi, wi, CV_8U, cv::Scalar(0));
  if (!out.boundary.empty()) {
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const double v =
            std::clamp(static_cast<double>(out.boundary[y * w + x]), 0.0, 1.0);
        boundary.at<uchar>(static_cast<int>(y), static_cast<int>(x)) =
            static_cast<uchar>(std::llround(v * 255.0));
      }
  }

  const std::vector<fs::path> paths = {dir / (stem + "_overlay.png"),
                                       dir / (stem + "_entropy.png"),
                                       dir / (stem + "_boundary.png")};
  detail::write_png(overlay, paths[0]);
  detail::write_png(entropy, paths[1]);
  detail::write_png(boundary, paths[2]);
  return paths;
}

namespace detail {

// net/train configuration for one ablation row
inline std::pair<segnet::SegNetConfig, trainer::TrainConfig> row_config(
    ConfigTag tag, const segnet::SegNetConfig& base_net,
    const trainer::TrainConfig& base_train) {
  segnet::SegNetConfig n = base_net;
  trainer::TrainConfig c = base_train;
  n.use_boundary_branch = tag != ConfigTag::no_boundary;
  c.use_bal = tag == ConfigTag::bal || tag == ConfigTag::beal;
  c.use_eal = tag == ConfigTag::eal || tag == ConfigTag::beal;
  return {n, c};
}

}  // namespace detail

// One Table-3-style sweep. Every selected configuration trains from the base
// settings and is evaluated on the target split of `test_dir`; one row per
// tag lands in ablation.tsv / ablation.json under `out_dir`, and each run
// keeps its logs, checkpoints and per-sample report in its own
// subdirectory. Runs are independent (each opens its own dataset handles),
// so `parallel` may execute them concurrently; rows, logs and reports are
// identical either way. A failing run aborts the sweep naming its tag.
template <typename T>
std::vector<EvalReport> run_ablation(const segnet::SegNetConfig& base_net,
                                     const trainer::TrainConfig& base_train,
                                     const std::filesystem::path& train_dir,
                                     const std::filesystem::path& test_dir,
                                     const std::filesystem::path& out_dir,
                                     const std::vector<ConfigTag>& only = {},
                                     bool parallel = false) {
  namespace fs = std::filesystem;
  std::vector<ConfigTag> selected;
  for (ConfigTag t : all_tags())
    if (only.empty() || std::find(only.begin(), only.end(), t) != only.end())
      selected.push_back(t);

  const bool want_no_da =
      std::find(selected.begin(), selected.end(), ConfigTag::no_da) !=
      selected.end();
  const bool want_baseline =
      std::find(selected.begin(), selected.end(), ConfigTag::baseline) !=
      selected.end();

  // every training run, in canonical order; baseline is trained even when
  // only its no_da alias was requested
  std::vector<ConfigTag> runs;
  for (ConfigTag t : selected)
    if (t != ConfigTag::no_da) runs.push_back(t);
  if (want_no_da && !want_baseline)
    runs.insert(std::find(runs.begin(), runs.end(), ConfigTag::bal),
                ConfigTag::baseline);

  auto train_one = [&](ConfigTag tag) -> EvalReport {
    const auto [ncfg, tcfg] = detail::row_config(tag, base_net, base_train);
    const fs::path run_dir = out_dir / tag_name(tag);
    const synthdata::Dataset train_data(train_dir);
    const synthdata::Dataset test_data(test_dir);
    trainer::Trainer<T> t(ncfg, tcfg);
    if (tag == ConfigTag::upper_bound)
      t.fit(train_data, train_data.domain_indices(synthdata::Domain::Target),
            {}, run_dir);
    else
      t.fit(train_data, run_dir);
    EvalReport rep =
        evaluate(t.net(), test_data,
                 test_data.domain_indices(synthdata::Domain::Target),
                 tcfg.crop_size, tag);
    write_report(rep, run_dir);
    return rep;
  };

  std::vector<EvalReport> trained;
  if (parallel) {
    std::vector<std::future<EvalReport>> futs;
    futs.reserve(runs.size());
    for (ConfigTag tag : runs)
      futs.push_back(std::async(std::launch::async, train_one, tag));
    for (std::size_t i = 0; i < runs.size(); ++i) {
      try {
        trained.push_back(futs[i].get());
      } catch (const std::exception& e) {
        throw RuntimeFailure("ablation run '" + tag_name(runs[i]) +
                             "' failed: " + e.what());
      }
    }
  } else {
    for (ConfigTag tag : runs) {
      try {
        trained.push_back(train_one(tag));
      } catch (const std::exception& e) {
        throw RuntimeFailure("ablation run '" + tag_name(tag) +
                             "' failed: " + e.what());
      }
    }
  }

  std::vector<EvalReport> rows;
  for (ConfigTag tag : selected) {
    if (tag == ConfigTag::no_da) {
      // re-evaluate the baseline checkpoint under the alias tag
      try {
        const auto [ncfg, tcfg] =
            detail::row_config(ConfigTag::baseline, base_net, base_train);
        const synthdata::Dataset test_data(test_dir);
        trainer::Trainer<T> t(ncfg, tcfg);
        t.load(out_dir / "baseline" / "final.ckpt");
        EvalReport rep =
            evaluate(t.net(), test_data,
                     test_data.domain_indices(synthdata::Domain::Target),
                     tcfg.crop_size, ConfigTag::no_da);
        write_report(rep, out_dir / "no_da");
        rows.push_back(std::move(rep));
      } catch (const std::exception& e) {
        throw RuntimeFailure("ablation run 'no_da' failed: " +
                             std::string(e.what()));
      }
    } else {
      for (std::size_t i = 0; i < runs.size(); ++i)
        if (runs[i] == tag) rows.push_back(trained[i]);
    }
  }

  fs::create_directories(out_dir);
  std::ofstream tsv(out_dir / "ablation.tsv");
  if (!tsv)
    throw RuntimeFailure("cannot write ablation table in " + out_dir.string());
  tsv << "config\tdi_disc\tdi_cup\n";
  for (const EvalReport& r : rows)
    tsv << tag_name(r.tag) << "\t" << detail::fmt6(r.di_disc) << "\t"
        << detail::fmt6(r.di_cup) << "\n";
  std::ofstream js(out_dir / "ablation.json");
  if (!js)
    throw RuntimeFailure("cannot write ablation table in " + out_dir.string());
  js << nlohmann::json(rows).dump(2) << "\n";
  return rows;
}

}  // namespace beal::evalkit
