#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>

#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include "beal/rng.hpp"
#include "beal/synthdata.hpp"
#include "beal/tensor.hpp"

namespace beal::preprocess {

using synthdata::FundusSample;

// soft-band width of the boundary ground truth, proportional to crop size
inline double default_boundary_sigma(std::int64_t crop_size) {
  return 2.0 * static_cast<double>(crop_size) / 128.0;
}

struct BoundaryTarget {
  Tensor<double> map;  // (H,W) in [0,1]
  double sigma = 0;
};

namespace detail {

inline void require_binary(const Tensor<double>& mask, const char* what) {
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    if (mask[i] != 0.0 && mask[i] != 1.0)
      throw ValidationError(std::string(what) + ": mask is not {0,1}-valued");
}

inline cv::Mat hw_to_mat64(const Tensor<double>& t) {
  const int h = static_cast<int>(t.dim(0)), w = static_cast<int>(t.dim(1));
  cv::Mat m(h, w, CV_64FC1);
  for (int y = 0; y < h; ++y)
    std::copy(t.data() + static_cast<std::int64_t>(y) * w,
              t.data() + static_cast<std::int64_t>(y + 1) * w,
              m.ptr<double>(y));
  return m;
}

inline Tensor<double> mat64_to_hw(const cv::Mat& m) {
  Tensor<double> t({m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y)
    std::copy(m.ptr<double>(y), m.ptr<double>(y) + m.cols,
              t.data() + static_cast<std::int64_t>(y) * m.cols);
  return t;
}

}  // namespace detail

// Crop centered on the disc annotation with edge replication outside bounds.
inline FundusSample crop_roi(const FundusSample& sample,
                             std::int64_t crop_size) {
  if (!sample.has_center)
    throw ValidationError(
        "crop_roi: sample has no disc_center annotation (automatic disc "
        "localization is out of scope)");
  if (crop_size < 1) throw ValidationError("crop_roi: crop_size must be >= 1");
  const std::int64_t h = sample.image.dim(1), w = sample.image.dim(2);
  const std::int64_t x0 =
      static_cast<std::int64_t>(std::llround(sample.cx)) - crop_size / 2;
  const std::int64_t y0 =
      static_cast<std::int64_t>(std::llround(sample.cy)) - crop_size / 2;

  FundusSample out;
  out.domain = sample.domain;
  out.cx = sample.cx - static_cast<double>(x0);
  out.cy = sample.cy - static_cast<double>(y0);
  out.has_center = true;

  out.image = Tensor<double>({3, crop_size, crop_size});
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < crop_size; ++y) {
      const std::int64_t sy = std::clamp<std::int64_t>(y0 + y, 0, h - 1);
      for (std::int64_t x = 0; x < crop_size; ++x) {
        const std::int64_t sx = std::clamp<std::int64_t>(x0 + x, 0, w - 1);
        out.image[(c * crop_size + y) * crop_size + x] =
            sample.image[(c * h + sy) * w + sx];
      }
    }

  auto crop_mask = [&](const Tensor<double>& m) {
    Tensor<double> o({crop_size, crop_size});
    for (std::int64_t y = 0; y < crop_size; ++y) {
      const std::int64_t sy = std::clamp<std::int64_t>(y0 + y, 0, h - 1);
      for (std::int64_t x = 0; x < crop_size; ++x) {
        const std::int64_t sx = std::clamp<std::int64_t>(x0 + x, 0, w - 1);
        o[y * crop_size + x] = m[sy * w + sx];
      }
    }
    return o;
  };
  if (sample.has_masks()) {
    out.od_mask = crop_mask(sample.od_mask);
    out.oc_mask = crop_mask(sample.oc_mask);
  }
  return out;
}

// Sobel contour extraction, Gaussian softening, per-structure max-normalization,
// then a pixelwise max combining disc and cup into one channel.
inline BoundaryTarget make_boundary_target(const Tensor<double>& od_mask,
                                           const Tensor<double>& oc_mask,
                                           double sigma) {
  if (sigma <= 0)
    throw ValidationError("make_boundary_target: sigma must be > 0");
  if (!od_mask.same_shape(oc_mask))
    throw ValidationError("make_boundary_target: mask shape mismatch");
  detail::require_binary(od_mask, "make_boundary_target");
  detail::require_binary(oc_mask, "make_boundary_target");
  for (std::int64_t i = 0; i < oc_mask.numel(); ++i)
    if (oc_mask[i] > od_mask[i])
      throw ValidationError("make_boundary_target: cup outside disc");

  const int ksize = 2 * static_cast<int>(std::ceil(3 * sigma)) + 1;
  auto soft_contour = [&](const Tensor<double>& mask) {
    cv::Mat m = detail::hw_to_mat64(mask);
    cv::Mat gx, gy;
    cv::Sobel(m, gx, CV_64F, 1, 0, 3);
    cv::Sobel(m, gy, CV_64F, 0, 1, 3);
    cv::Mat contour(m.size(), CV_64FC1);
    for (int y = 0; y < m.rows; ++y) {
      const double* px = gx.ptr<double>(y);
      const double* py = gy.ptr<double>(y);
      double* pc = contour.ptr<double>(y);
      for (int x = 0; x < m.cols; ++x)
        pc[x] = (std::abs(px[x]) + std::abs(py[x])) > 0 ? 1.0 : 0.0;
    }
    cv::Mat soft;
    cv::GaussianBlur(contour, soft, cv::Size(ksize, ksize), sigma, sigma,
                     cv::BORDER_CONSTANT);
    double mx = 0;
    cv::minMaxLoc(soft, nullptr, &mx);
    if (mx > 0) soft /= mx;
    return soft;
  };

  cv::Mat bd = soft_contour(od_mask);
  cv::Mat bc = soft_contour(oc_mask);
  cv::max(bd, bc, bd);

  BoundaryTarget t;
  t.map = detail::mat64_to_hw(bd);
  t.sigma = sigma;
  return t;
}

struct AugmentPolicy {
  bool rotation = true;
  double max_rotation_deg = 20;
  bool flip = true;
  double flip_prob = 0.5;
  bool elastic = true;
  int elastic_grid = 4;           // control cells per axis
  double elastic_max_disp = 0.04; // fraction of the crop size
  bool contrast = true;
  double contrast_lo = 0.8, contrast_hi = 1.25;
  bool noise = true;
  double noise_sigma = 0.02;
  bool erasing = true;
  double erasing_prob = 0.3;
  double erase_frac_lo = 0.05, erase_frac_hi = 0.15;

  static AugmentPolicy disabled() {
    AugmentPolicy p;
    p.rotation = p.flip = p.elastic = p.contrast = p.noise = p.erasing = false;
    return p;
  }

  void validate() const {
    if (max_rotation_deg < 0 || elastic_grid < 1 || elastic_max_disp < 0 ||
        noise_sigma < 0)
      throw ValidationError("AugmentPolicy: negative parameter");
    if (flip_prob < 0 || flip_prob > 1 || erasing_prob < 0 || erasing_prob > 1)
      throw ValidationError("AugmentPolicy: probability outside [0,1]");
    if (contrast_lo > contrast_hi || erase_frac_lo > erase_frac_hi)
      throw ValidationError("AugmentPolicy: range lo > hi");
  }
};

inline void to_json(nlohmann::json& j, const AugmentPolicy& p) {
  j = nlohmann::json{{"rotation", p.rotation},
                     {"max_rotation_deg", p.max_rotation_deg},
                     {"flip", p.flip},
                     {"flip_prob", p.flip_prob},
                     {"elastic", p.elastic},
                     {"elastic_grid", p.elastic_grid},
                     {"elastic_max_disp", p.elastic_max_disp},
                     {"contrast", p.contrast},
                     {"contrast_lo", p.contrast_lo},
                     {"contrast_hi", p.contrast_hi},
                     {"noise", p.noise},
                     {"noise_sigma", p.noise_sigma},
                     {"erasing", p.erasing},
                     {"erasing_prob", p.erasing_prob},
                     {"erase_frac_lo", p.erase_frac_lo},
                     {"erase_frac_hi", p.erase_frac_hi}};
}

inline void from_json(const nlohmann::json& j, AugmentPolicy& p) {
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("rotation", p.rotation);
  get("max_rotation_deg", p.max_rotation_deg);
  get("flip", p.flip);
  get("flip_prob", p.flip_prob);
  get("elastic", p.elastic);
  get("elastic_grid", p.elastic_grid);
  get("elastic_max_disp", p.elastic_max_disp);
  get("contrast", p.contrast);
  get("contrast_lo", p.contrast_lo);
  get("contrast_hi", p.contrast_hi);
  get("noise", p.noise);
  get("noise_sigma", p.noise_sigma);
  get("erasing", p.erasing);
  get("erasing_prob", p.erasing_prob);
  get("erase_frac_lo", p.erase_frac_lo);
  get("erase_frac_hi", p.erase_frac_hi);
}

namespace detail {

inline cv::Mat remap_plane(const cv::Mat& src32, const cv::Mat& map_x,
                           const cv::Mat& map_y, int border,
                           float border_value) {
  cv::Mat dst;
  cv::remap(src32, dst, map_x, map_y, cv::INTER_LINEAR, border,
            cv::Scalar(border_value));
  return dst;
}

inline cv::Mat hw_to_mat32(const Tensor<double>& t, std::int64_t plane_offset) {
  // treats t as (C,H,W) when plane_offset addresses a channel, or (H,W)
  const bool chw = t.rank() == 3;
  const int h = static_cast<int>(t.dim(chw ? 1 : 0));
  const int w = static_cast<int>(t.dim(chw ? 2 : 1));
  cv::Mat m(h, w, CV_32FC1);
  const double* src = t.data() + plane_offset;
  for (int y = 0; y < h; ++y) {
    float* row = m.ptr<float>(y);
    for (int x = 0; x < w; ++x)
      row[x] = static_cast<float>(src[static_cast<std::int64_t>(y) * w + x]);
  }
  return m;
}

inline void mat32_to_plane(const cv::Mat& m, Tensor<double>& t,
                           std::int64_t plane_offset) {
  double* dst = t.data() + plane_offset;
  for (int y = 0; y < m.rows; ++y) {
    const float* row = m.ptr<float>(y);
    for (int x = 0; x < m.cols; ++x)
      dst[static_cast<std::int64_t>(y) * m.cols + x] =
          static_cast<double>(row[x]);
  }
}

inline Tensor<double> exact_flip_h(const Tensor<double>& t) {
  Tensor<double> out(t.shape());
  const bool chw = t.rank() == 3;
  const std::int64_t ch = chw ? t.dim(0) : 1;
  const std::int64_t h = t.dim(chw ? 1 : 0), w = t.dim(chw ? 2 : 1);
  for (std::int64_t c = 0; c < ch; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        out[(c * h + y) * w + x] = t[(c * h + y) * w + (w - 1 - x)];
  return out;
}

}  // namespace detail

// Applies one augmentation draw. The same geometric transform is applied to
// the image, both masks, and the boundary target; photometric changes touch
// the image only. Target-domain samples carry no masks and pass through the
// same code path with the mask work skipped.
inline std::pair<FundusSample, BoundaryTarget> augment(
    const FundusSample& sample, const BoundaryTarget& boundary,
    const AugmentPolicy& policy, std::uint64_t rng_seed) {
  policy.validate();
  if (sample.has_masks()) {
    detail::require_binary(sample.od_mask, "augment");
    detail::require_binary(sample.oc_mask, "augment");
  }
  Rng rng(hash_combine(rng_seed, 0xa06ULL));

  const std::int64_t h = sample.image.dim(1), w = sample.image.dim(2);

  // draw all geometric parameters first so mask geometry is a pure function
  // of (seed, policy) regardless of the photometric path
  double angle_deg = 0;
  bool do_flip = false;
  cv::Mat elastic_dx, elastic_dy;
  if (policy.rotation)
    angle_deg = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg);
  if (policy.flip) do_flip = rng.uniform() < policy.flip_prob;
  if (policy.elastic) {
    const int cells = policy.elastic_grid + 3;
    const double amp =
        policy.elastic_max_disp * static_cast<double>(std::min(h, w));
    cv::Mat gx(cells, cells, CV_32FC1), gy(cells, cells, CV_32FC1);
    for (int y = 0; y < cells; ++y)
      for (int x = 0; x < cells; ++x) {
        gx.at<float>(y, x) = static_cast<float>(rng.uniform(-amp, amp));
        gy.at<float>(y, x) = static_cast<float>(rng.uniform(-amp, amp));
      }
    cv::resize(gx, elastic_dx, cv::Size(static_cast<int>(w), static_cast<int>(h)),
               0, 0, cv::INTER_CUBIC);
    cv::resize(gy, elastic_dy, cv::Size(static_cast<int>(w), static_cast<int>(h)),
               0, 0, cv::INTER_CUBIC);
  }

  const bool needs_remap = policy.rotation || policy.elastic;

  FundusSample out;
  out.domain = sample.domain;
  out.has_center = false;  // geometric augmentation invalidates the annotation
  BoundaryTarget bout;
  bout.sigma = boundary.sigma;

  if (!needs_remap && !do_flip) {
    out.image = sample.image;
    out.od_mask = sample.od_mask;
    out.oc_mask = sample.oc_mask;
    out.has_center = sample.has_center;
    out.cx = sample.cx;
    out.cy = sample.cy;
    bout.map = boundary.map;
  } else if (!needs_remap) {
    // flip alone is an exact index reversal (bit-exact involution)
    out.image = detail::exact_flip_h(sample.image);
    if (sample.has_masks()) {
      out.od_mask = detail::exact_flip_h(sample.od_mask);
      out.oc_mask = detail::exact_flip_h(sample.oc_mask);
    }
    if (!boundary.map.empty()) bout.map = detail::exact_flip_h(boundary.map);
  } else {
    // one composed inverse map: dst -> elastic -> flip -> inverse rotation
    const double theta = angle_deg * M_PI / 180.0;
    const double ct = std::cos(-theta), st = std::sin(-theta);
    const double cx = (static_cast<double>(w) - 1) / 2.0;
    const double cy = (static_cast<double>(h) - 1) / 2.0;
    cv::Mat map_x(static_cast<int>(h), static_cast<int>(w), CV_32FC1);
    cv::Mat map_y(static_cast<int>(h), static_cast<int>(w), CV_32FC1);
    for (std::int64_t y = 0; y < h; ++y) {
      float* rx = map_x.ptr<float>(static_cast<int>(y));
      float* ry = map_y.ptr<float>(static_cast<int>(y));
      for (std::int64_t x = 0; x < w; ++x) {
        double px = static_cast<double>(x), py = static_cast<double>(y);
        if (policy.elastic) {
          px += elastic_dx.at<float>(static_cast<int>(y), static_cast<int>(x));
          py += elastic_dy.at<float>(static_cast<int>(y), static_cast<int>(x));
        }
        if (do_flip) px = static_cast<double>(w) - 1 - px;
        if (policy.rotation) {
          const double dx = px - cx, dy = py - cy;
          px = cx + dx * ct - dy * st;
          py = cy + dx * st + dy * ct;
        }
        rx[x] = static_cast<float>(px);
        ry[x] = static_cast<float>(py);
      }
    }

    out.image = Tensor<double>({3, h, w});
    for (std::int64_t c = 0; c < 3; ++c) {
      cv::Mat plane = detail::hw_to_mat32(sample.image, c * h * w);
      cv::Mat warped = detail::remap_plane(plane, map_x, map_y,
                                           cv::BORDER_REPLICATE, 0.f);
      detail::mat32_to_plane(warped, out.image, c * h * w);
    }
    auto warp_binary = [&](const Tensor<double>& m) {
      cv::Mat plane = detail::hw_to_mat32(m, 0);
      cv::Mat warped = detail::remap_plane(plane, map_x, map_y,
                                           cv::BORDER_CONSTANT, 0.f);
      Tensor<double> o({h, w});
      for (int y = 0; y < warped.rows; ++y) {
        const float* row = warped.ptr<float>(y);
        for (int x = 0; x < warped.cols; ++x)
          o[static_cast<std::int64_t>(y) * w + x] = row[x] > 0.5f ? 1.0 : 0.0;
      }
      return o;
    };
    if (sample.has_masks()) {
      out.od_mask = warp_binary(sample.od_mask);
      out.oc_mask = warp_binary(sample.oc_mask);
    }
    if (!boundary.map.empty()) {
      cv::Mat plane = detail::hw_to_mat32(boundary.map, 0);
      cv::Mat warped = detail::remap_plane(plane, map_x, map_y,
                                           cv::BORDER_CONSTANT, 0.f);
      bout.map = Tensor<double>({h, w});
      detail::mat32_to_plane(warped, bout.map, 0);
      for (std::int64_t i = 0; i < bout.map.numel(); ++i)
        bout.map[i] = std::clamp(bout.map[i], 0.0, 1.0);
    }
  }

  // interpolation can nudge the cup over the disc edge; re-enforce nesting
  if (out.has_masks())
    for (std::int64_t i = 0; i < out.oc_mask.numel(); ++i)
      if (out.oc_mask[i] > out.od_mask[i]) out.oc_mask[i] = 0.0;

  // photometric transforms, image only
  if (policy.contrast) {
    const double f = rng.uniform(policy.contrast_lo, policy.contrast_hi);
    for (std::int64_t i = 0; i < out.image.numel(); ++i)
      out.image[i] = std::clamp(0.5 + (out.image[i] - 0.5) * f, 0.0, 1.0);
  }
  if (policy.noise && policy.noise_sigma > 0) {
    for (std::int64_t i = 0; i < out.image.numel(); ++i)
      out.image[i] = std::clamp(
          out.image[i] + rng.normal() * policy.noise_sigma, 0.0, 1.0);
  }
  if (policy.erasing && rng.uniform() < policy.erasing_prob) {
    const double frac =
        rng.uniform(policy.erase_frac_lo, policy.erase_frac_hi);
    const double aspect = rng.uniform(0.5, 2.0);
    const std::int64_t eh = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(
            std::llround(std::sqrt(frac * static_cast<double>(h * w) * aspect))),
        1, h);
    const std::int64_t ew = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(
            std::llround(std::sqrt(frac * static_cast<double>(h * w) / aspect))),
        1, w);
    const std::int64_t y0 =
        static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(h - eh + 1)));
    const std::int64_t x0 =
        static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w - ew + 1)));
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t y = y0; y < y0 + eh; ++y)
        for (std::int64_t x = x0; x < x0 + ew; ++x)
          out.image[(c * h + y) * w + x] = rng.uniform();
  }
  return {std::move(out), std::move(bout)};
}

}  // namespace beal::preprocess
