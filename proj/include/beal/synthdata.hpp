#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include "beal/image.hpp"
#include "beal/rng.hpp"
#include "beal/tensor.hpp"

namespace beal::synthdata {

enum class Domain { Source, Target };

inline const char* domain_name(Domain d) {
  return d == Domain::Source ? "source" : "target";
}

inline Domain domain_from_string(const std::string& s) {
  if (s == "source") return Domain::Source;
  if (s == "target") return Domain::Target;
  throw ValidationError("unknown domain tag: " + s);
}

struct GeometryParams {
  double cx = 0, cy = 0;            // disc center, pixels
  double disc_radius = 0;           // base radius, pixels
  double cup_radius_ratio = 0.5;    // in (0,1)
  double ellipse_eccentricity = 0;  // in [0,0.5]
  double rotation = 0;              // radians

  double axis_a() const { return disc_radius * (1 + ellipse_eccentricity); }
  double axis_b() const { return disc_radius * (1 - ellipse_eccentricity); }

  void validate(std::int64_t size) const {
    if (!(cup_radius_ratio > 0 && cup_radius_ratio < 1))
      throw ValidationError("GeometryParams: cup_radius_ratio must be in (0,1)");
    if (ellipse_eccentricity < 0 || ellipse_eccentricity > 0.5)
      throw ValidationError(
          "GeometryParams: ellipse_eccentricity must be in [0,0.5]");
    if (disc_radius <= 0)
      throw ValidationError("GeometryParams: disc_radius must be positive");
    // extent of the rotated ellipse along each image axis
    const double c = std::cos(rotation), s = std::sin(rotation);
    const double a = axis_a(), b = axis_b();
    const double ext_x = std::sqrt(a * a * c * c + b * b * s * s);
    const double ext_y = std::sqrt(a * a * s * s + b * b * c * c);
    const double margin = 4;
    if (cx - ext_x < margin || cx + ext_x > size - 1 - margin ||
        cy - ext_y < margin || cy + ext_y > size - 1 - margin)
      throw ValidationError(
          "GeometryParams: disc does not fit inside the image with a 4 px "
          "margin");
  }
};

struct StyleParams {
  double base_hue = 25;          // degrees
  double vessel_density = 1.0;   // >= 0
  double brightness_gain = 1.0;  // > 0
  double contrast_gamma = 1.0;   // > 0
  double noise_sigma = 0.02;     // >= 0
  double blur_sigma = 1.0;       // >= 0, pixels
  std::uint64_t texture_seed = 0;

  void validate() const {
    for (double v : {base_hue, vessel_density, brightness_gain, contrast_gamma,
                     noise_sigma, blur_sigma})
      if (!std::isfinite(v)) throw ValidationError("StyleParams: non-finite field");
    if (brightness_gain <= 0 || contrast_gamma <= 0 || vessel_density < 0 ||
        noise_sigma < 0 || blur_sigma < 0)
      throw ValidationError("StyleParams: out-of-range field");
  }
};

struct FundusSample {
  Tensor<double> image;    // (3,H,W) RGB in [0,1]
  Tensor<double> od_mask;  // (H,W) {0,1}; empty when labels not loaded
  Tensor<double> oc_mask;  // (H,W) {0,1}
  double cx = -1, cy = -1;
  bool has_center = false;
  Domain domain = Domain::Source;

  bool has_masks() const { return !od_mask.empty(); }
};

namespace detail {

// squared elliptical metric: <=1 inside the ellipse
inline double ellipse_metric(double x, double y, const GeometryParams& g,
                             double scale) {
  const double dx = x - g.cx, dy = y - g.cy;
  const double c = std::cos(g.rotation), s = std::sin(g.rotation);
  const double u = (dx * c + dy * s) / (g.axis_a() * scale);
  const double v = (-dx * s + dy * c) / (g.axis_b() * scale);
  return u * u + v * v;
}

inline Tensor<double> rasterize_ellipse(const GeometryParams& g, double scale,
                                        std::int64_t size) {
  Tensor<double> mask({size, size});
  for (std::int64_t y = 0; y < size; ++y)
    for (std::int64_t x = 0; x < size; ++x)
      mask[y * size + x] =
          ellipse_metric(static_cast<double>(x), static_cast<double>(y), g,
                         scale) <= 1.0
              ? 1.0
              : 0.0;
  return mask;
}

inline void hsv_to_rgb(double h_deg, double s, double v, double rgb[3]) {
  const double h = std::fmod(std::fmod(h_deg, 360.0) + 360.0, 360.0) / 60.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (i) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

// smooth multi-octave value noise in [0,1]
inline cv::Mat value_noise(std::int64_t size, Rng& rng) {
  cv::Mat acc = cv::Mat::zeros(static_cast<int>(size), static_cast<int>(size),
                               CV_64FC1);
  double amp = 0.6, total = 0;
  for (int cells : {5, 11, 23}) {
    cv::Mat grid(cells, cells, CV_64FC1);
    for (int y = 0; y < cells; ++y)
      for (int x = 0; x < cells; ++x) grid.at<double>(y, x) = rng.uniform();
    cv::Mat up;
    cv::resize(grid, up, acc.size(), 0, 0, cv::INTER_CUBIC);
    acc += amp * up;
    total += amp;
    amp *= 0.5;
  }
  acc /= total;
  return acc;
}

}  // namespace detail

inline FundusSample generate_sample(std::uint64_t seed,
                                    const GeometryParams& geometry,
                                    const StyleParams& style,
                                    std::int64_t size) {
  if (size < 64) throw ValidationError("generate_sample: size must be >= 64");
  geometry.validate(size);
  style.validate();

  FundusSample sample;
  sample.cx = geometry.cx;
  sample.cy = geometry.cy;
  sample.has_center = true;

  // geometry: pixel-center rasterization, cup strictly inside the disc
  sample.od_mask = detail::rasterize_ellipse(geometry, 1.0, size);
  sample.oc_mask =
      detail::rasterize_ellipse(geometry, geometry.cup_radius_ratio, size);
  for (std::int64_t i = 0; i < size * size; ++i)
    if (sample.oc_mask[i] > sample.od_mask[i])
      throw RuntimeFailure("generate_sample: cup escaped the disc after "
                           "rasterization");

  Rng rng(hash_combine(seed, style.texture_seed, 0x7e97ULL));

  // anatomy palette
  double bg[3], disc[3], cup[3], vessel[3];
  detail::hsv_to_rgb(style.base_hue + 12, 0.80, 0.52, bg);
  detail::hsv_to_rgb(style.base_hue, 0.55, 0.93, disc);
  detail::hsv_to_rgb(style.base_hue - 14, 0.30, 1.00, cup);
  detail::hsv_to_rgb(style.base_hue - 4, 0.85, 0.30, vessel);

  const int isz = static_cast<int>(size);
  cv::Mat img(isz, isz, CV_64FC3);
  const double soft = 0.05;  // relative width of the soft structure boundary
  for (int y = 0; y < isz; ++y) {
    auto* row = img.ptr<cv::Vec3d>(y);
    for (int x = 0; x < isz; ++x) {
      const double d_od = std::sqrt(detail::ellipse_metric(x, y, geometry, 1.0));
      const double d_oc = std::sqrt(
          detail::ellipse_metric(x, y, geometry, geometry.cup_radius_ratio));
      const double w_od = 1.0 / (1.0 + std::exp((d_od - 1.0) / soft));
      const double w_oc = 1.0 / (1.0 + std::exp((d_oc - 1.0) / soft));
      const double rx = (x - size / 2.0) / (size / 2.0);
      const double ry = (y - size / 2.0) / (size / 2.0);
      const double vignette = 1.0 - 0.35 * (rx * rx + ry * ry);
      for (int c = 0; c < 3; ++c) {
        double v = bg[c] + w_od * (disc[c] - bg[c]) + w_oc * (cup[c] - disc[c]);
        row[x][c] = v * vignette;
      }
    }
  }

  // background texture
  cv::Mat tex = detail::value_noise(size, rng);
  for (int y = 0; y < isz; ++y) {
    auto* row = img.ptr<cv::Vec3d>(y);
    const auto* trow = tex.ptr<double>(y);
    for (int x = 0; x < isz; ++x)
      for (int c = 0; c < 3; ++c)
        row[x][c] *= 1.0 + 0.25 * (trow[x] - 0.5);
  }

  // vessels: curved polylines radiating from the disc
  const int n_vessels =
      static_cast<int>(std::llround(style.vessel_density * 6.0));
  for (int v = 0; v < n_vessels; ++v) {
    double ang = rng.uniform(0, 2 * M_PI);
    double px = geometry.cx + std::cos(ang) * geometry.disc_radius * 0.3;
    double py = geometry.cy + std::sin(ang) * geometry.disc_radius * 0.3;
    const int thickness = rng.uniform() < 0.5 ? 1 : 2;
    const double step = size / 14.0;
    for (int seg = 0; seg < 9; ++seg) {
      ang += rng.uniform(-0.5, 0.5);
      const double nx = px + std::cos(ang) * step;
      const double ny = py + std::sin(ang) * step;
      cv::line(img, cv::Point2i(static_cast<int>(px), static_cast<int>(py)),
               cv::Point2i(static_cast<int>(nx), static_cast<int>(ny)),
               cv::Scalar(vessel[0], vessel[1], vessel[2]), thickness,
               cv::LINE_8);
      px = nx;
      py = ny;
    }
  }

  // photometric style: gamma -> gain -> blur -> noise, then clip
  for (int y = 0; y < isz; ++y) {
    auto* row = img.ptr<cv::Vec3d>(y);
    for (int x = 0; x < isz; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(row[x][c], 0.0, 1.0);
        v = std::pow(v, style.contrast_gamma) * style.brightness_gain;
        row[x][c] = v;
      }
  }
  if (style.blur_sigma > 0) {
    const int k = 2 * static_cast<int>(std::ceil(3 * style.blur_sigma)) + 1;
    cv::GaussianBlur(img, img, cv::Size(k, k), style.blur_sigma,
                     style.blur_sigma, cv::BORDER_REPLICATE);
  }
  sample.image = Tensor<double>({3, size, size});
  const std::int64_t plane = size * size;
  for (int y = 0; y < isz; ++y) {
    const auto* row = img.ptr<cv::Vec3d>(y);
    for (int x = 0; x < isz; ++x) {
      const std::int64_t i = static_cast<std::int64_t>(y) * size + x;
      for (int c = 0; c < 3; ++c) {
        double v = row[x][c];
        if (style.noise_sigma > 0) v += rng.normal() * style.noise_sigma;
        sample.image[c * plane + i] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return sample;
}

// Uniform sampling ranges for each style field; one range per domain.
struct StyleRange {
  double hue_lo = 18, hue_hi = 30;
  double vessel_lo = 0.8, vessel_hi = 1.3;
  double brightness_lo = 0.95, brightness_hi = 1.15;
  double gamma_lo = 0.85, gamma_hi = 1.0;
  double noise_lo = 0.01, noise_hi = 0.02;
  double blur_lo = 0.8, blur_hi = 1.2;

  void validate() const {
    auto ok = [](double lo, double hi) { return lo <= hi; };
    if (!ok(hue_lo, hue_hi) || !ok(vessel_lo, vessel_hi) ||
        !ok(brightness_lo, brightness_hi) || !ok(gamma_lo, gamma_hi) ||
        !ok(noise_lo, noise_hi) || !ok(blur_lo, blur_hi))
      throw ValidationError("StyleRange: lo > hi");
  }

  StyleParams sample(Rng& rng) const {
    StyleParams s;
    s.base_hue = rng.uniform(hue_lo, hue_hi);
    s.vessel_density = rng.uniform(vessel_lo, vessel_hi);
    s.brightness_gain = rng.uniform(brightness_lo, brightness_hi);
    s.contrast_gamma = rng.uniform(gamma_lo, gamma_hi);
    s.noise_sigma = rng.uniform(noise_lo, noise_hi);
    s.blur_sigma = rng.uniform(blur_lo, blur_hi);
    s.texture_seed = rng.next_u64();
    return s;
  }
};

inline void to_json(nlohmann::json& j, const StyleRange& r) {
  j = nlohmann::json{{"hue", {r.hue_lo, r.hue_hi}},
                     {"vessel", {r.vessel_lo, r.vessel_hi}},
                     {"brightness", {r.brightness_lo, r.brightness_hi}},
                     {"gamma", {r.gamma_lo, r.gamma_hi}},
                     {"noise", {r.noise_lo, r.noise_hi}},
                     {"blur", {r.blur_lo, r.blur_hi}}};
}

inline void from_json(const nlohmann::json& j, StyleRange& r) {
  auto get = [&](const char* k, double& lo, double& hi) {
    if (!j.contains(k)) return;
    const auto& a = j.at(k);
    if (!a.is_array() || a.size() != 2)
      throw ValidationError(std::string("StyleRange: '") + k +
                            "' must be a [lo, hi] pair");
    lo = a[0];
    hi = a[1];
  };
  get("hue", r.hue_lo, r.hue_hi);
  get("vessel", r.vessel_lo, r.vessel_hi);
  get("brightness", r.brightness_lo, r.brightness_hi);
  get("gamma", r.gamma_lo, r.gamma_hi);
  get("noise", r.noise_lo, r.noise_hi);
  get("blur", r.blur_lo, r.blur_hi);
}

inline StyleRange default_source_style() { return StyleRange{}; }

inline StyleRange default_target_style() {
  StyleRange r;
  r.hue_lo = -12;
  r.hue_hi = 0;
  r.brightness_lo = 0.50;
  r.brightness_hi = 0.65;
  r.gamma_lo = 1.5;
  r.gamma_hi = 1.9;
  r.noise_lo = 0.03;
  r.noise_hi = 0.05;
  r.blur_lo = 2.2;
  r.blur_hi = 3.0;
  return r;
}

struct DatasetConfig {
  std::int64_t n_source = 32;
  std::int64_t n_target = 32;
  std::int64_t size = 192;
  std::uint64_t seed = 1;
  StyleRange source_style = default_source_style();
  StyleRange target_style = default_target_style();

  // separation of the two style ranges, summed over fields after scaling
  // each to a comparable magnitude; zero when every interval pair overlaps
  double shift_magnitude() const {
    auto gap = [](double alo, double ahi, double blo, double bhi) {
      return std::max(0.0, std::max(alo, blo) - std::min(ahi, bhi));
    };
    const StyleRange &s = source_style, &t = target_style;
    double m = 0;
    m += gap(s.hue_lo, s.hue_hi, t.hue_lo, t.hue_hi) / 60.0;
    m += gap(s.brightness_lo, s.brightness_hi, t.brightness_lo,
             t.brightness_hi) / 0.5;
    m += gap(s.gamma_lo, s.gamma_hi, t.gamma_lo, t.gamma_hi) / 1.0;
    m += gap(s.noise_lo, s.noise_hi, t.noise_lo, t.noise_hi) / 0.05;
    m += gap(s.blur_lo, s.blur_hi, t.blur_lo, t.blur_hi) / 2.0;
    return m;
  }

  void validate() const {
    if (n_source < 1 || n_target < 1)
      throw ValidationError("DatasetConfig: need at least one sample per domain");
    if (size < 64) throw ValidationError("DatasetConfig: size must be >= 64");
    source_style.validate();
    target_style.validate();
    if (shift_magnitude() <= 0)
      throw ValidationError(
          "DatasetConfig: style ranges overlap everywhere; declared shift "
          "magnitude must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = nlohmann::json{{"n_source", c.n_source},
                     {"n_target", c.n_target},
                     {"size", c.size},
                     {"seed", c.seed},
                     {"source_style", c.source_style},
                     {"target_style", c.target_style}};
}

inline void from_json(const nlohmann::json& j, DatasetConfig& c) {
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("n_source", c.n_source);
  get("n_target", c.n_target);
  get("size", c.size);
  get("seed", c.seed);
  get("source_style", c.source_style);
  get("target_style", c.target_style);
}

namespace detail {

inline GeometryParams sample_geometry(Rng& rng, std::int64_t size) {
  GeometryParams g;
  g.disc_radius = rng.uniform(0.18, 0.26) * static_cast<double>(size);
  g.cup_radius_ratio = rng.uniform(0.35, 0.65);
  g.ellipse_eccentricity = rng.uniform(0.0, 0.25);
  g.rotation = rng.uniform(0.0, M_PI);
  const double wobble = 0.08 * static_cast<double>(size);
  g.cx = size / 2.0 + rng.uniform(-wobble, wobble);
  g.cy = size / 2.0 + rng.uniform(-wobble, wobble);
  return g;
}

inline std::string sample_id(Domain d, std::int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%03lld", domain_name(d),
                static_cast<long long>(i));
  return buf;
}

}  // namespace detail

// Writes images/{id}.png, od/{id}.png, oc/{id}.png and manifest.jsonl.
// Regeneration with the same config is byte-identical.
inline void generate_dataset(const DatasetConfig& config,
                             const std::filesystem::path& out_dir,
                             bool force = false) {
  namespace fs = std::filesystem;
  config.validate();
  if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
    if (!force)
      throw RuntimeFailure("dataset directory already exists: " +
                           out_dir.string() + " (pass force to regenerate)");
    fs::remove_all(out_dir);
  }
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "od");
  fs::create_directories(out_dir / "oc");

  std::ofstream manifest(out_dir / "manifest.jsonl", std::ios::trunc);
  if (!manifest)
    throw RuntimeFailure("cannot write manifest in " + out_dir.string());

  for (Domain d : {Domain::Source, Domain::Target}) {
    const std::int64_t n = d == Domain::Source ? config.n_source : config.n_target;
    const StyleRange& range =
        d == Domain::Source ? config.source_style : config.target_style;
    for (std::int64_t i = 0; i < n; ++i) {
      const std::uint64_t sample_seed = hash_combine(
          config.seed, static_cast<std::uint64_t>(d == Domain::Target), i);
      Rng grng(hash_combine(sample_seed, 0x6e0ULL));
      Rng srng(hash_combine(sample_seed, 0x57aULL));
      const GeometryParams geom = detail::sample_geometry(grng, config.size);
      const StyleParams style = range.sample(srng);
      FundusSample s = generate_sample(sample_seed, geom, style, config.size);
      s.domain = d;

      const std::string id = detail::sample_id(d, i);
      image::write_png(out_dir / "images" / (id + ".png"),
                       image::chw_to_mat8(s.image));
      image::write_png(out_dir / "od" / (id + ".png"),
                       image::mask_to_mat8(s.od_mask));
      image::write_png(out_dir / "oc" / (id + ".png"),
                       image::mask_to_mat8(s.oc_mask));

      nlohmann::json rec;
      rec["id"] = id;
      rec["domain"] = domain_name(d);
      rec["disc_center"] = {s.cx, s.cy};
      rec["seed"] = sample_seed;
      manifest << rec.dump() << "\n";
    }
  }
}

struct ManifestEntry {
  std::string id;
  Domain domain = Domain::Source;
  double cx = 0, cy = 0;
  std::uint64_t seed = 0;
};

// Lazy dataset reader. Target-domain label reads are counted so training can
// prove it never touched them.
class Dataset {
 public:
  explicit Dataset(std::filesystem::path root) : root_(std::move(root)) {
    const auto manifest_path = root_ / "manifest.jsonl";
    std::ifstream in(manifest_path);
    if (!in)
      throw RuntimeFailure("missing manifest: " + manifest_path.string());
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json rec;
      try {
        rec = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw RuntimeFailure("corrupt manifest line " + std::to_string(line_no) +
                             " in " + manifest_path.string() + ": " + e.what());
      }
      ManifestEntry m;
      m.id = rec.at("id");
      m.domain = domain_from_string(rec.at("domain"));
      m.cx = rec.at("disc_center")[0];
      m.cy = rec.at("disc_center")[1];
      m.seed = rec.at("seed");
      entries_.push_back(std::move(m));
    }
    if (entries_.empty())
      throw RuntimeFailure("empty manifest: " + manifest_path.string());
  }

  std::size_t size() const { return entries_.size(); }
  const ManifestEntry& entry(std::size_t i) const { return entries_.at(i); }
  const std::filesystem::path& root() const { return root_; }

  std::vector<std::size_t> domain_indices(Domain d) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].domain == d) out.push_back(i);
    return out;
  }

  // image + center only; never opens the mask files
  FundusSample load_image(std::size_t i) const {
    const ManifestEntry& m = entry(i);
    FundusSample s;
    s.image = image::mat8_to_chw<double>(image::read_png(
        root_ / "images" / (m.id + ".png"), cv::IMREAD_COLOR));
    s.cx = m.cx;
    s.cy = m.cy;
    s.has_center = true;
    s.domain = m.domain;
    return s;
  }

  FundusSample load_labeled(std::size_t i) const {
    const ManifestEntry& m = entry(i);
    if (m.domain == Domain::Target) ++target_label_reads_;
    FundusSample s = load_image(i);
    const auto od_path = root_ / "od" / (m.id + ".png");
    const auto oc_path = root_ / "oc" / (m.id + ".png");
    s.od_mask = image::mask_from_mat8<double>(
        image::read_png(od_path, cv::IMREAD_GRAYSCALE), od_path.string());
    s.oc_mask = image::mask_from_mat8<double>(
        image::read_png(oc_path, cv::IMREAD_GRAYSCALE), oc_path.string());
    if (!s.od_mask.same_shape(s.oc_mask) ||
        s.od_mask.dim(0) != s.image.dim(1) || s.od_mask.dim(1) != s.image.dim(2))
      throw RuntimeFailure("mask/image shape mismatch for sample " + m.id);
    for (std::int64_t k = 0; k < s.oc_mask.numel(); ++k)
      if (s.oc_mask[k] > s.od_mask[k])
        throw RuntimeFailure("cup outside disc in stored masks for sample " +
                             m.id);
    return s;
  }

  std::int64_t target_label_reads() const { return target_label_reads_; }
  void reset_label_counter() { target_label_reads_ = 0; }

 private:
  std::filesystem::path root_;
  std::vector<ManifestEntry> entries_;
  mutable std::int64_t target_label_reads_ = 0;
};

}  // namespace beal::synthdata
