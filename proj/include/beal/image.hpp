#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "beal/tensor.hpp"

namespace beal::image {

// (3,H,W) RGB tensor in [0,1] -> 8-bit BGR mat (OpenCV's storage order).
template <typename T>
cv::Mat chw_to_mat8(const Tensor<T>& img) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw ValidationError("chw_to_mat8: expected (3,H,W) tensor, got " +
                          img.shape_string());
  const int h = static_cast<int>(img.dim(1)), w = static_cast<int>(img.dim(2));
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  cv::Mat m(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      const std::int64_t i = static_cast<std::int64_t>(y) * w + x;
      for (int c = 0; c < 3; ++c) {
        // channel 2-c: tensor stores RGB, the mat stores BGR
        const double v =
            std::clamp(static_cast<double>(img[(2 - c) * plane + i]), 0.0, 1.0);
        row[x][c] = static_cast<unsigned char>(v * 255.0 + 0.5);
      }
    }
  }
  return m;
}

template <typename T>
Tensor<T> mat8_to_chw(const cv::Mat& m) {
  if (m.type() != CV_8UC3)
    throw ValidationError("mat8_to_chw: expected an 8-bit 3-channel image");
  const int h = m.rows, w = m.cols;
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor<T> img({3, h, w});
  for (int y = 0; y < h; ++y) {
    const auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      const std::int64_t i = static_cast<std::int64_t>(y) * w + x;
      for (int c = 0; c < 3; ++c)
        img[(2 - c) * plane + i] = static_cast<T>(row[x][c]) / T(255);
    }
  }
  return img;
}

// (H,W) {0,1} mask -> 8-bit {0,255} single-channel mat.
template <typename T>
cv::Mat mask_to_mat8(const Tensor<T>& mask) {
  if (mask.rank() != 2)
    throw ValidationError("mask_to_mat8: expected (H,W) tensor, got " +
                          mask.shape_string());
  const int h = static_cast<int>(mask.dim(0)), w = static_cast<int>(mask.dim(1));
  cv::Mat m(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y) {
    auto* row = m.ptr<unsigned char>(y);
    for (int x = 0; x < w; ++x) {
      const T v = mask[static_cast<std::int64_t>(y) * w + x];
      if (v != T(0) && v != T(1))
        throw ValidationError("mask_to_mat8: mask is not {0,1}-valued");
      row[x] = v == T(1) ? 255 : 0;
    }
  }
  return m;
}

template <typename T>
Tensor<T> mask_from_mat8(const cv::Mat& m, const std::string& context) {
  if (m.type() != CV_8UC1)
    throw RuntimeFailure("corrupt mask (wrong pixel format): " + context);
  Tensor<T> mask({m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<unsigned char>(y);
    for (int x = 0; x < m.cols; ++x) {
      if (row[x] != 0 && row[x] != 255)
        throw RuntimeFailure("corrupt mask (non-binary value " +
                             std::to_string(int(row[x])) + "): " + context);
      mask[static_cast<std::int64_t>(y) * m.cols + x] = row[x] ? T(1) : T(0);
    }
  }
  return mask;
}

inline void write_png(const std::filesystem::path& path, const cv::Mat& m) {
  std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m))
    throw RuntimeFailure("failed to write image: " + path.string());
}

inline cv::Mat read_png(const std::filesystem::path& path, int flags) {
  if (!std::filesystem::exists(path))
    throw RuntimeFailure("missing image file: " + path.string());
  cv::Mat m = cv::imread(path.string(), flags);
  if (m.empty())
    throw RuntimeFailure("unreadable image file: " + path.string());
  return m;
}

}  // namespace beal::image
