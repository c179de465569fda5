// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "t4dg/image.hpp"

namespace t4dg::metrics {

// Cap reported when the mean squared error is exactly zero.
inline constexpr double kPsnrCap = 99.0;

// 10*log10(1/MSE) over all channels; identical images return the cap.
// Throws ShapeError if the extents differ.
double psnr(const Image& a, const Image& b);

// Windowed structural similarity on the luma channel (0.299/0.587/0.114),
// 11x11 Gaussian window with sigma 1.5, C1=(0.01)^2, C2=(0.03)^2, averaged
// over windows that fit entirely inside the image.
// Throws ShapeError if the extents differ or the image is smaller than the window.
double ssim(const Image& a, const Image& b);

struct MetricReport {
    std::vector<double> psnr_frames;
    std::vector<double> ssim_frames;
    double psnr_mean = 0.0;
    double ssim_mean = 0.0;
};

// Per-frame psnr/ssim plus means; sequences must have equal length >= 1.
MetricReport compare_sequences(const std::vector<Image>& pred, const std::vector<Image>& gt);

// CSV with header "frame,psnr,ssim", one row per frame, then a "mean" row.
void write_report_csv(const std::string& path, const MetricReport& report);

} // namespace t4dg::metrics
