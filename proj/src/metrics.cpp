// SPDX-License-Identifier: Apache-2.0
#include "t4dg/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "t4dg/common.hpp"

namespace t4dg::metrics {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void require_same_extents(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width)
        throw ShapeError("metric inputs must share extents: " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                         std::to_string(b.width));
}

std::vector<double> luma(const Image& img) {
    std::vector<double> out(static_cast<size_t>(img.height) * static_cast<size_t>(img.width));
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out[static_cast<size_t>(y * img.width + x)] =
                0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
    return out;
}

const std::array<double, kWindow * kWindow>& gaussian_window() {
    static const std::array<double, kWindow * kWindow> w = [] {
        std::array<double, kWindow * kWindow> g{};
        double total = 0.0;
        for (int i = 0; i < kWindow; ++i)
            for (int j = 0; j < kWindow; ++j) {
                const double di = i - kWindow / 2, dj = j - kWindow / 2;
                g[static_cast<size_t>(i * kWindow + j)] =
                    std::exp(-(di * di + dj * dj) / (2.0 * kSigma * kSigma));
                total += g[static_cast<size_t>(i * kWindow + j)];
            }
        for (double& v : g) v /= total;
        return g;
    }();
    return w;
}

} // namespace

double psnr(const Image& a, const Image& b) {
    require_same_extents(a, b);
    double mse = 0.0;
    for (size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = static_cast<double>(a.rgb[i]) - static_cast<double>(b.rgb[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.rgb.size());
    if (mse == 0.0) return kPsnrCap;
    return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Image& a, const Image& b) {
    require_same_extents(a, b);
    if (a.height < kWindow || a.width < kWindow)
        throw ShapeError("ssim needs images of at least " + std::to_string(kWindow) + "x" +
                         std::to_string(kWindow));
    const std::vector<double> xa = luma(a), xb = luma(b);
    const auto& w = gaussian_window();
    double total = 0.0;
    long count = 0;
    for (int y = 0; y + kWindow <= a.height; ++y)
        for (int x = 0; x + kWindow <= a.width; ++x) {
            double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
            for (int i = 0; i < kWindow; ++i)
                for (int j = 0; j < kWindow; ++j) {
                    const double wij = w[static_cast<size_t>(i * kWindow + j)];
                    const double va = xa[static_cast<size_t>((y + i) * a.width + (x + j))];
                    const double vb = xb[static_cast<size_t>((y + i) * a.width + (x + j))];
                    sa += wij * va;
                    sb += wij * vb;
                    saa += wij * va * va;
                    sbb += wij * vb * vb;
                    sab += wij * va * vb;
                }
            const double var_a = saa - sa * sa;
            const double var_b = sbb - sb * sb;
            const double cov = sab - sa * sb;
            const double num = (2.0 * sa * sb + kC1) * (2.0 * cov + kC2);
            const double den = (sa * sa + sb * sb + kC1) * (var_a + var_b + kC2);
            total += num / den;
            ++count;
        }
    return total / static_cast<double>(count);
}

MetricReport compare_sequences(const std::vector<Image>& pred, const std::vector<Image>& gt) {
    if (pred.size() != gt.size() || pred.empty())
        throw ConfigError("metric sequences must have equal nonzero length");
    MetricReport report;
    for (size_t i = 0; i < pred.size(); ++i) {
        report.psnr_frames.push_back(psnr(pred[i], gt[i]));
        report.ssim_frames.push_back(ssim(pred[i], gt[i]));
        report.psnr_mean += report.psnr_frames.back();
        report.ssim_mean += report.ssim_frames.back();
    }
    report.psnr_mean /= static_cast<double>(pred.size());
    report.ssim_mean /= static_cast<double>(pred.size());
    return report;
}

void write_report_csv(const std::string& path, const MetricReport& report) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "frame,psnr,ssim\n";
    char line[96];
    for (size_t i = 0; i < report.psnr_frames.size(); ++i) {
        std::snprintf(line, sizeof line, "%zu,%.6f,%.6f\n", i, report.psnr_frames[i],
                      report.ssim_frames[i]);
        out << line;
    }
    std::snprintf(line, sizeof line, "mean,%.6f,%.6f\n", report.psnr_mean, report.ssim_mean);
    out << line;
    if (!out) throw IoError("failed writing " + path);
}

} // namespace t4dg::metrics
