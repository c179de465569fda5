// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "t4dg/common.hpp"
#include "t4dg/metrics.hpp"
#include "t4dg/rng.hpp"

using namespace t4dg;
using namespace t4dg::metrics;

namespace {

Image random_image(int h, int w, uint64_t seed) {
    Image img(h, w);
    Rng rng(seed);
    for (auto& v : img.rgb) v = static_cast<float>(rng.uniform());
    return img;
}

// Independent recomputation of 10*log10(1/MSE) from first principles.
double psnr_oracle(const Image& a, const Image& b) {
    double mse = 0.0;
    for (size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = double(a.rgb[i]) - double(b.rgb[i]);
        mse += d * d;
    }
    mse /= double(a.rgb.size());
    return 10.0 * std::log10(1.0 / mse);
}

} // namespace

TEST_SUITE("metrics") {

TEST_CASE("identical images hit the psnr cap and ssim one exactly") {
    Image a = random_image(16, 20, 3);
    CHECK(psnr(a, a) == 99.0);
    CHECK(ssim(a, a) == 1.0);
}

TEST_CASE("known constant gap gives the textbook psnr") {
    Image zero(12, 12, 0.0f);
    Image half(12, 12, 0.5f);
    CHECK(psnr(zero, half) == doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-12));
}

TEST_CASE("psnr matches a direct recomputation on random pairs") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Image a = random_image(14, 17, seed);
        Image b = random_image(14, 17, seed + 100);
        CHECK(std::fabs(psnr(a, b) - psnr_oracle(a, b)) <= 1e-9);
        CHECK(psnr(a, b) >= 0.0); // values in [0,1] bound MSE by 1
    }
}

TEST_CASE("extent mismatches and undersized ssim inputs are rejected") {
    Image a(12, 12), b(12, 13), tiny(10, 12), tiny2(10, 12);
    CHECK_THROWS_AS(psnr(a, b), ShapeError);
    CHECK_THROWS_AS(ssim(a, b), ShapeError);
    CHECK_THROWS_AS(ssim(tiny, tiny2), ShapeError);
    CHECK_NOTHROW(ssim(Image(11, 11), Image(11, 11))); // exactly one window fits
}

TEST_CASE("ssim is negative against the photographic negative") {
    Image a(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            for (int c = 0; c < 3; ++c) a.at(y, x, c) = ((x + y) % 2 == 0) ? 0.3f : 0.7f;
    Image neg(16, 16);
    for (size_t i = 0; i < a.rgb.size(); ++i) neg.rgb[i] = 1.0f - a.rgb[i];
    CHECK(ssim(a, neg) < 0.0);
}

TEST_CASE("constant images follow the closed-form ssim") {
    Image a(13, 15, 0.3f);
    Image b(13, 15, 0.4f);
    // Variances vanish for constants, so only the luminance term remains:
    // (2*mu_a*mu_b + C1) / (mu_a^2 + mu_b^2 + C1).
    const double c1 = 1e-4;
    const double expect = (2.0 * 0.3 * 0.4 + c1) / (0.3 * 0.3 + 0.4 * 0.4 + c1);
    CHECK(ssim(a, b) == doctest::Approx(expect).epsilon(1e-7));
}

TEST_CASE("both metrics are symmetric and ssim never exceeds one") {
    for (uint64_t seed = 0; seed < 4; ++seed) {
        Image a = random_image(15, 13, seed);
        Image b = random_image(15, 13, seed + 50);
        CHECK(std::fabs(psnr(a, b) - psnr(b, a)) <= 1e-9);
        CHECK(std::fabs(ssim(a, b) - ssim(b, a)) <= 1e-9);
        CHECK(ssim(a, b) <= 1.0);
        CHECK(ssim(a, b) >= -1.0);
    }
}

TEST_CASE("sequence reports aggregate the per-frame metrics") {
    std::vector<Image> pred, gt;
    for (uint64_t i = 0; i < 3; ++i) {
        pred.push_back(random_image(12, 12, i));
        gt.push_back(random_image(12, 12, i + 9));
    }
    MetricReport r = compare_sequences(pred, gt);
    REQUIRE(r.psnr_frames.size() == 3);
    REQUIRE(r.ssim_frames.size() == 3);
    double pm = 0, sm = 0;
    for (size_t i = 0; i < 3; ++i) {
        CHECK(r.psnr_frames[i] == psnr(pred[i], gt[i]));
        CHECK(r.ssim_frames[i] == ssim(pred[i], gt[i]));
        pm += r.psnr_frames[i];
        sm += r.ssim_frames[i];
    }
    CHECK(r.psnr_mean == doctest::Approx(pm / 3.0).epsilon(1e-12));
    CHECK(r.ssim_mean == doctest::Approx(sm / 3.0).epsilon(1e-12));
    CHECK_THROWS_AS(compare_sequences(pred, {gt[0]}), ConfigError);
    CHECK_THROWS_AS(compare_sequences({}, {}), ConfigError);
}

TEST_CASE("csv reports carry one row per frame plus a mean row") {
    MetricReport r;
    r.psnr_frames = {30.5, 28.25};
    r.ssim_frames = {0.91, 0.87};
    r.psnr_mean = 29.375;
    r.ssim_mean = 0.89;
    const std::string path = "/tmp/t4dg_metrics_report.csv";
    write_report_csv(path, r);
    std::ifstream in(path);
    REQUIRE(in);
    std::string line;
    std::getline(in, line);
    CHECK(line == "frame,psnr,ssim");
    std::getline(in, line);
    CHECK(line == "0,30.500000,0.910000");
    std::getline(in, line);
    CHECK(line == "1,28.250000,0.870000");
    std::getline(in, line);
    CHECK(line == "mean,29.375000,0.890000");
    CHECK(!std::getline(in, line));
    std::remove(path.c_str());
}

} // TEST_SUITE
