// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "t4dg/common.hpp"

namespace t4dg {

// Row-major RGB image, values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> rgb; // height * width * 3

    Image() = default;
    Image(int h, int w, float fill = 0.0f)
        : height(h), width(w), rgb(static_cast<size_t>(h) * w * 3, fill) {}

    float& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const {
        return rgb[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    int64_t pixels() const { return static_cast<int64_t>(height) * width; }
};

// Binary PPM (P6, maxval 255). Values are clamped to [0, 1] and rounded on
// write; reads reverse the 1/255 quantization.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

} // namespace t4dg
